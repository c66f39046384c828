//! JSONL ingestion: read catalogs and interaction logs, group them into
//! per-user sessions, and write the normalized form back out. Normalized
//! output re-ingests to the same dataset, so ingestion is a fixed point.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Serialize, Serializer};

use super::types::{build_sessions, Catalog, Dataset, Interaction, ItemRecord};
use crate::error::{Error, Result};

/// One record per line; blank lines are skipped. Parse failures report the
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file =
        File::open(path).map_err(|e| Error::Data(format!("open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("read {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::Data(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Data(format!("serialize for {}: {e}", path.display())))?;
        writeln!(w, "{line}").map_err(|e| Error::Data(format!("write {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::Data(format!("flush {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestStats {
    pub n_items: usize,
    pub n_users: usize,
    pub n_interactions: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    #[serde(serialize_with = "fixed6")]
    pub mean_session_len: f64,
    pub min_ts: i64,
    pub max_ts: i64,
}

fn fixed6<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

/// Load both files, check every interaction against the catalog, and group
/// into time-sorted sessions.
pub fn ingest(items_path: &Path, interactions_path: &Path) -> Result<(Dataset, IngestStats)> {
    let records: Vec<ItemRecord> = read_jsonl(items_path)?;
    let interactions: Vec<Interaction> = read_jsonl(interactions_path)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} holds no items", items_path.display())));
    }
    if interactions.is_empty() {
        return Err(Error::Data(format!("{} holds no interactions", interactions_path.display())));
    }
    let catalog = Catalog::from_records(records)?;
    let sessions = build_sessions(&catalog, &interactions)?;
    let stats = summarize(&catalog, &sessions);
    Ok((Dataset { catalog, sessions }, stats))
}

fn summarize(catalog: &Catalog, sessions: &[crate::data::Session]) -> IngestStats {
    let lens: Vec<usize> = sessions.iter().map(|s| s.len()).collect();
    let total: usize = lens.iter().sum();
    let ts_iter = sessions.iter().flat_map(|s| s.ts.iter().copied());
    IngestStats {
        n_items: catalog.len(),
        n_users: sessions.len(),
        n_interactions: total,
        min_session_len: lens.iter().copied().min().unwrap_or(0),
        max_session_len: lens.iter().copied().max().unwrap_or(0),
        mean_session_len: total as f64 / sessions.len().max(1) as f64,
        min_ts: ts_iter.clone().min().unwrap_or(0),
        max_ts: ts_iter.max().unwrap_or(0),
    }
}

/// Flatten sessions back into interaction records, in session order. Feeding
/// this output through `ingest` again reproduces the same dataset.
pub fn normalized_interactions(dataset: &Dataset) -> Vec<Interaction> {
    let mut out = Vec::new();
    for s in &dataset.sessions {
        for j in 0..s.len() {
            out.push(Interaction {
                user_id: s.user_id.clone(),
                item_id: dataset.catalog.get(s.items[j]).item_id.clone(),
                ts: s.ts[j],
                behavior: s.behaviors[j],
            });
        }
    }
    out
}

/// Write `items.jsonl` and `interactions.jsonl` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let items: Vec<&ItemRecord> = dataset.catalog.iter().collect();
    write_jsonl(&dir.join("items.jsonl"), &items)?;
    write_jsonl(&dir.join("interactions.jsonl"), &normalized_interactions(dataset))
}

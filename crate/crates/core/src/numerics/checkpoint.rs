//! Checkpoints: a human-readable JSON manifest next to a raw little-endian
//! f32 blob. `save(prefix, ...)` writes `<prefix>.json` and `<prefix>.bin`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "tensor-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count; the byte length is 4x this.
    pub numel: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub byte_order: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub entries: Vec<ManifestEntry>,
}

/// One named tensor to serialize.
pub struct Section<'a> {
    pub name: String,
    pub shape: &'a [usize],
    pub data: &'a [f32],
}

fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut json = prefix.as_os_str().to_owned();
    json.push(".json");
    let mut bin = prefix.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

/// Write sections sorted by name, plus free-form metadata.
pub fn save(
    prefix: &Path,
    mut sections: Vec<Section<'_>>,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    sections.sort_by(|a, b| a.name.cmp(&b.name));
    for pair in sections.windows(2) {
        if pair[0].name == pair[1].name {
            return Err(Error::Contract(format!(
                "duplicate checkpoint section {}",
                pair[0].name
            )));
        }
    }
    let mut entries = Vec::with_capacity(sections.len());
    let mut offset = 0u64;
    for s in &sections {
        let numel: usize = s.shape.iter().product();
        if numel != s.data.len() {
            return Err(Error::Shape(format!(
                "section {}: shape {:?} wants {} elements, data has {}",
                s.name,
                s.shape,
                numel,
                s.data.len()
            )));
        }
        entries.push(ManifestEntry {
            name: s.name.clone(),
            shape: s.shape.to_vec(),
            dtype: "f32".into(),
            offset,
            numel: numel as u64,
        });
        offset += 4 * numel as u64;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        byte_order: "little".into(),
        meta,
        entries,
    };
    let (json_path, bin_path) = paths(prefix);
    if let Some(dir) = json_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(&bin_path)?);
    for s in &sections {
        for &v in s.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let mut mw = BufWriter::new(File::create(&json_path)?);
    serde_json::to_writer_pretty(&mut mw, &manifest)?;
    mw.write_all(b"\n")?;
    mw.flush()?;
    Ok(())
}

pub struct Loaded {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Loaded {
    pub fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no section {name}")))
    }
}

pub fn load(prefix: &Path) -> Result<Loaded> {
    let (json_path, bin_path) = paths(prefix);
    let manifest: Manifest = serde_json::from_reader(BufReader::new(
        File::open(&json_path).map_err(|e| Error::Io(format!("{}: {e}", json_path.display())))?,
    ))?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    if manifest.byte_order != "little" {
        return Err(Error::Data(format!(
            "unsupported byte order {:?}",
            manifest.byte_order
        )));
    }
    let mut blob = Vec::new();
    File::open(&bin_path)
        .map_err(|e| Error::Io(format!("{}: {e}", bin_path.display())))?
        .read_to_end(&mut blob)?;
    let mut tensors = BTreeMap::new();
    for e in &manifest.entries {
        if e.dtype != "f32" {
            return Err(Error::Data(format!("section {}: dtype {} unsupported", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if numel as u64 != e.numel {
            return Err(Error::Data(format!(
                "section {}: shape {:?} disagrees with numel {}",
                e.name, e.shape, e.numel
            )));
        }
        let start = e.offset as usize;
        let end = start + 4 * numel;
        if end > blob.len() {
            return Err(Error::Data(format!(
                "section {}: blob ends at {} but entry wants {}..{}",
                e.name,
                blob.len(),
                start,
                end
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.insert(e.name.clone(), (e.shape.clone(), data)).is_some() {
            return Err(Error::Data(format!("duplicate checkpoint section {}", e.name)));
        }
    }
    Ok(Loaded { manifest, tensors })
}

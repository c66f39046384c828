//! End-to-end runs: configuration, the epoch loop with per-epoch
//! evaluation, checkpointing for bit-exact resumption, and the scaling and
//! ablation studies. Timing is reported in a separate structure so the main
//! report stays byte-identical across equal-seed runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::synthetic::SyntheticSpec;
use crate::data::types::{Catalog, Dataset};
use crate::error::{Error, Result};
use crate::evalkit::EvalReport;
use crate::htfl::{Codebook, FeatureSchema, ItemTokens};
use crate::model::{Ablation, Model, ModelConfig};
use crate::numerics::checkpoint::{self, Section};
use crate::numerics::ParamStore;

use super::adam::{Adam, AdamConfig};
use super::batch::epoch_batches;
use super::train::{evaluate, leave_one_out, train_step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schema: FeatureSchema,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub cutoffs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            schema: SyntheticSpec::default().schema(),
            batch_size: 64,
            epochs: 10,
            optimizer: AdamConfig::default(),
            seed: 17,
            cutoffs: vec![5, 10, 50],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schema.validate(self.model.d_f)?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.cutoffs.is_empty() || self.cutoffs.iter().any(|&n| n == 0) {
            return Err(Error::Config("cutoffs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f32,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub ablation: String,
    pub param_count: usize,
    pub epochs: Vec<EpochReport>,
}

/// Wall-clock numbers, kept out of RunReport so reports stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_secs: f64,
    pub epoch_secs: Vec<f64>,
}

#[derive(Debug)]
pub struct Run {
    pub model: Model,
    pub opt: Adam,
    pub report: RunReport,
    pub timing: TimingReport,
}

/// Train from scratch on the dataset's leave-one-out split.
pub fn run_experiment(cfg: &TrainConfig, dataset: &Dataset) -> Result<Run> {
    cfg.validate()?;
    let cb = Codebook::fit(&cfg.schema, &dataset.catalog)?;
    let model = Model::new(cfg.model.clone(), cb, cfg.seed)?;
    let opt = Adam::new(cfg.optimizer);
    run_from(cfg, dataset, model, opt, 0)
}

/// Continue a run from `start_epoch`; epoch shuffles depend only on
/// (seed, epoch), so a resumed run replays the uninterrupted schedule.
pub fn run_from(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut model: Model,
    mut opt: Adam,
    start_epoch: usize,
) -> Result<Run> {
    cfg.validate()?;
    if start_epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "start epoch {start_epoch} beyond configured {} epochs",
            cfg.epochs
        )));
    }
    let toks = model.cb.tokenize_catalog(&dataset.catalog)?;
    let ids: Vec<String> = dataset.catalog.iter().map(|r| r.item_id.clone()).collect();
    let split = leave_one_out(&dataset.sessions, cfg.model.t_max);

    let t0 = Instant::now();
    let mut epochs = Vec::new();
    let mut epoch_secs = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let e0 = Instant::now();
        let mean_loss = train_one_epoch(&mut model, &mut opt, &toks, &split.train, cfg, epoch)?;
        let eval = evaluate(&model, &toks, &ids, &split.eval, &cfg.cutoffs)?;
        epochs.push(EpochReport { epoch, mean_loss, eval });
        epoch_secs.push(e0.elapsed().as_secs_f64());
    }
    let report = RunReport {
        config: cfg.clone(),
        ablation: cfg.model.ablation.label(),
        param_count: model.store.total_elems(),
        epochs,
    };
    let timing = TimingReport { total_secs: t0.elapsed().as_secs_f64(), epoch_secs };
    Ok(Run { model, opt, report, timing })
}

pub fn train_one_epoch(
    model: &mut Model,
    opt: &mut Adam,
    toks: &[ItemTokens],
    train_sessions: &[crate::data::Session],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f32> {
    let batches =
        epoch_batches(train_sessions, cfg.model.t_max, cfg.batch_size, cfg.seed, epoch)?;
    let mut total = 0.0;
    for batch in &batches {
        total += train_step(model, opt, toks, batch)?.loss;
    }
    Ok(total / batches.len() as f32)
}

/// Model params plus optimizer moments under one checkpoint prefix.
pub fn save_state(prefix: &Path, model: &Model, opt: &Adam, epoch: usize) -> Result<()> {
    let shapes: BTreeMap<String, Vec<usize>> =
        model.store.iter().map(|(n, p)| (n.clone(), p.shape.clone())).collect();
    let mut sections: Vec<Section> = model
        .store
        .iter()
        .map(|(n, p)| Section { name: n.clone(), shape: &p.shape, data: &p.data })
        .collect();
    sections.extend(opt.sections(&shapes));
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), json!(epoch));
    meta.insert("adam_t".to_string(), json!(opt.t));
    meta.insert("ablation".to_string(), json!(model.cfg.ablation.label()));
    checkpoint::save(prefix, sections, meta)
}

/// Rebuild (model, optimizer, next epoch) from a checkpoint. The codebook
/// is refit from the catalog, which is deterministic, and the loaded params
/// are validated against the config's expected shapes.
pub fn load_state(
    prefix: &Path,
    cfg: &TrainConfig,
    catalog: &Catalog,
) -> Result<(Model, Adam, usize)> {
    let loaded = checkpoint::load(prefix)?;
    let epoch = loaded
        .manifest
        .meta
        .get("epoch")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data("checkpoint lacks an epoch marker".into()))?
        as usize;
    let adam_t = loaded
        .manifest
        .meta
        .get("adam_t")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data("checkpoint lacks the optimizer step count".into()))?;

    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut store = ParamStore::new();
    for (name, (shape, data)) in loaded.tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.insert(rest.to_string(), data);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.insert(rest.to_string(), data);
        } else {
            store.insert(&name, &shape, data)?;
        }
    }
    let cb = Codebook::fit(&cfg.schema, catalog)?;
    let model = Model::with_store(cfg.model.clone(), cb, store)?;
    Ok((model, Adam::from_parts(cfg.optimizer, adam_t, m, v), epoch))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::Data(format!("mkdir {}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("write {}: {e}", path.display())))
}

pub const SCALING_PAIRS: [(usize, usize); 7] =
    [(1, 1), (1, 2), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6)];

/// Train the seven depth pairs and write one report per pair.
pub fn study_scaling(
    base: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
) -> Result<Vec<(usize, usize, RunReport)>> {
    let mut runs = Vec::new();
    for (n1, n2) in SCALING_PAIRS {
        let mut cfg = base.clone();
        cfg.model.n1 = n1;
        cfg.model.n2 = n2;
        let run = run_experiment(&cfg, dataset)?;
        write_json(&out.join(format!("scaling_{n1}_{n2}.json")), &run.report)?;
        write_json(&out.join(format!("scaling_{n1}_{n2}.timing.json")), &run.timing)?;
        runs.push((n1, n2, run.report));
    }
    Ok(runs)
}

pub const ABLATION_VARIANTS: [&str; 6] =
    ["full", "htfl_off", "mfk_off", "hct_off", "lmp_off", "tlmp_off"];

/// Train the full model and the five single-flag ablations.
pub fn study_ablation(
    base: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
) -> Result<Vec<(String, RunReport)>> {
    let mut runs = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut cfg = base.clone();
        cfg.model.ablation =
            if variant == "full" { Ablation::default() } else { Ablation::parse(variant)? };
        let run = run_experiment(&cfg, dataset)?;
        write_json(&out.join(format!("ablation_{variant}.json")), &run.report)?;
        write_json(&out.join(format!("ablation_{variant}.timing.json")), &run.timing)?;
        runs.push((variant.to_string(), run.report));
    }
    Ok(runs)
}

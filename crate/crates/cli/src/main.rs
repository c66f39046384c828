//! Command-line surface: data generation and preparation, training,
//! evaluation, gradient checking, and the scaling/ablation studies.
//! Exit codes: 0 success, 1 data/runtime errors, 2 configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use heterrec::checks;
use heterrec::data::ingest::{ingest, write_jsonl};
use heterrec::data::synthetic::{generate, SyntheticSpec};
use heterrec::data::types::Dataset;
use heterrec::htfl::{Codebook, FeatureSchema};
use heterrec::numerics::set_corrupt_relu_backward;
use heterrec::trainer::{
    evaluate, leave_one_out, load_state, run_experiment, save_state, study_ablation,
    study_scaling, write_json, TrainConfig,
};
use heterrec::{Error, Result};

#[derive(Parser)]
#[command(name = "heterrec", version, about = "Sequential recommendation over heterogeneous item tokens")]
struct Cli {
    /// JSON config; meaning depends on the subcommand (synthetic spec,
    /// feature schema, or training config). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed found in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a planted-rule corpus: items.jsonl, interactions.jsonl, rule.json.
    GenSynthetic,
    /// Fit token codebooks from a schema (--config) and an item catalog.
    FitCodebook {
        #[arg(long)]
        items: PathBuf,
    },
    /// Ingest a data dir, write the normalized dataset plus a fitted codebook.
    Prepare {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on a data dir; writes report.json, timing.json, and a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on the held-out split of a data dir.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint prefix as written by train (no extension).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks over every primitive, a block, and the loss.
    GradCheck {
        /// Random seeds per check.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train the seven (n1, n2) depth pairs and write one report each.
    StudyScaling {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the full model and the five single-flag ablations.
    StudyAblation {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Configs parse strictly: a broken config file is a configuration error,
/// not a data error.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("parse {}: {e}", p.display())))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("create {}: {e}", dir.display())))
}

fn read_dataset(data: &Path) -> Result<Dataset> {
    let (dataset, stats) = ingest(&data.join("items.jsonl"), &data.join("interactions.jsonl"))?;
    eprintln!(
        "loaded {} items, {} users, {} interactions",
        stats.n_items, stats.n_users, stats.n_interactions
    );
    Ok(dataset)
}

fn cmd_gen_synthetic(cli: &Cli) -> Result<()> {
    let mut spec: SyntheticSpec = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let synth = generate(&spec)?;
    ensure_dir(&cli.out)?;
    write_jsonl(&cli.out.join("items.jsonl"), &synth.items)?;
    write_jsonl(&cli.out.join("interactions.jsonl"), &synth.interactions)?;
    write_json(&cli.out.join("rule.json"), &synth.rule)?;
    println!(
        "wrote {} items and {} interactions for {} users to {}",
        synth.items.len(),
        synth.interactions.len(),
        spec.n_users,
        cli.out.display()
    );
    Ok(())
}

fn cmd_fit_codebook(cli: &Cli, items: &Path) -> Result<()> {
    let schema: FeatureSchema = load_config::<SchemaFile>(cli.config.as_deref())?.0;
    let records = heterrec::data::read_jsonl(items)?;
    let catalog = heterrec::data::Catalog::from_records(records)?;
    let cb = Codebook::fit(&schema, &catalog)?;
    ensure_dir(&cli.out)?;
    let path = cli.out.join("codebook.json");
    cb.save(&path)?;
    println!("fitted {} features over {} items -> {}", cb.codes.len(), catalog.len(), path.display());
    Ok(())
}

/// FeatureSchema has no Default, so wrap it for load_config.
struct SchemaFile(FeatureSchema);

impl Default for SchemaFile {
    fn default() -> Self {
        SchemaFile(SyntheticSpec::default().schema())
    }
}

impl<'de> serde::Deserialize<'de> for SchemaFile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        FeatureSchema::deserialize(d).map(SchemaFile)
    }
}

fn cmd_prepare(cli: &Cli, data: &Path) -> Result<()> {
    let schema: FeatureSchema = load_config::<SchemaFile>(cli.config.as_deref())?.0;
    let (dataset, stats) = ingest(&data.join("items.jsonl"), &data.join("interactions.jsonl"))?;
    let cb = Codebook::fit(&schema, &dataset.catalog)?;
    ensure_dir(&cli.out)?;
    heterrec::data::write_dataset(&cli.out, &dataset)?;
    cb.save(&cli.out.join("codebook.json"))?;
    write_json(&cli.out.join("stats.json"), &stats)?;
    println!(
        "prepared {} users over {} items ({} interactions) -> {}",
        stats.n_users,
        stats.n_items,
        stats.n_interactions,
        cli.out.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, data: &Path) -> Result<()> {
    let mut cfg: TrainConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dataset = read_dataset(data)?;
    let run = run_experiment(&cfg, &dataset)?;
    ensure_dir(&cli.out)?;
    write_json(&cli.out.join("report.json"), &run.report)?;
    write_json(&cli.out.join("timing.json"), &run.timing)?;
    save_state(&cli.out.join("checkpoint"), &run.model, &run.opt, cfg.epochs)?;
    let last = run.report.epochs.last().expect("at least one epoch");
    let n = *cfg.cutoffs.iter().max().expect("validated non-empty");
    println!(
        "trained {} epochs (ablation {}), final loss {:.4}, recall@{} {:.4}",
        cfg.epochs, run.report.ablation, last.mean_loss, n, last.eval.recall[&n]
    );
    Ok(())
}

fn cmd_evaluate(cli: &Cli, data: &Path, checkpoint: &Path) -> Result<()> {
    let cfg: TrainConfig = load_config(cli.config.as_deref())?;
    cfg.validate()?;
    let dataset = read_dataset(data)?;
    let (model, _opt, _epoch) = load_state(checkpoint, &cfg, &dataset.catalog)?;
    let toks = model.cb.tokenize_catalog(&dataset.catalog)?;
    let ids: Vec<String> = dataset.catalog.iter().map(|r| r.item_id.clone()).collect();
    let split = leave_one_out(&dataset.sessions, cfg.model.t_max);
    let report = evaluate(&model, &toks, &ids, &split.eval, &cfg.cutoffs)?;
    ensure_dir(&cli.out)?;
    write_json(&cli.out.join("eval.json"), &report)?;
    for &n in &report.cutoffs {
        println!("recall@{n} {:.4}  ndcg@{n} {:.4}", report.recall[&n], report.ndcg[&n]);
    }
    Ok(())
}

fn cmd_grad_check(seeds: u64, corrupt: bool) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("grad-check needs at least one seed".into()));
    }
    if corrupt {
        set_corrupt_relu_backward(true);
    }
    let outcomes = checks::run_suite(seeds);
    if corrupt {
        set_corrupt_relu_backward(false);
    }
    let outcomes = outcomes?;
    let mut failures = 0;
    for o in &outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {} seed {} max_rel_err {:.3e}", o.name, o.seed, o.max_rel_err);
        failures += (!o.pass) as usize;
    }
    if failures > 0 {
        return Err(Error::Data(format!("{failures} gradient checks failed")));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

fn cmd_study_scaling(cli: &Cli, data: &Path) -> Result<()> {
    let mut cfg: TrainConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dataset = read_dataset(data)?;
    ensure_dir(&cli.out)?;
    let runs = study_scaling(&cfg, &dataset, &cli.out)?;
    for (n1, n2, rep) in &runs {
        let last = rep.epochs.last().expect("at least one epoch");
        let n = *cfg.cutoffs.iter().max().expect("validated non-empty");
        println!("n1={n1} n2={n2} recall@{n} {:.4}", last.eval.recall[&n]);
    }
    Ok(())
}

fn cmd_study_ablation(cli: &Cli, data: &Path) -> Result<()> {
    let mut cfg: TrainConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dataset = read_dataset(data)?;
    ensure_dir(&cli.out)?;
    let runs = study_ablation(&cfg, &dataset, &cli.out)?;
    for (variant, rep) in &runs {
        let last = rep.epochs.last().expect("at least one epoch");
        let n = *cfg.cutoffs.iter().max().expect("validated non-empty");
        println!("{variant} recall@{n} {:.4}", last.eval.recall[&n]);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenSynthetic => cmd_gen_synthetic(cli),
        Cmd::FitCodebook { items } => cmd_fit_codebook(cli, items),
        Cmd::Prepare { data } => cmd_prepare(cli, data),
        Cmd::Train { data } => cmd_train(cli, data),
        Cmd::Evaluate { data, checkpoint } => cmd_evaluate(cli, data, checkpoint),
        Cmd::GradCheck { seeds, corrupt_backward } => cmd_grad_check(*seeds, *corrupt_backward),
        Cmd::StudyScaling { data } => cmd_study_scaling(cli, data),
        Cmd::StudyAblation { data } => cmd_study_ablation(cli, data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

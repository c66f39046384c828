//! Datasets: catalog and interaction types, JSONL ingestion, and a
//! synthetic generator with a known-optimal predictor.

pub mod amazon;
pub mod ingest;
pub mod synthetic;
pub mod types;

pub use ingest::{ingest, read_jsonl, write_dataset, write_jsonl, IngestStats};
pub use synthetic::{generate, RuleFile, Synthetic, SyntheticSpec};
pub use types::{
    build_sessions, Behavior, Catalog, Dataset, FeatureValue, Interaction, ItemRecord, Session,
};

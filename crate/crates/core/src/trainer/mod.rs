//! Two-tower training: optimizer, batch assembly with in-batch negatives,
//! the step/epoch loop, checkpointed experiments, and the study harnesses.

pub mod adam;
pub mod batch;
pub mod experiment;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use batch::{assemble_batch, epoch_batches, TrainWindow};
pub use experiment::{
    load_state, run_experiment, run_from, save_state, study_ablation, study_scaling, write_json,
    Run, RunReport, TimingReport, TrainConfig, ABLATION_VARIANTS, SCALING_PAIRS,
};
pub use train::{
    accumulate, catalog_embeddings, evaluate, leave_one_out, train_step, user_embedding,
    EvalCase, Split, StepStats,
};

//! Sequential recommendation with heterogeneous item tokens: feature
//! flattening, a hierarchical causal transformer, a listwise multi-step
//! training objective, plus the autodiff, data, and evaluation machinery
//! to run it end to end on a single machine.

pub mod checks;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod hct;
pub mod htfl;
pub mod lmp;
pub mod model;
pub mod numerics;
pub mod towers;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use model::{Ablation, Model, ModelConfig};

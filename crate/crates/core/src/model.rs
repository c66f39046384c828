//! Model configuration and the bundle of codebook + parameters that the
//! trainer, evaluator, and CLI pass around.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::htfl::codebook::Codebook;
use crate::htfl::flatten;
use crate::numerics::ParamStore;
use crate::{lmp, towers};

/// Switches that remove one architectural ingredient at a time; they
/// compose freely.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Items enter as one concatenated feature vector instead of a token
    /// stream; all blocks run at the item level.
    pub htfl_off: bool,
    /// Multimodal vectors are linearly projected instead of quantized.
    pub mfk_off: bool,
    /// Flat stack with learned absolute positions, no hierarchy, no
    /// time-gap bias.
    pub hct_off: bool,
    /// The margin gates on multi-step terms are pinned open.
    pub lmp_off: bool,
    /// No token-level prediction tasks.
    pub tlmp_off: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] =
        ["htfl_off", "mfk_off", "hct_off", "lmp_off", "tlmp_off"];

    /// Parse a comma-separated list such as "htfl_off,lmp_off". Empty or
    /// "none" means the full model.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "none" => {}
                "htfl_off" => a.htfl_off = true,
                "mfk_off" => a.mfk_off = true,
                "hct_off" => a.hct_off = true,
                "lmp_off" => a.lmp_off = true,
                "tlmp_off" => a.tlmp_off = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation {other}; known: {}",
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut on: Vec<&str> = Vec::new();
        if self.htfl_off {
            on.push("htfl_off");
        }
        if self.mfk_off {
            on.push("mfk_off");
        }
        if self.hct_off {
            on.push("hct_off");
        }
        if self.lmp_off {
            on.push("lmp_off");
        }
        if self.tlmp_off {
            on.push("tlmp_off");
        }
        if on.is_empty() {
            "full".to_string()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token embedding width.
    pub d_f: usize,
    /// Item state width; also the match space of the two towers.
    pub d_k: usize,
    pub heads: usize,
    /// Token-level blocks.
    pub n1: usize,
    /// Item-level blocks.
    pub n2: usize,
    /// Feed-forward hidden width as a multiple of the block width.
    pub ffn_mult: usize,
    /// Longest item window the user tower accepts.
    pub t_max: usize,
    /// How many future items each position predicts.
    pub n_step: usize,
    pub tau: f32,
    /// Margin of the step gates.
    pub lambda_m: f32,
    pub time_buckets: usize,
    pub ln_eps: f32,
    /// true: softmax((QK^T + bias) / sqrt(d_head)); false: scale first,
    /// then add the bias.
    pub bias_inside_scale: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_f: 24,
            d_k: 24,
            heads: 2,
            n1: 2,
            n2: 2,
            ffn_mult: 2,
            t_max: 12,
            n_step: 3,
            tau: 0.2,
            lambda_m: 1.0,
            time_buckets: 32,
            ln_eps: 1e-5,
            bias_inside_scale: true,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let want = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        want(self.d_f > 0 && self.d_k > 0, "d_f and d_k must be positive")?;
        want(self.heads > 0 && self.d_f % self.heads == 0, "heads must divide d_f")?;
        want(self.d_k % self.heads == 0, "heads must divide d_k")?;
        want(self.n1 >= 1 && self.n2 >= 1, "n1 and n2 must be at least 1")?;
        want(self.ffn_mult >= 1, "ffn_mult must be at least 1")?;
        want(self.t_max >= 2, "t_max must be at least 2")?;
        want(self.n_step >= 1, "n_step must be at least 1")?;
        want(self.tau > 0.0, "tau must be positive")?;
        want(self.lambda_m >= 0.0, "lambda_m must be non-negative")?;
        want(self.time_buckets >= 2, "time_buckets must be at least 2")?;
        Ok(())
    }

    /// Token-level prediction tasks exist only when there is a token stream
    /// with a meaningful intermediate state.
    pub fn token_tasks_active(&self) -> bool {
        !(self.ablation.tlmp_off || self.ablation.htfl_off || self.ablation.hct_off)
    }
}

/// Everything needed to run the model: fitted tokenization, configuration,
/// and trainable parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub cb: Codebook,
    pub store: ParamStore,
}

impl Model {
    /// Fresh model with all parameters registered and initialized.
    pub fn new(cfg: ModelConfig, cb: Codebook, seed: u64) -> Result<Self> {
        cfg.validate()?;
        cb.schema.validate(cfg.d_f)?;
        let mut store = ParamStore::new();
        flatten::register_params(&mut store, &cb, cfg.d_f, !cfg.ablation.mfk_off, seed)?;
        towers::register_user_tower(&mut store, &cfg, &cb, seed)?;
        towers::register_item_tower(&mut store, &cfg, &cb, seed)?;
        lmp::register_heads(&mut store, &cfg, &cb, seed)?;
        Ok(Model { cfg, cb, store })
    }

    /// Rebuild a model around parameters restored from a checkpoint.
    pub fn with_store(cfg: ModelConfig, cb: Codebook, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        cb.schema.validate(cfg.d_f)?;
        let fresh = Model::new(cfg.clone(), cb.clone(), 0)?;
        for (name, p) in fresh.store.iter() {
            let got = store.get(name)?;
            if got.shape != p.shape {
                return Err(Error::Shape(format!(
                    "restored param {name} has shape {:?}, model wants {:?}",
                    got.shape, p.shape
                )));
            }
        }
        for name in store.names() {
            if !fresh.store.contains(name) {
                return Err(Error::Data(format!(
                    "restored store has unexpected param {name}"
                )));
            }
        }
        Ok(Model { cfg, cb, store })
    }
}

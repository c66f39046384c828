//! The two towers. The user tower runs token-level blocks over the
//! flattened stream, fuses each item's tokens, then runs item-level blocks;
//! the item tower embeds a single item's features through an MLP into the
//! same match space. Ablation switches reshape these paths.

use crate::error::{Error, Result};
use crate::hct::attention::{register_block, run_block, BlockCfg};
use crate::hct::mask::token_causal_mask;
use crate::hct::timegap::gap_ids;
use crate::htfl::codebook::{Codebook, ItemTokens};
use crate::htfl::flatten::embed_concat;
use crate::model::ModelConfig;
use crate::numerics::{Bound, Init, ParamStore, Tape, Tensor};

pub const POS_TABLE: &str = "user.pos.table";

/// User-tower outputs for one window: per-item states `[T, d_k]` and, when
/// a token stream exists, the post-token-block states `[T*K, d_f]`.
#[derive(Debug)]
pub struct UserStates {
    pub items: Tensor,
    pub tokens: Option<Tensor>,
}

fn tok_block_cfg(cfg: &ModelConfig) -> BlockCfg {
    BlockCfg {
        width: cfg.d_f,
        heads: cfg.heads,
        ffn_hidden: cfg.ffn_mult * cfg.d_f,
        ln_eps: cfg.ln_eps,
        bias_inside_scale: cfg.bias_inside_scale,
    }
}

fn item_block_cfg(cfg: &ModelConfig) -> BlockCfg {
    BlockCfg {
        width: cfg.d_k,
        heads: cfg.heads,
        ffn_hidden: cfg.ffn_mult * cfg.d_k,
        ln_eps: cfg.ln_eps,
        bias_inside_scale: cfg.bias_inside_scale,
    }
}

pub fn register_user_tower(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    cb: &Codebook,
    seed: u64,
) -> Result<()> {
    let k = cb.schema.tokens_per_item();
    let ab = cfg.ablation;
    match (ab.htfl_off, ab.hct_off) {
        (false, false) => {
            for i in 0..cfg.n1 {
                register_block(store, &format!("user.tok.{i}"), &tok_block_cfg(cfg), Some(cfg.time_buckets), seed)?;
            }
            for i in 0..cfg.n2 {
                register_block(store, &format!("user.item.{i}"), &item_block_cfg(cfg), Some(cfg.time_buckets), seed)?;
            }
        }
        (false, true) => {
            for i in 0..cfg.n1 + cfg.n2 {
                register_block(store, &format!("user.tok.{i}"), &tok_block_cfg(cfg), None, seed)?;
            }
            store.init(POS_TABLE, &[cfg.t_max * k, cfg.d_f], Init::Uniform { limit: 0.1 }, seed)?;
        }
        (true, false) => {
            for i in 0..cfg.n1 + cfg.n2 {
                register_block(store, &format!("user.item.{i}"), &item_block_cfg(cfg), Some(cfg.time_buckets), seed)?;
            }
        }
        (true, true) => {
            for i in 0..cfg.n1 + cfg.n2 {
                register_block(store, &format!("user.item.{i}"), &item_block_cfg(cfg), None, seed)?;
            }
            store.init(POS_TABLE, &[cfg.t_max, cfg.d_k], Init::Uniform { limit: 0.1 }, seed)?;
        }
    }
    store.init("user.fuse.w1", &[k * cfg.d_f, 2 * cfg.d_k], Init::FanIn, seed)?;
    store.init("user.fuse.b1", &[2 * cfg.d_k], Init::Zeros, seed)?;
    store.init("user.fuse.w2", &[2 * cfg.d_k, cfg.d_k], Init::FanIn, seed)?;
    store.init("user.fuse.b2", &[cfg.d_k], Init::Zeros, seed)?;
    Ok(())
}

pub fn register_item_tower(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    cb: &Codebook,
    seed: u64,
) -> Result<()> {
    let k = cb.schema.tokens_per_item();
    store.init("item.mlp.w1", &[k * cfg.d_f, 2 * cfg.d_k], Init::FanIn, seed)?;
    store.init("item.mlp.b1", &[2 * cfg.d_k], Init::Zeros, seed)?;
    store.init("item.mlp.w2", &[2 * cfg.d_k, cfg.d_k], Init::FanIn, seed)?;
    store.init("item.mlp.b2", &[cfg.d_k], Init::Zeros, seed)?;
    Ok(())
}

fn mlp2(
    tape: &mut Tape,
    bound: &Bound,
    x: &Tensor,
    w1: &str,
    b1: &str,
    w2: &str,
    b2: &str,
) -> Result<Tensor> {
    let w1t = bound.get(w1)?;
    let b1t = bound.get(b1)?;
    let w2t = bound.get(w2)?;
    let b2t = bound.get(b2)?;
    let h = tape.matmul(x, &w1t)?;
    let h = tape.add_bias(&h, &b1t)?;
    let h = tape.relu(&h)?;
    let h = tape.matmul(&h, &w2t)?;
    tape.add_bias(&h, &b2t)
}

/// Collapse each item's K token states into one d_k state.
fn fuse(tape: &mut Tape, bound: &Bound, concat: &Tensor) -> Result<Tensor> {
    mlp2(tape, bound, concat, "user.fuse.w1", "user.fuse.b1", "user.fuse.w2", "user.fuse.b2")
}

fn check_window(cfg: &ModelConfig, tokens: &[&ItemTokens], ts: &[i64]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > cfg.t_max {
        return Err(Error::Contract(format!(
            "window of {} items, tower accepts 1..={}",
            tokens.len(),
            cfg.t_max
        )));
    }
    if ts.len() != tokens.len() {
        return Err(Error::Contract(format!(
            "{} timestamps for {} items",
            ts.len(),
            tokens.len()
        )));
    }
    if ts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Data("window timestamps must be non-decreasing".into()));
    }
    Ok(())
}

/// Encode one user window. `tokens` and `ts` are oldest-first.
pub fn user_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    cb: &Codebook,
    tokens: &[&ItemTokens],
    ts: &[i64],
) -> Result<UserStates> {
    check_window(cfg, tokens, ts)?;
    let t_len = tokens.len();
    let k = cb.schema.tokens_per_item();
    let ab = cfg.ablation;
    let concat = embed_concat(tape, bound, cb, tokens, !ab.mfk_off)?;

    if ab.htfl_off {
        let mut x = fuse(tape, bound, &concat)?;
        if ab.hct_off {
            let pos_table = bound.get(POS_TABLE)?;
            let ids: Vec<usize> = (0..t_len).collect();
            let pos = tape.gather_rows(&pos_table, &ids)?;
            x = tape.add(&x, &pos)?;
        }
        let mask = tape.constant(token_causal_mask(t_len, 1), &[t_len, t_len])?;
        let gaps = (!ab.hct_off).then(|| gap_ids(ts, 1, cfg.time_buckets));
        let bcfg = item_block_cfg(cfg);
        for i in 0..cfg.n1 + cfg.n2 {
            x = run_block(tape, bound, &format!("user.item.{i}"), &bcfg, &x, &mask, gaps.as_deref())?;
        }
        return Ok(UserStates { items: x, tokens: None });
    }

    let l = t_len * k;
    let mut h = tape.reshape(&concat, &[l, cfg.d_f])?;
    let tok_mask = tape.constant(token_causal_mask(t_len, k), &[l, l])?;
    let bcfg = tok_block_cfg(cfg);

    if ab.hct_off {
        let pos_table = bound.get(POS_TABLE)?;
        let ids: Vec<usize> = (0..l).collect();
        let pos = tape.gather_rows(&pos_table, &ids)?;
        h = tape.add(&h, &pos)?;
        for i in 0..cfg.n1 + cfg.n2 {
            h = run_block(tape, bound, &format!("user.tok.{i}"), &bcfg, &h, &tok_mask, None)?;
        }
        let per_item = tape.reshape(&h, &[t_len, k * cfg.d_f])?;
        let items = fuse(tape, bound, &per_item)?;
        return Ok(UserStates { items, tokens: Some(h) });
    }

    let tok_gaps = gap_ids(ts, k, cfg.time_buckets);
    for i in 0..cfg.n1 {
        h = run_block(tape, bound, &format!("user.tok.{i}"), &bcfg, &h, &tok_mask, Some(&tok_gaps))?;
    }
    let tokens_out = h.clone();

    let per_item = tape.reshape(&h, &[t_len, k * cfg.d_f])?;
    let mut x = fuse(tape, bound, &per_item)?;
    let item_mask = tape.constant(token_causal_mask(t_len, 1), &[t_len, t_len])?;
    let item_gaps = gap_ids(ts, 1, cfg.time_buckets);
    let icfg = item_block_cfg(cfg);
    for i in 0..cfg.n2 {
        x = run_block(tape, bound, &format!("user.item.{i}"), &icfg, &x, &item_mask, Some(&item_gaps))?;
    }
    Ok(UserStates { items: x, tokens: Some(tokens_out) })
}

/// Embed items (no sequence context) into the match space: `[M, d_k]`.
pub fn item_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    cb: &Codebook,
    tokens: &[&ItemTokens],
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Contract("item tower needs at least one item".into()));
    }
    let concat = embed_concat(tape, bound, cb, tokens, !cfg.ablation.mfk_off)?;
    mlp2(tape, bound, &concat, "item.mlp.w1", "item.mlp.b1", "item.mlp.w2", "item.mlp.b2")
}

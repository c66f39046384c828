//! One post-norm transformer block: multi-head causal attention with an
//! optional time-gap bias on the logits, then a two-layer feed-forward,
//! each wrapped in residual + layer norm.

use crate::error::{Error, Result};
use crate::numerics::{Bound, Init, ParamStore, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct BlockCfg {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f32,
    /// true: softmax((QK^T + bias) / sqrt(d_head)); false: the bias joins
    /// after scaling.
    pub bias_inside_scale: bool,
}

impl BlockCfg {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must divide into heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

pub fn register_block(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &BlockCfg,
    time_gap_buckets: Option<usize>,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    for w in ["wq", "wk", "wv", "wo"] {
        store.init(&format!("{prefix}.attn.{w}"), &[d, d], Init::FanIn, seed)?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.init(&format!("{prefix}.attn.{b}"), &[d], Init::Zeros, seed)?;
    }
    store.init(&format!("{prefix}.ln1.gain"), &[d], Init::Ones, seed)?;
    store.init(&format!("{prefix}.ln1.bias"), &[d], Init::Zeros, seed)?;
    store.init(&format!("{prefix}.ffn.w1"), &[d, cfg.ffn_hidden], Init::FanIn, seed)?;
    store.init(&format!("{prefix}.ffn.b1"), &[cfg.ffn_hidden], Init::Zeros, seed)?;
    store.init(&format!("{prefix}.ffn.w2"), &[cfg.ffn_hidden, d], Init::FanIn, seed)?;
    store.init(&format!("{prefix}.ffn.b2"), &[d], Init::Zeros, seed)?;
    store.init(&format!("{prefix}.ln2.gain"), &[d], Init::Ones, seed)?;
    store.init(&format!("{prefix}.ln2.bias"), &[d], Init::Zeros, seed)?;
    if let Some(buckets) = time_gap_buckets {
        store.init(&format!("{prefix}.tg.table"), &[buckets, 1], Init::Zeros, seed)?;
    }
    Ok(())
}

fn affine(tape: &mut Tape, bound: &Bound, x: &Tensor, w: &str, b: &str) -> Result<Tensor> {
    let wt = bound.get(w)?;
    let bt = bound.get(b)?;
    let y = tape.matmul(x, &wt)?;
    tape.add_bias(&y, &bt)
}

/// Run the block on `x` `[L, width]`. `mask` is `[L, L]` additive 0/-inf;
/// `gap_ids` holds L*L bucket ids when this block applies a time-gap bias
/// (looked up in the block's own table).
pub fn run_block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &BlockCfg,
    x: &Tensor,
    mask: &Tensor,
    gap_ids: Option<&[usize]>,
) -> Result<Tensor> {
    cfg.validate()?;
    let l = x.shape()[0];
    if x.shape() != [l, cfg.width] {
        return Err(Error::Shape(format!(
            "block {prefix} wants [L, {}], got {:?}",
            cfg.width,
            x.shape()
        )));
    }
    let d_head = cfg.width / cfg.heads;
    let scale = 1.0 / (d_head as f32).sqrt();

    let q = affine(tape, bound, x, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    let k = affine(tape, bound, x, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
    let v = affine(tape, bound, x, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;

    let bias = match gap_ids {
        Some(ids) => {
            if ids.len() != l * l {
                return Err(Error::Contract(format!(
                    "block {prefix}: {} gap ids for an L={l} stream",
                    ids.len()
                )));
            }
            let table = bound.get(&format!("{prefix}.tg.table"))?;
            let rows = tape.gather_rows(&table, ids)?;
            Some(tape.reshape(&rows, &[l, l])?)
        }
        None => None,
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (c0, c1) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(&q, c0, c1)?;
        let kh = tape.slice_cols(&k, c0, c1)?;
        let vh = tape.slice_cols(&v, c0, c1)?;
        let mut logits = tape.matmul_nt(&qh, &kh)?;
        if cfg.bias_inside_scale {
            if let Some(b) = &bias {
                logits = tape.add(&logits, b)?;
            }
            logits = tape.mul_scalar(&logits, scale)?;
        } else {
            logits = tape.mul_scalar(&logits, scale)?;
            if let Some(b) = &bias {
                logits = tape.add(&logits, b)?;
            }
        }
        let p = tape.masked_softmax(&logits, mask)?;
        heads.push(tape.matmul(&p, &vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let concat = tape.concat_cols(&refs)?;
    let o = affine(tape, bound, &concat, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))?;

    let res1 = tape.add(x, &o)?;
    let ln1g = bound.get(&format!("{prefix}.ln1.gain"))?;
    let ln1b = bound.get(&format!("{prefix}.ln1.bias"))?;
    let h1 = tape.layer_norm(&res1, &ln1g, &ln1b, cfg.ln_eps)?;

    let f = affine(tape, bound, &h1, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
    let f = tape.relu(&f)?;
    let f = affine(tape, bound, &f, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))?;

    let res2 = tape.add(&h1, &f)?;
    let ln2g = bound.get(&format!("{prefix}.ln2.gain"))?;
    let ln2b = bound.get(&format!("{prefix}.ln2.bias"))?;
    tape.layer_norm(&res2, &ln2g, &ln2b, cfg.ln_eps)
}

//! Canonical gradient-check suite: one seeded random graph per tape
//! primitive, plus a full attention block and a full listwise-loss graph.
//! Shared by the grad-check command and the acceptance gate.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hct::{gap_ids, register_block, run_block, BlockCfg};
use crate::htfl::{Codebook, FeatureCodes, FeatureKind, FeatureSchema, FeatureSpec};
use crate::lmp::{lmp_loss, register_heads, WindowStates};
use crate::model::{Ablation, ModelConfig};
use crate::numerics::gradcheck::grad_check;
use crate::numerics::{ParamStore, Tape, Tensor};

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const PRIMITIVES: [&str; 21] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_bias",
    "mul",
    "mul_scalar",
    "relu",
    "exp",
    "gather_rows",
    "masked_softmax",
    "layer_norm",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "reshape",
    "rowwise_dot",
    "log_sum_exp",
    "log_sum_exp_masked",
    "sum",
    "mean",
];

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so a finite-difference step never crosses
/// the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.2f32..1.2);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn leaf(tape: &mut Tape, rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    tape.leaf(uniform(rng, n, -1.0, 1.0), shape, true)
}

/// Weighted sum against a fixed random probe, so every output element gets
/// a distinct nontrivial gradient path.
fn probe(tape: &mut Tape, rng: &mut ChaCha8Rng, y: &Tensor) -> Result<Tensor> {
    let w = uniform(rng, y.numel(), -1.0, 1.0);
    let shape = y.shape().to_vec();
    let c = tape.constant(w, &shape)?;
    let p = tape.mul(y, &c)?;
    tape.sum(&p)
}

fn causal(rows: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; rows * rows];
    for i in 0..rows {
        for j in i + 1..rows {
            m[i * rows + j] = f32::NEG_INFINITY;
        }
    }
    m
}

fn finish(
    tape: &Tape,
    loss: &Tensor,
    leaves: &[Tensor],
    name: &str,
    seed: u64,
) -> Result<CheckOutcome> {
    let report = grad_check(tape, loss, leaves, STEP, TOL)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        seed,
        max_rel_err: report.max_rel_err,
        pass: report.pass,
    })
}

pub fn check_primitive(name: &str, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff_ee00);
    let mut tape = Tape::new();
    let rng = &mut rng;
    let (y, leaves): (Tensor, Vec<Tensor>) = match name {
        "matmul" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            let b = leaf(&mut tape, rng, &[4, 2])?;
            (tape.matmul(&a, &b)?, vec![a, b])
        }
        "matmul_nt" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            let b = leaf(&mut tape, rng, &[2, 4])?;
            (tape.matmul_nt(&a, &b)?, vec![a, b])
        }
        "add" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            let b = leaf(&mut tape, rng, &[3, 4])?;
            (tape.add(&a, &b)?, vec![a, b])
        }
        "add_bias" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            let b = leaf(&mut tape, rng, &[4])?;
            (tape.add_bias(&a, &b)?, vec![a, b])
        }
        "mul" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            let b = leaf(&mut tape, rng, &[3, 4])?;
            (tape.mul(&a, &b)?, vec![a, b])
        }
        "mul_scalar" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            (tape.mul_scalar(&a, 0.7)?, vec![a])
        }
        "relu" => {
            let a = tape.leaf(off_kink(rng, 12), &[3, 4], true)?;
            (tape.relu(&a)?, vec![a])
        }
        "exp" => {
            let a = tape.leaf(uniform(rng, 12, -1.5, 1.5), &[3, 4], true)?;
            (tape.exp(&a)?, vec![a])
        }
        "gather_rows" => {
            let t = leaf(&mut tape, rng, &[5, 3])?;
            (tape.gather_rows(&t, &[0, 2, 2, 4, 1])?, vec![t])
        }
        "masked_softmax" => {
            let a = leaf(&mut tape, rng, &[4, 4])?;
            let m = tape.constant(causal(4), &[4, 4])?;
            (tape.masked_softmax(&a, &m)?, vec![a])
        }
        "layer_norm" => {
            let x = leaf(&mut tape, rng, &[4, 6])?;
            let gain = tape.leaf(uniform(rng, 6, 0.8, 1.2), &[6], true)?;
            let bias = leaf(&mut tape, rng, &[6])?;
            (tape.layer_norm(&x, &gain, &bias, 1e-5)?, vec![x, gain, bias])
        }
        "concat_cols" => {
            let a = leaf(&mut tape, rng, &[3, 2])?;
            let b = leaf(&mut tape, rng, &[3, 3])?;
            (tape.concat_cols(&[&a, &b])?, vec![a, b])
        }
        "concat_rows" => {
            let a = leaf(&mut tape, rng, &[2, 4])?;
            let b = leaf(&mut tape, rng, &[3, 4])?;
            (tape.concat_rows(&[&a, &b])?, vec![a, b])
        }
        "slice_cols" => {
            let a = leaf(&mut tape, rng, &[3, 6])?;
            (tape.slice_cols(&a, 1, 4)?, vec![a])
        }
        "slice_rows" => {
            let a = leaf(&mut tape, rng, &[5, 4])?;
            (tape.slice_rows(&a, 1, 4)?, vec![a])
        }
        "reshape" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            (tape.reshape(&a, &[2, 6])?, vec![a])
        }
        "rowwise_dot" => {
            let a = leaf(&mut tape, rng, &[4, 5])?;
            let b = leaf(&mut tape, rng, &[4, 5])?;
            (tape.rowwise_dot(&a, &b)?, vec![a, b])
        }
        "log_sum_exp" => {
            let a = leaf(&mut tape, rng, &[3, 5])?;
            (tape.log_sum_exp(&a, None)?, vec![a])
        }
        "log_sum_exp_masked" => {
            let a = leaf(&mut tape, rng, &[3, 5])?;
            let mut m = vec![0.0f32; 15];
            for r in 0..3 {
                for c in 0..5 {
                    if (r + c) % 3 == 0 && c != 0 {
                        m[r * 5 + c] = f32::NEG_INFINITY;
                    }
                }
            }
            let mask = tape.constant(m, &[3, 5])?;
            (tape.log_sum_exp(&a, Some(&mask))?, vec![a])
        }
        "sum" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            let c = tape.constant(uniform(rng, 12, -1.0, 1.0), &[3, 4])?;
            let p = tape.mul(&a, &c)?;
            let s = tape.sum(&p)?;
            let report = grad_check(&tape, &s, &[a], STEP, TOL)?;
            return Ok(CheckOutcome {
                name: name.into(),
                seed,
                max_rel_err: report.max_rel_err,
                pass: report.pass,
            });
        }
        "mean" => {
            let a = leaf(&mut tape, rng, &[3, 4])?;
            let c = tape.constant(uniform(rng, 12, -1.0, 1.0), &[3, 4])?;
            let p = tape.mul(&a, &c)?;
            let s = tape.mean(&p)?;
            let report = grad_check(&tape, &s, &[a], STEP, TOL)?;
            return Ok(CheckOutcome {
                name: name.into(),
                seed,
                max_rel_err: report.max_rel_err,
                pass: report.pass,
            });
        }
        other => return Err(Error::Config(format!("unknown primitive check {other}"))),
    };
    let loss = probe(&mut tape, rng, &y)?;
    finish(&tape, &loss, &leaves, name, seed)
}

/// One whole attention block with a time-gap bias: input and every
/// parameter are checked.
pub fn check_block(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let cfg = BlockCfg {
        width: 4,
        heads: 2,
        ffn_hidden: 8,
        ln_eps: 1e-5,
        bias_inside_scale: true,
    };
    let mut store = ParamStore::new();
    register_block(&mut store, "blk", &cfg, Some(6), seed)?;
    for x in &mut store.get_mut("blk.ffn.b1")?.data {
        *x = rng.random_range(0.05f32..0.15);
    }
    for x in &mut store.get_mut("blk.tg.table")?.data {
        *x = rng.random_range(-0.3f32..0.3);
    }

    let mut tape = Tape::new();
    let bound = store.bind_all(&mut tape)?;
    let t = 3;
    let x = tape.leaf(uniform(&mut rng, t * 4, -1.0, 1.0), &[t, 4], true)?;
    let mask = tape.constant(causal(t), &[t, t])?;
    let ts = [0i64, 40, 1000];
    let gaps = gap_ids(&ts, 1, 6);
    let out = run_block(&mut tape, &bound, "blk", &cfg, &x, &mask, Some(&gaps))?;
    let loss = probe(&mut tape, &mut rng, &out)?;

    let mut leaves = vec![x];
    leaves.extend(bound.tensors().map(|(_, t)| t.clone()));
    finish(&tape, &loss, &leaves, "hct_block", seed)
}

/// The listwise loss over two ragged windows with token tasks and gating
/// active; states and every head parameter are checked.
pub fn check_lmp(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ed);
    let schema = FeatureSchema {
        features: vec![
            FeatureSpec { name: "alpha".into(), kind: FeatureKind::Categorical },
            FeatureSpec { name: "beta".into(), kind: FeatureKind::Categorical },
        ],
    };
    let cb = Codebook {
        schema,
        codes: vec![
            FeatureCodes::Categorical { vocab: BTreeMap::new() },
            FeatureCodes::Categorical { vocab: BTreeMap::new() },
        ],
    };
    let cfg = ModelConfig {
        d_f: 2,
        d_k: 2,
        heads: 1,
        n1: 1,
        n2: 1,
        ffn_mult: 2,
        t_max: 6,
        n_step: 2,
        tau: 0.5,
        lambda_m: 0.3,
        time_buckets: 4,
        ablation: Ablation::default(),
        ..Default::default()
    };
    let mut store = ParamStore::new();
    register_heads(&mut store, &cfg, &cb, seed)?;

    let mut tape = Tape::new();
    let bound = store.bind_all(&mut tape)?;
    let k = 2;
    let mut windows = Vec::new();
    let mut leaves: Vec<Tensor> = Vec::new();
    for len in [3usize, 2] {
        let u = tape.leaf(uniform(&mut rng, len * 2, -1.0, 1.0), &[len, 2], true)?;
        let v = tape.leaf(uniform(&mut rng, len * 2, -1.0, 1.0), &[len, 2], true)?;
        let tok = tape.leaf(uniform(&mut rng, len * k * 2, -1.0, 1.0), &[len * k, 2], true)?;
        leaves.extend([u.clone(), v.clone(), tok.clone()]);
        windows.push(WindowStates { items: u, tokens: Some(tok), targets: v, len });
    }
    let parts = lmp_loss(&mut tape, &bound, &cfg, &cb, &windows)?;
    leaves.extend(bound.tensors().map(|(_, t)| t.clone()));
    finish(&tape, &parts.total, &leaves, "lmp_graph", seed)
}

/// Every primitive plus the block and loss graphs, `n_seeds` seeds each.
pub fn run_suite(n_seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for seed in 0..n_seeds {
        for name in PRIMITIVES {
            out.push(check_primitive(name, seed)?);
        }
        out.push(check_block(seed)?);
        out.push(check_lmp(seed)?);
    }
    Ok(out)
}

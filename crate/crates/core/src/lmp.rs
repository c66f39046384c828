//! Listwise multi-step prediction loss. Every window position predicts its
//! next n_step items against in-batch negatives; steps beyond the first
//! stay active only while the previous step's positive is confidently
//! ahead, so easy continuations train farther into the future.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::htfl::codebook::Codebook;
use crate::model::ModelConfig;
use crate::numerics::{Bound, Init, ParamStore, Tape, Tensor};

pub fn item_head_w(step: usize) -> String {
    format!("lmp.item_head.{step}.w")
}

pub fn item_head_b(step: usize) -> String {
    format!("lmp.item_head.{step}.b")
}

pub fn token_head_w(feature: &str, step: usize) -> String {
    format!("lmp.tok.{feature}.{step}.w")
}

pub fn token_head_b(feature: &str, step: usize) -> String {
    format!("lmp.tok.{feature}.{step}.b")
}

pub fn register_heads(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    cb: &Codebook,
    seed: u64,
) -> Result<()> {
    for i in 1..=cfg.n_step {
        store.init(&item_head_w(i), &[cfg.d_k, cfg.d_k], Init::FanIn, seed)?;
        store.init(&item_head_b(i), &[cfg.d_k], Init::Zeros, seed)?;
    }
    if cfg.token_tasks_active() {
        for f in &cb.schema.features {
            for i in 1..=cfg.n_step {
                store.init(&token_head_w(&f.name, i), &[cfg.d_f, cfg.d_k], Init::FanIn, seed)?;
                store.init(&token_head_b(&f.name, i), &[cfg.d_k], Init::Zeros, seed)?;
            }
        }
    }
    Ok(())
}

/// Tower outputs for one training window of `len` input items: per-position
/// user states, optional token states, and the item-tower embeddings of the
/// next-item targets (row t embeds the item after position t).
pub struct WindowStates {
    pub items: Tensor,
    pub tokens: Option<Tensor>,
    pub targets: Tensor,
    pub len: usize,
}

/// Loss pieces for one batch. Counts describe (position, step) pairs after
/// validity and gating.
#[derive(Debug)]
pub struct LmpParts {
    pub total: Tensor,
    pub item_loss: Tensor,
    pub token_loss: Option<Tensor>,
    pub item_active: usize,
    pub item_gated_off: usize,
    pub token_active: usize,
    pub token_gated_off: usize,
}

/// Gate test in a numerically safe form: e^prev > e^cur + margin, all in
/// units of logits already divided by tau.
fn gate_open(prev: f64, cur: f64, margin: f64) -> bool {
    prev > cur + (margin * (-cur).exp()).ln_1p()
}

struct FamilyAcc {
    sum: Option<Tensor>,
    active: usize,
    gated_off: usize,
}

/// One listwise task family: `src` rows (aligned with `v_all`) are
/// projected by a per-step head and scored against in-batch targets.
fn listwise_family(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    lens: &[usize],
    row_base: &[usize],
    src: &Tensor,
    v_all: &Tensor,
    head_names: &dyn Fn(usize) -> (String, String),
    force_gates_open: bool,
) -> Result<FamilyAcc> {
    let max_len = lens.iter().copied().max().unwrap_or(0);
    let inv_tau = 1.0 / cfg.tau;
    let mut acc = FamilyAcc { sum: None, active: 0, gated_off: 0 };
    let mut pos_prev: HashMap<(usize, usize), f64> = HashMap::new();

    for i in 1..=cfg.n_step {
        let (w_name, b_name) = head_names(i);
        let w = bound.get(&w_name)?;
        let b = bound.get(&b_name)?;
        let proj = tape.matmul(src, &w)?;
        let proj = tape.add_bias(&proj, &b)?;

        let mut pos_now: HashMap<(usize, usize), f64> = HashMap::new();
        for t in 0..max_len.saturating_sub(i - 1) {
            let sel: Vec<usize> = (0..lens.len()).filter(|&w| lens[w] >= t + i).collect();
            if sel.is_empty() {
                break;
            }
            let m = sel.len();
            let rows_u: Vec<usize> = sel.iter().map(|&w| row_base[w] + t).collect();
            let rows_v: Vec<usize> = sel.iter().map(|&w| row_base[w] + t + i - 1).collect();

            let q = tape.gather_rows(&proj, &rows_u)?;
            let tgt = tape.gather_rows(v_all, &rows_v)?;
            let scores = tape.matmul_nt(&q, &tgt)?;
            let scores = tape.mul_scalar(&scores, inv_tau)?;
            let pos = tape.rowwise_dot(&q, &tgt)?;
            let pos = tape.mul_scalar(&pos, inv_tau)?;

            let pos_vals: Vec<f64> = tape.data(&pos).iter().map(|&x| x as f64).collect();
            for (j, &wi) in sel.iter().enumerate() {
                pos_now.insert((wi, t), pos_vals[j]);
            }

            let gates: Vec<f32> = if force_gates_open || i == 1 {
                vec![1.0; m]
            } else {
                sel.iter()
                    .enumerate()
                    .map(|(j, &wi)| {
                        let prev = pos_prev[&(wi, t)];
                        if gate_open(prev, pos_vals[j], cfg.lambda_m as f64) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            };
            let open = gates.iter().filter(|&&g| g == 1.0).count();
            acc.gated_off += m - open;
            if open == 0 {
                continue;
            }
            acc.active += open;

            // per-pair loss: log(1 + sum_b e^{s_b}) - s_pos, via a zero
            // column standing in for the 1
            let zero = tape.constant(vec![0.0; m], &[m, 1])?;
            let ext = tape.concat_cols(&[&zero, &scores])?;
            let lse = tape.log_sum_exp(&ext, None)?;
            let neg_pos = tape.mul_scalar(&pos, -1.0)?;
            let lvec = tape.add(&lse, &neg_pos)?;
            let term = if open == m {
                tape.sum(&lvec)?
            } else {
                let g = tape.constant(gates, &[m, 1])?;
                let gated = tape.mul(&lvec, &g)?;
                tape.sum(&gated)?
            };
            acc.sum = Some(match acc.sum {
                None => term,
                Some(a) => tape.add(&a, &term)?,
            });
        }
        pos_prev = pos_now;
    }
    Ok(acc)
}

/// Assemble the batch loss from per-window tower outputs.
pub fn lmp_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    cb: &Codebook,
    windows: &[WindowStates],
) -> Result<LmpParts> {
    if windows.is_empty() {
        return Err(Error::Contract("loss needs at least one window".into()));
    }
    let k = cb.schema.tokens_per_item();
    for w in windows {
        if w.len == 0 {
            return Err(Error::Contract("window with no predictable positions".into()));
        }
        if w.items.shape() != [w.len, cfg.d_k] || w.targets.shape() != [w.len, cfg.d_k] {
            return Err(Error::Shape(format!(
                "window states want [{}, {}], got items {:?} targets {:?}",
                w.len,
                cfg.d_k,
                w.items.shape(),
                w.targets.shape()
            )));
        }
    }
    let lens: Vec<usize> = windows.iter().map(|w| w.len).collect();
    let mut row_base = Vec::with_capacity(windows.len());
    let mut r = 0;
    for w in windows {
        row_base.push(r);
        r += w.len;
    }

    let item_refs: Vec<&Tensor> = windows.iter().map(|w| &w.items).collect();
    let target_refs: Vec<&Tensor> = windows.iter().map(|w| &w.targets).collect();
    let u_all = tape.concat_rows(&item_refs)?;
    let v_all = tape.concat_rows(&target_refs)?;

    let item_acc = listwise_family(
        tape,
        bound,
        cfg,
        &lens,
        &row_base,
        &u_all,
        &v_all,
        &|i| (item_head_w(i), item_head_b(i)),
        cfg.ablation.lmp_off,
    )?;
    let item_sum = item_acc
        .sum
        .ok_or_else(|| Error::Contract("no valid (position, step) pairs in batch".into()))?;
    let item_loss = tape.mul_scalar(&item_sum, 1.0 / item_acc.active as f32)?;

    let mut token_loss = None;
    let mut token_active = 0;
    let mut token_gated_off = 0;
    if cfg.token_tasks_active() {
        let token_refs: Vec<&Tensor> = windows
            .iter()
            .map(|w| {
                w.tokens.as_ref().ok_or_else(|| {
                    Error::Contract("token tasks active but a window has no token states".into())
                })
            })
            .collect::<Result<_>>()?;
        let tok_all = tape.concat_rows(&token_refs)?;
        let mut tok_base = Vec::with_capacity(windows.len());
        let mut r = 0;
        for w in windows {
            tok_base.push(r);
            r += w.len * k;
        }
        let mut sum: Option<Tensor> = None;
        for (s, f) in cb.schema.features.iter().enumerate() {
            let mut rows = Vec::with_capacity(r / k);
            for (wi, w) in windows.iter().enumerate() {
                for t in 0..w.len {
                    rows.push(tok_base[wi] + t * k + s);
                }
            }
            let src = tape.gather_rows(&tok_all, &rows)?;
            let name = f.name.clone();
            let acc = listwise_family(
                tape,
                bound,
                cfg,
                &lens,
                &row_base,
                &src,
                &v_all,
                &|i| (token_head_w(&name, i), token_head_b(&name, i)),
                cfg.ablation.lmp_off,
            )?;
            token_active += acc.active;
            token_gated_off += acc.gated_off;
            if let Some(term) = acc.sum {
                sum = Some(match sum {
                    None => term,
                    Some(a) => tape.add(&a, &term)?,
                });
            }
        }
        if let Some(s) = sum {
            token_loss = Some(tape.mul_scalar(&s, 1.0 / token_active as f32)?);
        }
    }

    let total = match &token_loss {
        Some(t) => tape.add(&item_loss, t)?,
        None => item_loss.clone(),
    };
    Ok(LmpParts {
        total,
        item_loss,
        token_loss,
        item_active: item_acc.active,
        item_gated_off: item_acc.gated_off,
        token_active,
        token_gated_off,
    })
}

//! One training step: both towers forward over a batch, the listwise loss,
//! backprop, optimizer update. Also the leave-one-out split and the serving
//! path that turns trained parameters into rankings.

use crate::data::Session;
use crate::error::{Error, Result};
use crate::evalkit::{aggregate, score_catalog, EvalReport};
use crate::htfl::ItemTokens;
use crate::lmp::{item_head_b, item_head_w, lmp_loss, WindowStates};
use crate::model::Model;
use crate::numerics::{Tape, Tensor};
use crate::towers::{item_forward, user_forward};

use super::adam::Adam;
use super::batch::TrainWindow;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub item_active: usize,
    pub item_gated_off: usize,
    pub token_active: usize,
    pub token_gated_off: usize,
}

fn span(tape: &Tape, t: &Tensor, acc: &mut (f32, f32)) {
    for &x in tape.data(t) {
        acc.0 = acc.0.min(x);
        acc.1 = acc.1.max(x);
    }
}

/// Attach the score-factor extrema to non-finite aborts so blowups are
/// diagnosable from the log alone.
fn with_span(e: Error, acc: (f32, f32)) -> Error {
    match e {
        Error::Data(m) if m.contains("non-finite") => Error::Data(format!(
            "{m}; embedding extrema [{:.3e}, {:.3e}] feed the logits",
            acc.0, acc.1
        )),
        other => other,
    }
}

/// Forward + backward over one batch, accumulating `scale` times the loss
/// gradient into the store. Gradients are not cleared or applied here.
pub fn accumulate(
    model: &mut Model,
    toks: &[ItemTokens],
    batch: &[TrainWindow],
    scale: f32,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut tape = Tape::new();
    let bound = model.store.bind_all(&mut tape)?;
    let cfg = &model.cfg;
    let cb = &model.cb;

    let mut acc = (f32::INFINITY, f32::NEG_INFINITY);
    let mut target_toks = Vec::new();
    for w in batch {
        for &t in &w.targets {
            target_toks.push(&toks[t]);
        }
    }
    let v_all = item_forward(&mut tape, &bound, cfg, cb, &target_toks)?;
    span(&tape, &v_all, &mut acc);

    let mut windows = Vec::with_capacity(batch.len());
    let mut base = 0;
    for w in batch {
        let wt: Vec<&ItemTokens> = w.inputs.iter().map(|&i| &toks[i]).collect();
        let states = user_forward(&mut tape, &bound, cfg, cb, &wt, &w.ts)
            .map_err(|e| with_span(e, acc))?;
        span(&tape, &states.items, &mut acc);
        let len = w.targets.len();
        let v = tape.slice_rows(&v_all, base, base + len)?;
        base += len;
        windows.push(WindowStates { items: states.items, tokens: states.tokens, targets: v, len });
    }

    let parts = lmp_loss(&mut tape, &bound, cfg, cb, &windows).map_err(|e| with_span(e, acc))?;
    let loss = tape.data(&parts.total)[0];
    let total =
        if scale == 1.0 { parts.total.clone() } else { tape.mul_scalar(&parts.total, scale)? };
    tape.backward(&total).map_err(|e| with_span(e, acc))?;
    bound.export_grads(&tape, &mut model.store)?;
    Ok(StepStats {
        loss,
        item_active: parts.item_active,
        item_gated_off: parts.item_gated_off,
        token_active: parts.token_active,
        token_gated_off: parts.token_gated_off,
    })
}

/// Zero grads, backprop the batch loss, take one optimizer step.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    toks: &[ItemTokens],
    batch: &[TrainWindow],
) -> Result<StepStats> {
    model.store.zero_grads();
    let stats = accumulate(model, toks, batch, 1.0)?;
    opt.step(&mut model.store)?;
    Ok(stats)
}

/// One held-out evaluation case: the history fed to the user tower and the
/// next item it should rank highly.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub session: usize,
    pub inputs: Vec<usize>,
    pub ts: Vec<i64>,
    pub truth: usize,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Session>,
    pub eval: Vec<EvalCase>,
}

/// Hold out each user's last item. Users keep a training session only while
/// the remainder still has a target (length >= 3); every user with >= 2
/// interactions is evaluated on a history capped at `t_max`.
pub fn leave_one_out(sessions: &[Session], t_max: usize) -> Split {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        let n = s.len();
        if n >= 3 {
            train.push(Session {
                user_id: s.user_id.clone(),
                items: s.items[..n - 1].to_vec(),
                ts: s.ts[..n - 1].to_vec(),
                behaviors: s.behaviors[..n - 1].to_vec(),
            });
        }
        if n >= 2 {
            let hist = n - 1;
            let start = hist.saturating_sub(t_max);
            eval.push(EvalCase {
                session: i,
                inputs: s.items[start..hist].to_vec(),
                ts: s.ts[start..hist].to_vec(),
                truth: s.items[n - 1],
            });
        }
    }
    Split { train, eval }
}

/// Item-tower embeddings for the whole catalog, flattened row-major.
pub fn catalog_embeddings(model: &Model, toks: &[ItemTokens]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = model.store.bind_all(&mut tape)?;
    let refs: Vec<&ItemTokens> = toks.iter().collect();
    let v = item_forward(&mut tape, &bound, &model.cfg, &model.cb, &refs)?;
    Ok(tape.data(&v).to_vec())
}

fn project_last(
    tape: &mut Tape,
    bound: &crate::numerics::Bound,
    model: &Model,
    toks: &[ItemTokens],
    inputs: &[usize],
    ts: &[i64],
) -> Result<Tensor> {
    let wt: Vec<&ItemTokens> = inputs.iter().map(|&i| &toks[i]).collect();
    let states = user_forward(tape, bound, &model.cfg, &model.cb, &wt, ts)?;
    let t = inputs.len();
    let last = tape.slice_rows(&states.items, t - 1, t)?;
    let w = bound.get(&item_head_w(1))?;
    let b = bound.get(&item_head_b(1))?;
    let proj = tape.matmul(&last, &w)?;
    tape.add_bias(&proj, &b)
}

/// Serving embedding for one user: the newest state pushed through the
/// step-1 prediction head, the same map that scores next-item candidates
/// in training.
pub fn user_embedding(
    model: &Model,
    toks: &[ItemTokens],
    inputs: &[usize],
    ts: &[i64],
) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = model.store.bind_all(&mut tape)?;
    let u = project_last(&mut tape, &bound, model, toks, inputs, ts)?;
    Ok(tape.data(&u).to_vec())
}

/// Users per tape while evaluating; bounds tape growth without re-binding
/// parameters for every user.
const EVAL_CHUNK: usize = 64;

pub fn evaluate(
    model: &Model,
    toks: &[ItemTokens],
    ids: &[String],
    cases: &[EvalCase],
    cutoffs: &[usize],
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Data("no evaluable users (all sessions shorter than 2)".into()));
    }
    let catalog = catalog_embeddings(model, toks)?;
    let mut rankings = Vec::with_capacity(cases.len());
    let mut truths = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let bound = model.store.bind_all(&mut tape)?;
        for case in chunk {
            let u = project_last(&mut tape, &bound, model, toks, &case.inputs, &case.ts)?;
            rankings.push(score_catalog(tape.data(&u), &catalog, ids)?);
            truths.push(case.truth);
        }
    }
    aggregate(&rankings, &truths, cutoffs, ids.len())
}

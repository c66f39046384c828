//! Central finite-difference verification of the backward pass.
//!
//! The recorded tape is replayed in f64: once for analytic gradients, then
//! twice per perturbed element. Comparing in f64 keeps the check's noise
//! floor far below the tolerances we assert.

use crate::error::{Error, Result};

use super::shadow;
use super::tape::{Tape, Tensor};

/// Worst disagreement for one checked leaf.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub leaf_id: usize,
    /// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-4)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_err: f64,
    pub step: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&LeafReport> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compare analytic gradients of `loss` w.r.t. each leaf in `leaves` against
/// central differences with absolute step `step`; passes when every relative
/// error stays within `tol`.
pub fn grad_check(
    tape: &Tape,
    loss: &Tensor,
    leaves: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let base = shadow::forward(tape, None)?;
    let grads = shadow::backward(&base, loss.id());

    let mut leaves_out = Vec::with_capacity(leaves.len());
    let mut max_rel = 0.0f64;
    for leaf in leaves {
        let n = leaf.numel();
        let zero = vec![0.0f64; n];
        let analytic = grads.get(leaf.id()).unwrap_or(&zero);
        let base_vals: Vec<f64> = tape.data(leaf).iter().map(|&x| x as f64).collect();
        let mut report = LeafReport {
            leaf_id: leaf.id(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for i in 0..n {
            let mut bumped = base_vals.clone();
            bumped[i] = base_vals[i] + step;
            let up = shadow::forward(tape, Some((leaf.id(), &bumped)))?.val_of(loss.id());
            bumped[i] = base_vals[i] - step;
            let down = shadow::forward(tape, Some((leaf.id(), &bumped)))?.val_of(loss.id());
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(analytic[i], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = i;
                report.analytic_at_worst = analytic[i];
                report.numeric_at_worst = numeric;
            }
        }
        max_rel = max_rel.max(report.max_rel_err);
        leaves_out.push(report);
    }
    Ok(GradCheckReport {
        leaves: leaves_out,
        max_rel_err: max_rel,
        step,
        tol,
        pass: max_rel <= tol,
    })
}

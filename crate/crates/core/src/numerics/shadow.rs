//! Replays a recorded tape in f64, so finite-difference checks are not
//! drowned by f32 rounding.

use crate::error::Result;

use super::kernels::{self, GradBufs, Values};
use super::tape::{OpKind, Tape};

pub(crate) struct ShadowVals<'t> {
    tape: &'t Tape,
    vals: Vec<Vec<f64>>,
}

impl ShadowVals<'_> {
    /// Scalar value of a node (first element).
    pub fn val_of(&self, id: usize) -> f64 {
        self.vals[id][0]
    }
}

impl Values<f64> for ShadowVals<'_> {
    fn val(&self, id: usize) -> &[f64] {
        &self.vals[id]
    }
    fn shape(&self, id: usize) -> &[usize] {
        &self.tape.nodes[id].shape
    }
    fn requires_grad(&self, id: usize) -> bool {
        self.tape.nodes[id].requires_grad
    }
}

/// Forward-evaluate every node in f64. `override_leaf` replaces one leaf's
/// buffer, which is how finite differences perturb a single input.
pub(crate) fn forward<'t>(
    tape: &'t Tape,
    override_leaf: Option<(usize, &[f64])>,
) -> Result<ShadowVals<'t>> {
    let mut sv = ShadowVals { tape, vals: Vec::with_capacity(tape.nodes.len()) };
    for (id, node) in tape.nodes.iter().enumerate() {
        let v = match &node.op {
            OpKind::Leaf => match override_leaf {
                Some((oid, data)) if oid == id => data.to_vec(),
                _ => node.data.iter().map(|&x| x as f64).collect(),
            },
            op => kernels::forward_node::<f64>(op, &sv, &node.shape)?,
        };
        sv.vals.push(v);
    }
    Ok(sv)
}

/// Reverse pass in f64; returns one gradient buffer per node (None where no
/// gradient flows).
pub(crate) fn backward(sv: &ShadowVals<'_>, loss_id: usize) -> GradBufs<f64> {
    let tape = sv.tape;
    let mut bufs = GradBufs::<f64>::new(tape.nodes.len());
    bufs.seed(loss_id, 1.0);
    for id in (0..=loss_id).rev() {
        if !tape.nodes[id].requires_grad {
            continue;
        }
        let Some(g) = bufs.take(id) else { continue };
        let node = &tape.nodes[id];
        kernels::backward_node::<f64>(&node.op, &sv.vals[id], &g, sv, &mut bufs);
        if matches!(node.op, OpKind::Leaf) {
            bufs.seed_buf(id, g);
        }
    }
    bufs
}

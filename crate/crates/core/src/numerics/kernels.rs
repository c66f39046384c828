//! Forward and backward rules for every tape operation, generic over the
//! element type so the same code runs the f32 training path and the f64
//! shadow evaluation used by gradient checking.

use std::cell::Cell;

use crate::error::{Error, Result};

use super::tape::OpKind;

/// Minimal float abstraction: f32 for training, f64 for shadow evaluation.
pub trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn neg_infinity() -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self { x as f32 }
    fn exp(self) -> Self { f32::exp(self) }
    fn ln(self) -> Self { f32::ln(self) }
    fn sqrt(self) -> Self { f32::sqrt(self) }
    fn maximum(self, other: Self) -> Self { f32::max(self, other) }
    fn neg_infinity() -> Self { f32::NEG_INFINITY }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self { x }
    fn exp(self) -> Self { f64::exp(self) }
    fn ln(self) -> Self { f64::ln(self) }
    fn sqrt(self) -> Self { f64::sqrt(self) }
    fn maximum(self, other: Self) -> Self { f64::max(self, other) }
    fn neg_infinity() -> Self { f64::NEG_INFINITY }
}

/// Node value/shape access, abstracting over the f32 tape and f64 replays.
pub(crate) trait Values<F: Real> {
    fn val(&self, id: usize) -> &[F];
    fn shape(&self, id: usize) -> &[usize];
    fn requires_grad(&self, id: usize) -> bool;
}

thread_local! {
    static CORRUPT_RELU_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Deliberately mis-scale the ReLU backward rule on this thread.
///
/// Testing hook: lets negative-control tests (and the CLI's corruption flag)
/// confirm that the finite-difference checker actually catches a broken rule.
pub fn set_corrupt_relu_backward(on: bool) {
    CORRUPT_RELU_BACKWARD.with(|c| c.set(on));
}

fn relu_backward_scale<F: Real>() -> F {
    if CORRUPT_RELU_BACKWARD.with(|c| c.get()) {
        F::from_f64(1.25)
    } else {
        F::ONE
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / d.max(1);
    (rows, d)
}

fn masked_off<F: Real>(m: F) -> bool {
    m == F::neg_infinity()
}

// ── forward ──────────────────────────────────────────────────────────

pub(crate) fn forward_node<F: Real>(
    op: &OpKind,
    vals: &impl Values<F>,
    out_shape: &[usize],
) -> Result<Vec<F>> {
    let numel: usize = out_shape.iter().product();
    match op {
        OpKind::Leaf => Err(Error::Contract("leaf nodes carry their own data".into())),
        OpKind::MatMul { a, b } => {
            let (m, k) = (vals.shape(*a)[0], vals.shape(*a)[1]);
            let n = vals.shape(*b)[1];
            let (av, bv) = (vals.val(*a), vals.val(*b));
            let mut out = vec![F::ZERO; m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
            Ok(out)
        }
        OpKind::MatMulNT { a, b } => {
            let (m, k) = (vals.shape(*a)[0], vals.shape(*a)[1]);
            let n = vals.shape(*b)[0];
            let (av, bv) = (vals.val(*a), vals.val(*b));
            let mut out = vec![F::ZERO; m * n];
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut s = F::ZERO;
                    for p in 0..k {
                        s += arow[p] * brow[p];
                    }
                    out[i * n + j] = s;
                }
            }
            Ok(out)
        }
        OpKind::Add { a, b } => {
            let (av, bv) = (vals.val(*a), vals.val(*b));
            Ok(av.iter().zip(bv).map(|(&x, &y)| x + y).collect())
        }
        OpKind::AddBias { x, b } => {
            let (xv, bv) = (vals.val(*x), vals.val(*b));
            let d = bv.len();
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.chunks_exact(d) {
                for j in 0..d {
                    out.push(row[j] + bv[j]);
                }
            }
            Ok(out)
        }
        OpKind::Mul { a, b } => {
            let (av, bv) = (vals.val(*a), vals.val(*b));
            Ok(av.iter().zip(bv).map(|(&x, &y)| x * y).collect())
        }
        OpKind::MulScalar { x, c } => {
            let c = F::from_f64(*c);
            Ok(vals.val(*x).iter().map(|&v| v * c).collect())
        }
        OpKind::Relu { x } => Ok(vals
            .val(*x)
            .iter()
            .map(|&v| v.maximum(F::ZERO))
            .collect()),
        OpKind::Exp { x } => Ok(vals.val(*x).iter().map(|&v| v.exp()).collect()),
        OpKind::GatherRows { table, ids } => {
            let tv = vals.val(*table);
            let d = vals.shape(*table)[1];
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                out.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
            Ok(out)
        }
        OpKind::MaskedSoftmax { x, mask } => {
            let (xv, mv) = (vals.val(*x), vals.val(*mask));
            let (rows, d) = rows_of(vals.shape(*x));
            let mut out = vec![F::ZERO; xv.len()];
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let mr = &mv[r * d..(r + 1) * d];
                let mut mx = F::neg_infinity();
                for j in 0..d {
                    if !masked_off(mr[j]) {
                        mx = mx.maximum(xr[j]);
                    }
                }
                if mx == F::neg_infinity() {
                    return Err(Error::InvalidMask(format!("softmax row {r} fully masked")));
                }
                let mut sum = F::ZERO;
                let or = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    if !masked_off(mr[j]) {
                        let e = (xr[j] - mx).exp();
                        or[j] = e;
                        sum += e;
                    }
                }
                for j in 0..d {
                    or[j] = or[j] / sum;
                }
            }
            Ok(out)
        }
        OpKind::LayerNorm { x, gain, bias, eps } => {
            let (xv, gv, bv) = (vals.val(*x), vals.val(*gain), vals.val(*bias));
            let (rows, d) = rows_of(vals.shape(*x));
            let inv_d = F::ONE / F::from_f64(d as f64);
            let eps = F::from_f64(*eps);
            let mut out = vec![F::ZERO; xv.len()];
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let mut mean = F::ZERO;
                for &v in xr {
                    mean += v;
                }
                mean = mean * inv_d;
                let mut var = F::ZERO;
                for &v in xr {
                    let c = v - mean;
                    var += c * c;
                }
                var = var * inv_d;
                let inv_std = F::ONE / (var + eps).sqrt();
                let or = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    or[j] = gv[j] * ((xr[j] - mean) * inv_std) + bv[j];
                }
            }
            Ok(out)
        }
        OpKind::ConcatCols { parts } => {
            let rows = vals.shape(parts[0])[0];
            let mut out = Vec::with_capacity(numel);
            for r in 0..rows {
                for &p in parts.iter() {
                    let d = vals.shape(p)[1];
                    let pv = vals.val(p);
                    out.extend_from_slice(&pv[r * d..(r + 1) * d]);
                }
            }
            Ok(out)
        }
        OpKind::ConcatRows { parts } => {
            let mut out = Vec::with_capacity(numel);
            for &p in parts.iter() {
                out.extend_from_slice(vals.val(p));
            }
            Ok(out)
        }
        OpKind::SliceCols { x, start, end } => {
            let d = vals.shape(*x)[1];
            let xv = vals.val(*x);
            let mut out = Vec::with_capacity(numel);
            for row in xv.chunks_exact(d) {
                out.extend_from_slice(&row[*start..*end]);
            }
            Ok(out)
        }
        OpKind::SliceRows { x, start, end } => {
            let d = vals.shape(*x)[1];
            Ok(vals.val(*x)[start * d..end * d].to_vec())
        }
        OpKind::Reshape { x } => Ok(vals.val(*x).to_vec()),
        OpKind::RowwiseDot { a, b } => {
            let (av, bv) = (vals.val(*a), vals.val(*b));
            let d = vals.shape(*a)[1];
            let mut out = Vec::with_capacity(numel);
            for (ar, br) in av.chunks_exact(d).zip(bv.chunks_exact(d)) {
                let mut s = F::ZERO;
                for p in 0..d {
                    s += ar[p] * br[p];
                }
                out.push(s);
            }
            Ok(out)
        }
        OpKind::LogSumExp { x, mask } => {
            let xv = vals.val(*x);
            let (rows, d) = rows_of(vals.shape(*x));
            let mv = mask.map(|m| vals.val(m));
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let off = |j: usize| mv.is_some_and(|m| masked_off(m[r * d + j]));
                let mut mx = F::neg_infinity();
                for j in 0..d {
                    if !off(j) {
                        mx = mx.maximum(xr[j]);
                    }
                }
                if mx == F::neg_infinity() {
                    return Err(Error::InvalidMask(format!("log-sum-exp row {r} fully masked")));
                }
                let mut sum = F::ZERO;
                for j in 0..d {
                    if !off(j) {
                        sum += (xr[j] - mx).exp();
                    }
                }
                out.push(mx + sum.ln());
            }
            Ok(out)
        }
        OpKind::Sum { x } => {
            let mut s = F::ZERO;
            for &v in vals.val(*x) {
                s += v;
            }
            Ok(vec![s])
        }
        OpKind::Mean { x } => {
            let xv = vals.val(*x);
            let mut s = F::ZERO;
            for &v in xv {
                s += v;
            }
            Ok(vec![s / F::from_f64(xv.len() as f64)])
        }
    }
}

// ── backward ─────────────────────────────────────────────────────────

/// Lazily allocated per-node gradient buffers for one backward pass.
pub(crate) struct GradBufs<F> {
    bufs: Vec<Option<Vec<F>>>,
}

impl<F: Real> GradBufs<F> {
    pub fn new(n: usize) -> Self {
        GradBufs { bufs: (0..n).map(|_| None).collect() }
    }

    pub fn seed(&mut self, id: usize, value: F) {
        self.bufs[id] = Some(vec![value]);
    }

    /// Put a buffer back (used to retain leaf grads after `take`).
    pub fn seed_buf(&mut self, id: usize, buf: Vec<F>) {
        self.bufs[id] = Some(buf);
    }

    pub fn take(&mut self, id: usize) -> Option<Vec<F>> {
        self.bufs[id].take()
    }

    pub fn get(&self, id: usize) -> Option<&[F]> {
        self.bufs[id].as_deref()
    }

    fn buf(&mut self, id: usize, len: usize) -> &mut [F] {
        self.bufs[id].get_or_insert_with(|| vec![F::ZERO; len])
    }
}

/// Propagate `out_grad` for node `id` into the gradients of its inputs.
///
/// `out_val` is the node's own forward value (needed by softmax/exp/lse).
/// Inputs with `requires_grad == false` are skipped.
pub(crate) fn backward_node<F: Real>(
    op: &OpKind,
    out_val: &[F],
    out_grad: &[F],
    vals: &impl Values<F>,
    grads: &mut GradBufs<F>,
) {
    let needs = |id: usize| vals.requires_grad(id);
    match op {
        OpKind::Leaf => {}
        OpKind::MatMul { a, b } => {
            let (m, k) = (vals.shape(*a)[0], vals.shape(*a)[1]);
            let n = vals.shape(*b)[1];
            if needs(*a) {
                let bv = vals.val(*b);
                let ga = grads.buf(*a, m * k);
                for i in 0..m {
                    let grow = &out_grad[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut s = F::ZERO;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if needs(*b) {
                let av = vals.val(*a);
                let gb = grads.buf(*b, k * n);
                for i in 0..m {
                    let grow = &out_grad[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] += x * grow[j];
                        }
                    }
                }
            }
        }
        OpKind::MatMulNT { a, b } => {
            let (m, k) = (vals.shape(*a)[0], vals.shape(*a)[1]);
            let n = vals.shape(*b)[0];
            if needs(*a) {
                let bv = vals.val(*b);
                let ga = grads.buf(*a, m * k);
                for i in 0..m {
                    let grow = &out_grad[i * n..(i + 1) * n];
                    let garow = &mut ga[i * k..(i + 1) * k];
                    for j in 0..n {
                        let g = grow[j];
                        let brow = &bv[j * k..(j + 1) * k];
                        for p in 0..k {
                            garow[p] += g * brow[p];
                        }
                    }
                }
            }
            if needs(*b) {
                let av = vals.val(*a);
                let gb = grads.buf(*b, n * k);
                for i in 0..m {
                    let grow = &out_grad[i * n..(i + 1) * n];
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let g = grow[j];
                        let gbrow = &mut gb[j * k..(j + 1) * k];
                        for p in 0..k {
                            gbrow[p] += g * arow[p];
                        }
                    }
                }
            }
        }
        OpKind::Add { a, b } => {
            for &t in [a, b].into_iter() {
                if needs(t) {
                    let g = grads.buf(t, out_grad.len());
                    for (gi, &og) in g.iter_mut().zip(out_grad) {
                        *gi += og;
                    }
                }
            }
        }
        OpKind::AddBias { x, b } => {
            let d = vals.val(*b).len();
            if needs(*x) {
                let g = grads.buf(*x, out_grad.len());
                for (gi, &og) in g.iter_mut().zip(out_grad) {
                    *gi += og;
                }
            }
            if needs(*b) {
                let gb = grads.buf(*b, d);
                for row in out_grad.chunks_exact(d) {
                    for j in 0..d {
                        gb[j] += row[j];
                    }
                }
            }
        }
        OpKind::Mul { a, b } => {
            if needs(*a) {
                let bv = vals.val(*b);
                let ga = grads.buf(*a, out_grad.len());
                for i in 0..out_grad.len() {
                    ga[i] += out_grad[i] * bv[i];
                }
            }
            if needs(*b) {
                let av = vals.val(*a);
                let gb = grads.buf(*b, out_grad.len());
                for i in 0..out_grad.len() {
                    gb[i] += out_grad[i] * av[i];
                }
            }
        }
        OpKind::MulScalar { x, c } => {
            if needs(*x) {
                let c = F::from_f64(*c);
                let g = grads.buf(*x, out_grad.len());
                for (gi, &og) in g.iter_mut().zip(out_grad) {
                    *gi += og * c;
                }
            }
        }
        OpKind::Relu { x } => {
            if needs(*x) {
                let scale = relu_backward_scale::<F>();
                let xv = vals.val(*x);
                let g = grads.buf(*x, out_grad.len());
                for i in 0..out_grad.len() {
                    if xv[i] > F::ZERO {
                        g[i] += out_grad[i] * scale;
                    }
                }
            }
        }
        OpKind::Exp { x } => {
            if needs(*x) {
                let g = grads.buf(*x, out_grad.len());
                for i in 0..out_grad.len() {
                    g[i] += out_grad[i] * out_val[i];
                }
            }
        }
        OpKind::GatherRows { table, ids } => {
            if needs(*table) {
                let d = vals.shape(*table)[1];
                let len = vals.val(*table).len();
                let gt = grads.buf(*table, len);
                for (row, &id) in ids.iter().enumerate() {
                    let src = &out_grad[row * d..(row + 1) * d];
                    let dst = &mut gt[id * d..(id + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
            }
        }
        OpKind::MaskedSoftmax { x, mask } => {
            if needs(*x) {
                let mv = vals.val(*mask);
                let (rows, d) = rows_of(vals.shape(*x));
                let g = grads.buf(*x, out_grad.len());
                for r in 0..rows {
                    let p = &out_val[r * d..(r + 1) * d];
                    let og = &out_grad[r * d..(r + 1) * d];
                    let mr = &mv[r * d..(r + 1) * d];
                    let mut dot = F::ZERO;
                    for j in 0..d {
                        if !masked_off(mr[j]) {
                            dot += og[j] * p[j];
                        }
                    }
                    let gr = &mut g[r * d..(r + 1) * d];
                    for j in 0..d {
                        if !masked_off(mr[j]) {
                            gr[j] += p[j] * (og[j] - dot);
                        }
                    }
                }
            }
        }
        OpKind::LayerNorm { x, gain, bias, eps } => {
            let (xv, gv) = (vals.val(*x), vals.val(*gain));
            let (rows, d) = rows_of(vals.shape(*x));
            let inv_d = F::ONE / F::from_f64(d as f64);
            let eps = F::from_f64(*eps);
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let og = &out_grad[r * d..(r + 1) * d];
                let mut mean = F::ZERO;
                for &v in xr {
                    mean += v;
                }
                mean = mean * inv_d;
                let mut var = F::ZERO;
                for &v in xr {
                    let c = v - mean;
                    var += c * c;
                }
                var = var * inv_d;
                let inv_std = F::ONE / (var + eps).sqrt();
                if needs(*gain) {
                    let gg = grads.buf(*gain, d);
                    for j in 0..d {
                        gg[j] += og[j] * ((xr[j] - mean) * inv_std);
                    }
                }
                if needs(*bias) {
                    let gb = grads.buf(*bias, d);
                    for j in 0..d {
                        gb[j] += og[j];
                    }
                }
                if needs(*x) {
                    // dL/dx = inv_std * (h - mean(h) - xhat * mean(h * xhat)),
                    // where h = dL/dy * gain and xhat is the normalized input.
                    let mut mean_h = F::ZERO;
                    let mut mean_hx = F::ZERO;
                    for j in 0..d {
                        let xh = (xr[j] - mean) * inv_std;
                        let h = og[j] * gv[j];
                        mean_h += h;
                        mean_hx += h * xh;
                    }
                    mean_h = mean_h * inv_d;
                    mean_hx = mean_hx * inv_d;
                    let gx = grads.buf(*x, xv.len());
                    let gxr = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xh = (xr[j] - mean) * inv_std;
                        let h = og[j] * gv[j];
                        gxr[j] += inv_std * (h - mean_h - xh * mean_hx);
                    }
                }
            }
        }
        OpKind::ConcatCols { parts } => {
            let rows = vals.shape(parts[0])[0];
            let total: usize = parts.iter().map(|&p| vals.shape(p)[1]).sum();
            let mut col0 = 0;
            for &p in parts.iter() {
                let d = vals.shape(p)[1];
                if needs(p) {
                    let g = grads.buf(p, rows * d);
                    for r in 0..rows {
                        let src = &out_grad[r * total + col0..r * total + col0 + d];
                        let dst = &mut g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                }
                col0 += d;
            }
        }
        OpKind::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts.iter() {
                let len = vals.val(p).len();
                if needs(p) {
                    let g = grads.buf(p, len);
                    for (gi, &og) in g.iter_mut().zip(&out_grad[off..off + len]) {
                        *gi += og;
                    }
                }
                off += len;
            }
        }
        OpKind::SliceCols { x, start, end } => {
            if needs(*x) {
                let (rows, d) = (vals.shape(*x)[0], vals.shape(*x)[1]);
                let w = end - start;
                let g = grads.buf(*x, rows * d);
                for r in 0..rows {
                    let src = &out_grad[r * w..(r + 1) * w];
                    let dst = &mut g[r * d + start..r * d + end];
                    for j in 0..w {
                        dst[j] += src[j];
                    }
                }
            }
        }
        OpKind::SliceRows { x, start, end } => {
            if needs(*x) {
                let d = vals.shape(*x)[1];
                let len = vals.val(*x).len();
                let g = grads.buf(*x, len);
                let dst = &mut g[start * d..end * d];
                for (gi, &og) in dst.iter_mut().zip(out_grad) {
                    *gi += og;
                }
            }
        }
        OpKind::Reshape { x } => {
            if needs(*x) {
                let g = grads.buf(*x, out_grad.len());
                for (gi, &og) in g.iter_mut().zip(out_grad) {
                    *gi += og;
                }
            }
        }
        OpKind::RowwiseDot { a, b } => {
            let d = vals.shape(*a)[1];
            if needs(*a) {
                let bv = vals.val(*b);
                let ga = grads.buf(*a, bv.len());
                for (r, &g) in out_grad.iter().enumerate() {
                    let br = &bv[r * d..(r + 1) * d];
                    let gar = &mut ga[r * d..(r + 1) * d];
                    for j in 0..d {
                        gar[j] += g * br[j];
                    }
                }
            }
            if needs(*b) {
                let av = vals.val(*a);
                let gb = grads.buf(*b, av.len());
                for (r, &g) in out_grad.iter().enumerate() {
                    let ar = &av[r * d..(r + 1) * d];
                    let gbr = &mut gb[r * d..(r + 1) * d];
                    for j in 0..d {
                        gbr[j] += g * ar[j];
                    }
                }
            }
        }
        OpKind::LogSumExp { x, mask } => {
            if needs(*x) {
                let xv = vals.val(*x);
                let (rows, d) = rows_of(vals.shape(*x));
                let mv = mask.map(|m| vals.val(m));
                let g = grads.buf(*x, xv.len());
                for r in 0..rows {
                    let lse = out_val[r];
                    let og = out_grad[r];
                    let gr = &mut g[r * d..(r + 1) * d];
                    let xr = &xv[r * d..(r + 1) * d];
                    for j in 0..d {
                        let off = mv.is_some_and(|m| masked_off(m[r * d + j]));
                        if !off {
                            gr[j] += og * (xr[j] - lse).exp();
                        }
                    }
                }
            }
        }
        OpKind::Sum { x } => {
            if needs(*x) {
                let len = vals.val(*x).len();
                let g = grads.buf(*x, len);
                for gi in g.iter_mut() {
                    *gi += out_grad[0];
                }
            }
        }
        OpKind::Mean { x } => {
            if needs(*x) {
                let len = vals.val(*x).len();
                let scale = F::ONE / F::from_f64(len as f64);
                let g = grads.buf(*x, len);
                for gi in g.iter_mut() {
                    *gi += out_grad[0] * scale;
                }
            }
        }
    }
}

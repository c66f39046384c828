use std::collections::BTreeMap;

use proptest::prelude::*;

use crate::error::Error;

use super::checkpoint::{self, Section};
use super::gradcheck::grad_check;
use super::kernels::set_corrupt_relu_backward;
use super::params::{Init, ParamStore};
use super::tape::{Tape, Tensor};

fn assert_close(got: &[f32], want: &[f32], tol: f32) {
    assert_eq!(got.len(), want.len(), "length mismatch");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "element {i}: got {g}, want {w} (tol {tol})"
        );
    }
}

// ── forward oracles ──────────────────────────────────────────────────

#[test]
fn matmul_matches_hand_computed_product() {
    let mut t = Tape::new();
    let a = t.constant(vec![1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
    let b = t.constant(vec![7., 8., 9., 10., 11., 12.], &[3, 2]).unwrap();
    let c = t.matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 2]);
    assert_close(t.data(&c), &[58., 64., 139., 154.], 0.0);
}

#[test]
fn matmul_nt_agrees_with_matmul_of_transpose() {
    let mut t = Tape::new();
    let a = t.constant(vec![0.5, -1., 2., 3., 0.25, -0.75], &[2, 3]).unwrap();
    let b = t.constant(vec![1., 2., 3., -4., 5., -6., 7., 8., 9., 10., 11., 12.], &[4, 3]).unwrap();
    let bt = t.constant(
        vec![1., -4., 7., 10., 2., 5., 8., 11., 3., -6., 9., 12.],
        &[3, 4],
    ).unwrap();
    let via_nt = t.matmul_nt(&a, &b).unwrap();
    let via_t = t.matmul(&a, &bt).unwrap();
    assert_close(t.data(&via_nt), t.data(&via_t), 1e-6);
}

#[test]
fn softmax_of_one_two_three_matches_reference() {
    let mut t = Tape::new();
    let x = t.constant(vec![1., 2., 3.], &[1, 3]).unwrap();
    let m = t.constant(vec![0., 0., 0.], &[1, 3]).unwrap();
    let p = t.masked_softmax(&x, &m).unwrap();
    let want = [0.090_030_57, 0.244_728_47, 0.665_240_96];
    assert_close(t.data(&p), &want, 1e-6);
    let s: f32 = t.data(&p).iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn masked_softmax_renormalizes_over_allowed_entries_only() {
    let mut t = Tape::new();
    let x = t.constant(vec![1., 50., 3.], &[1, 3]).unwrap();
    let m = t.constant(vec![0., f32::NEG_INFINITY, 0.], &[1, 3]).unwrap();
    let p = t.masked_softmax(&x, &m).unwrap();
    // softmax over {1, 3} with the masked 50 ignored entirely
    assert_close(t.data(&p), &[0.119_202_92, 0.0, 0.880_797_08], 1e-6);
    assert_eq!(t.data(&p)[1], 0.0);
}

#[test]
fn fully_masked_softmax_row_is_an_error_not_a_nan() {
    let mut t = Tape::new();
    let x = t.constant(vec![1., 2.], &[1, 2]).unwrap();
    let m = t.constant(vec![f32::NEG_INFINITY; 2], &[1, 2]).unwrap();
    match t.masked_softmax(&x, &m) {
        Err(Error::InvalidMask(_)) => {}
        other => panic!("expected InvalidMask, got {other:?}"),
    }
}

#[test]
fn mask_entries_must_be_zero_or_neg_infinity() {
    let mut t = Tape::new();
    let x = t.constant(vec![1., 2.], &[1, 2]).unwrap();
    let m = t.constant(vec![0.0, 0.5], &[1, 2]).unwrap();
    assert!(matches!(t.masked_softmax(&x, &m), Err(Error::InvalidMask(_))));
}

#[test]
fn layer_norm_standardizes_then_applies_gain_and_bias() {
    let mut t = Tape::new();
    let x = t.constant(vec![1., 2., 3., 4.], &[1, 4]).unwrap();
    let gain = t.constant(vec![2.; 4], &[4]).unwrap();
    let bias = t.constant(vec![1.; 4], &[4]).unwrap();
    let y = t.layer_norm(&x, &gain, &bias, 0.0).unwrap();
    // (x - 2.5) / sqrt(1.25), then *2 + 1
    let xh = 1.341_640_8_f32;
    let want = [
        1.0 - 2.0 * xh,
        1.0 - 2.0 * (xh / 3.0),
        1.0 + 2.0 * (xh / 3.0),
        1.0 + 2.0 * xh,
    ];
    assert_close(t.data(&y), &want, 1e-5);
}

#[test]
fn log_sum_exp_matches_reference_with_and_without_mask() {
    let mut t = Tape::new();
    let x = t.constant(vec![0.0, 2f32.ln(), 3f32.ln()], &[1, 3]).unwrap();
    let full = t.log_sum_exp(&x, None).unwrap();
    assert_close(t.data(&full), &[6f32.ln()], 1e-6);
    let m = t.constant(vec![0., 0., f32::NEG_INFINITY], &[1, 3]).unwrap();
    let part = t.log_sum_exp(&x, Some(&m)).unwrap();
    assert_close(t.data(&part), &[3f32.ln()], 1e-6);
}

#[test]
fn log_sum_exp_is_stable_for_large_inputs() {
    let mut t = Tape::new();
    let x = t.constant(vec![80.0, 80.0], &[1, 2]).unwrap();
    let l = t.log_sum_exp(&x, None).unwrap();
    assert_close(t.data(&l), &[80.0 + 2f32.ln()], 1e-4);
}

#[test]
fn gather_rows_selects_rows_and_rejects_out_of_range_ids() {
    let mut t = Tape::new();
    let table = t.constant(vec![0., 1., 10., 11., 20., 21.], &[3, 2]).unwrap();
    let g = t.gather_rows(&table, &[2, 0, 2]).unwrap();
    assert_close(t.data(&g), &[20., 21., 0., 1., 20., 21.], 0.0);
    match t.gather_rows(&table, &[3]) {
        Err(Error::Index { index: 3, len: 3, .. }) => {}
        other => panic!("expected Index error, got {other:?}"),
    }
}

#[test]
fn concat_and_slice_round_trip() {
    let mut t = Tape::new();
    let a = t.constant(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
    let b = t.constant(vec![5., 6.], &[2, 1]).unwrap();
    let cat = t.concat_cols(&[&a, &b]).unwrap();
    assert_close(t.data(&cat), &[1., 2., 5., 3., 4., 6.], 0.0);
    let left = t.slice_cols(&cat, 0, 2).unwrap();
    let right = t.slice_cols(&cat, 2, 3).unwrap();
    assert_close(t.data(&left), t.data(&a), 0.0);
    assert_close(t.data(&right), t.data(&b), 0.0);

    let rows = t.concat_rows(&[&a, &a]).unwrap();
    assert_eq!(rows.shape(), &[4, 2]);
    let back = t.slice_rows(&rows, 2, 4).unwrap();
    assert_close(t.data(&back), t.data(&a), 0.0);
}

#[test]
fn reshape_preserves_row_major_order() {
    let mut t = Tape::new();
    let x = t.constant(vec![1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
    let y = t.reshape(&x, &[3, 2]).unwrap();
    assert_close(t.data(&y), &[1., 2., 3., 4., 5., 6.], 0.0);
    assert!(t.reshape(&x, &[4, 2]).is_err());
}

#[test]
fn elementwise_ops_match_reference_values() {
    let mut t = Tape::new();
    let x = t.constant(vec![-1., 0., 2.], &[1, 3]).unwrap();
    let r = t.relu(&x).unwrap();
    assert_close(t.data(&r), &[0., 0., 2.], 0.0);
    let e = t.exp(&x).unwrap();
    assert_close(t.data(&e), &[0.367_879_44, 1.0, 7.389_056], 1e-5);
    let s = t.mul_scalar(&x, -0.5).unwrap();
    assert_close(t.data(&s), &[0.5, 0.0, -1.0], 0.0);
    let b = t.constant(vec![10., 20., 30.], &[3]).unwrap();
    let two = t.constant(vec![1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
    let ab = t.add_bias(&two, &b).unwrap();
    assert_close(t.data(&ab), &[11., 22., 33., 14., 25., 36.], 0.0);
    let d = t.rowwise_dot(&two, &two).unwrap();
    assert_close(t.data(&d), &[14., 77.], 0.0);
    let sm = t.sum(&two).unwrap();
    assert_close(t.data(&sm), &[21.], 0.0);
    let mn = t.mean(&two).unwrap();
    assert_close(t.data(&mn), &[3.5], 0.0);
}

#[test]
fn non_finite_forward_values_are_reported_as_errors() {
    let mut t = Tape::new();
    let x = t.constant(vec![1e9], &[1]).unwrap();
    match t.exp(&x) {
        Err(Error::Data(msg)) => assert!(msg.contains("exp"), "{msg}"),
        other => panic!("expected Data error, got {other:?}"),
    }
}

#[test]
fn shape_mismatches_name_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(vec![0.; 6], &[2, 3]).unwrap();
    let b = t.constant(vec![0.; 6], &[2, 3]).unwrap();
    match t.matmul(&a, &b) {
        Err(Error::Shape(msg)) => {
            assert!(msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected Shape error, got {other:?}"),
    }
}

// ── backward oracles ─────────────────────────────────────────────────

#[test]
fn gather_backward_scatter_adds_by_multiplicity() {
    let mut t = Tape::new();
    let table = t.leaf(vec![0.; 8], &[4, 2], true).unwrap();
    let g = t.gather_rows(&table, &[1, 1, 3]).unwrap();
    let loss = t.sum(&g).unwrap();
    t.backward(&loss).unwrap();
    let grad = t.grad(&table).unwrap();
    assert_close(grad, &[0., 0., 2., 2., 0., 0., 1., 1.], 0.0);
}

#[test]
fn backward_twice_doubles_leaf_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1., 2., 3.], &[1, 3], true).unwrap();
    let y = t.mul_scalar(&x, 2.0).unwrap();
    let loss = t.sum(&y).unwrap();
    t.backward(&loss).unwrap();
    assert_close(t.grad(&x).unwrap(), &[2., 2., 2.], 0.0);
    t.backward(&loss).unwrap();
    assert_close(t.grad(&x).unwrap(), &[4., 4., 4.], 0.0);
}

#[test]
fn matmul_backward_matches_hand_computed_grads() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1., 2.], &[1, 2], true).unwrap();
    let b = t.leaf(vec![3., 4.], &[2, 1], true).unwrap();
    let c = t.matmul(&a, &b).unwrap();
    let loss = t.sum(&c).unwrap();
    t.backward(&loss).unwrap();
    assert_close(t.grad(&a).unwrap(), &[3., 4.], 0.0);
    assert_close(t.grad(&b).unwrap(), &[1., 2.], 0.0);
}

#[test]
fn masked_entries_get_exactly_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.3, -0.9, 1.7, 0.2], &[1, 4], true).unwrap();
    let m = t.constant(
        vec![0., f32::NEG_INFINITY, 0., f32::NEG_INFINITY],
        &[1, 4],
    ).unwrap();
    let p = t.masked_softmax(&x, &m).unwrap();
    let w = t.constant(vec![1.0, 0.0, -2.0, 0.5], &[1, 4]).unwrap();
    let pw = t.mul(&p, &w).unwrap();
    let loss = t.sum(&pw).unwrap();
    t.backward(&loss).unwrap();
    let g = t.grad(&x).unwrap();
    assert_eq!(g[1], 0.0);
    assert_eq!(g[3], 0.0);
    assert!(g[0] != 0.0 && g[2] != 0.0);
}

#[test]
fn constants_and_masks_collect_no_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1., 2.], &[1, 2], true).unwrap();
    let c = t.constant(vec![3., 4.], &[1, 2]).unwrap();
    let y = t.mul(&x, &c).unwrap();
    let loss = t.sum(&y).unwrap();
    t.backward(&loss).unwrap();
    assert!(t.grad(&c).is_none());
    assert_close(t.grad(&x).unwrap(), &[3., 4.], 0.0);
}

#[test]
fn backward_requires_a_scalar_with_a_grad_path() {
    let mut t = Tape::new();
    let x = t.leaf(vec![1., 2.], &[1, 2], true).unwrap();
    let y = t.mul_scalar(&x, 2.0).unwrap();
    assert!(matches!(t.backward(&y), Err(Error::Contract(_))));
    let c = t.constant(vec![1.], &[1]).unwrap();
    assert!(matches!(t.backward(&c), Err(Error::Contract(_))));
}

// ── finite-difference checks per primitive ───────────────────────────

fn fd_pass(build: impl Fn(&mut Tape) -> (Tensor, Vec<Tensor>)) {
    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape);
    let rep = grad_check(&tape, &loss, &leaves, 1e-3, 1e-3).unwrap();
    assert!(
        rep.pass,
        "max_rel_err {} at leaf {:?}",
        rep.max_rel_err,
        rep.worst()
    );
}

/// Weighted sum with fixed irregular weights so no op's gradient collapses
/// to a constant.
fn spiky_loss(t: &mut Tape, x: &Tensor) -> Tensor {
    let n = x.numel();
    let w: Vec<f32> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f32) - 2.1).collect();
    let shape = x.shape().to_vec();
    let wt = t.constant(w, &shape).unwrap();
    let m = t.mul(x, &wt).unwrap();
    t.sum(&m).unwrap()
}

#[test]
fn finite_differences_confirm_matmul_family() {
    fd_pass(|t| {
        let a = t.leaf(vec![0.7, -1.3, 2.1, 0.4, -0.6, 1.9], &[2, 3], true).unwrap();
        let b = t.leaf(vec![0.2, 1.4, -0.8, 0.9, 1.1, -0.3], &[3, 2], true).unwrap();
        let c = t.matmul(&a, &b).unwrap();
        (spiky_loss(t, &c), vec![a, b])
    });
    fd_pass(|t| {
        let a = t.leaf(vec![0.7, -1.3, 2.1, 0.4], &[2, 2], true).unwrap();
        let b = t.leaf(vec![0.2, 1.4, -0.8, 0.9, 1.1, -0.3], &[3, 2], true).unwrap();
        let c = t.matmul_nt(&a, &b).unwrap();
        (spiky_loss(t, &c), vec![a, b])
    });
    fd_pass(|t| {
        let a = t.leaf(vec![0.7, -1.3, 2.1, 0.4], &[2, 2], true).unwrap();
        let b = t.leaf(vec![0.5, -0.2, 1.3, 0.8], &[2, 2], true).unwrap();
        let c = t.rowwise_dot(&a, &b).unwrap();
        (spiky_loss(t, &c), vec![a, b])
    });
}

#[test]
fn finite_differences_confirm_elementwise_ops() {
    fd_pass(|t| {
        let a = t.leaf(vec![0.7, -1.3, 2.1, 0.4], &[2, 2], true).unwrap();
        let b = t.leaf(vec![0.5, -0.2, 1.3, 0.8], &[2, 2], true).unwrap();
        let s = t.add(&a, &b).unwrap();
        let m = t.mul(&s, &b).unwrap();
        let sc = t.mul_scalar(&m, -1.7).unwrap();
        (spiky_loss(t, &sc), vec![a, b])
    });
    fd_pass(|t| {
        // kept well away from the relu kink at 0
        let x = t.leaf(vec![0.7, -1.3, 2.1, -0.4], &[2, 2], true).unwrap();
        let r = t.relu(&x).unwrap();
        (spiky_loss(t, &r), vec![x])
    });
    fd_pass(|t| {
        let x = t.leaf(vec![0.7, -1.3, 0.1, -0.4], &[2, 2], true).unwrap();
        let e = t.exp(&x).unwrap();
        (spiky_loss(t, &e), vec![x])
    });
    fd_pass(|t| {
        let x = t.leaf(vec![0.7, -1.3, 2.1, 0.4, -0.6, 1.9], &[2, 3], true).unwrap();
        let b = t.leaf(vec![0.3, -0.5, 0.2], &[3], true).unwrap();
        let y = t.add_bias(&x, &b).unwrap();
        (spiky_loss(t, &y), vec![x, b])
    });
}

#[test]
fn finite_differences_confirm_gather_and_layout_ops() {
    fd_pass(|t| {
        let table = t.leaf(
            vec![0.7, -1.3, 2.1, 0.4, -0.6, 1.9, 0.2, 1.4],
            &[4, 2],
            true,
        ).unwrap();
        let g = t.gather_rows(&table, &[1, 3, 1, 0]).unwrap();
        (spiky_loss(t, &g), vec![table])
    });
    fd_pass(|t| {
        let a = t.leaf(vec![0.7, -1.3, 2.1, 0.4], &[2, 2], true).unwrap();
        let b = t.leaf(vec![0.5, -0.2], &[2, 1], true).unwrap();
        let cat = t.concat_cols(&[&a, &b]).unwrap();
        let sl = t.slice_cols(&cat, 1, 3).unwrap();
        (spiky_loss(t, &sl), vec![a, b])
    });
    fd_pass(|t| {
        let a = t.leaf(vec![0.7, -1.3, 2.1, 0.4], &[2, 2], true).unwrap();
        let b = t.leaf(vec![0.5, -0.2, 0.9, 1.1], &[2, 2], true).unwrap();
        let cat = t.concat_rows(&[&a, &b]).unwrap();
        let sl = t.slice_rows(&cat, 1, 4).unwrap();
        let rs = t.reshape(&sl, &[3, 2]).unwrap();
        (spiky_loss(t, &rs), vec![a, b])
    });
}

#[test]
fn finite_differences_confirm_normalizers() {
    fd_pass(|t| {
        let x = t.leaf(vec![0.7, -1.3, 2.1, 0.4, -0.6, 1.9], &[2, 3], true).unwrap();
        let m = t.constant(
            vec![0., 0., f32::NEG_INFINITY, 0., 0., 0.],
            &[2, 3],
        ).unwrap();
        let p = t.masked_softmax(&x, &m).unwrap();
        (spiky_loss(t, &p), vec![x])
    });
    fd_pass(|t| {
        let x = t.leaf(vec![0.7, -1.3, 2.1, 0.4, -0.6, 1.9], &[2, 3], true).unwrap();
        let gain = t.leaf(vec![1.2, 0.8, -0.5], &[3], true).unwrap();
        let bias = t.leaf(vec![0.1, -0.2, 0.3], &[3], true).unwrap();
        let y = t.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        (spiky_loss(t, &y), vec![x, gain, bias])
    });
    fd_pass(|t| {
        let x = t.leaf(vec![0.7, -1.3, 2.1, 0.4, -0.6, 1.9], &[2, 3], true).unwrap();
        let m = t.constant(
            vec![0., f32::NEG_INFINITY, 0., 0., 0., f32::NEG_INFINITY],
            &[2, 3],
        ).unwrap();
        let l = t.log_sum_exp(&x, Some(&m)).unwrap();
        (spiky_loss(t, &l), vec![x])
    });
    fd_pass(|t| {
        let x = t.leaf(vec![0.7, -1.3, 2.1, 0.4], &[2, 2], true).unwrap();
        let l = t.log_sum_exp(&x, None).unwrap();
        let mn = t.mean(&l).unwrap();
        (mn, vec![x])
    });
}

#[test]
fn finite_differences_confirm_a_composite_network() {
    fd_pass(|t| {
        let x = t.leaf(vec![0.9, -0.7, 1.3, 0.6, -1.1, 0.8], &[2, 3], true).unwrap();
        let w1 = t.leaf(
            vec![0.4, -0.6, 0.9, 0.2, -0.3, 0.7, 0.5, -0.8, 0.1, 0.6, -0.2, 0.3],
            &[3, 4],
            true,
        ).unwrap();
        let b1 = t.leaf(vec![0.3, -0.4, 0.2, 0.5], &[4], true).unwrap();
        let gain = t.leaf(vec![1.1, 0.9, 1.2, 0.8], &[4], true).unwrap();
        let bias = t.leaf(vec![0.0, 0.1, -0.1, 0.2], &[4], true).unwrap();
        let h = t.matmul(&x, &w1).unwrap();
        let h = t.add_bias(&h, &b1).unwrap();
        let h = t.relu(&h).unwrap();
        let h = t.layer_norm(&h, &gain, &bias, 1e-5).unwrap();
        let m = t.constant(
            vec![0., 0., f32::NEG_INFINITY, 0., 0., 0., 0., f32::NEG_INFINITY],
            &[2, 4],
        ).unwrap();
        let p = t.masked_softmax(&h, &m).unwrap();
        (spiky_loss(t, &p), vec![x, w1, b1, gain, bias])
    });
}

#[test]
fn corrupted_relu_backward_is_caught_by_the_checker() {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            set_corrupt_relu_backward(false);
        }
    }
    let _reset = Reset;
    set_corrupt_relu_backward(true);
    let mut tape = Tape::new();
    let x = tape.leaf(vec![0.7, 1.3, 2.1, 0.4], &[2, 2], true).unwrap();
    let r = tape.relu(&x).unwrap();
    let loss = spiky_loss(&mut tape, &r);
    let rep = grad_check(&tape, &loss, &[x], 1e-3, 1e-3).unwrap();
    assert!(!rep.pass, "corrupted rule slipped through: {:?}", rep.worst());
    assert!(rep.max_rel_err > 0.1);
}

// ── property-based invariants ────────────────────────────────────────

fn finite_row() -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-8.0f32..8.0, 5)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in proptest::collection::vec(finite_row(), 1..5),
                                      masks in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 5), 1..5)) {
        let n = rows.len().min(masks.len());
        let mut data = Vec::new();
        let mut mask = Vec::new();
        for i in 0..n {
            data.extend_from_slice(&rows[i]);
            let mut any_allowed = false;
            for &allow in &masks[i] {
                mask.push(if allow { 0.0 } else { f32::NEG_INFINITY });
                any_allowed |= allow;
            }
            if !any_allowed {
                let k = mask.len() - 5;
                mask[k] = 0.0;
            }
        }
        let mut t = Tape::new();
        let x = t.constant(data, &[n, 5]).unwrap();
        let m = t.constant(mask.clone(), &[n, 5]).unwrap();
        let p = t.masked_softmax(&x, &m).unwrap();
        let pd = t.data(&p);
        for r in 0..n {
            let row = &pd[r * 5..(r + 1) * 5];
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            for j in 0..5 {
                prop_assert!((0.0..=1.0).contains(&row[j]));
                if mask[r * 5 + j] == f32::NEG_INFINITY {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(mut row in proptest::collection::vec(-5.0f32..5.0, 6)) {
        // guarantee spread so eps cannot dominate the variance
        row[0] = -6.0;
        row[5] = 6.0;
        let mut t = Tape::new();
        let x = t.constant(row, &[1, 6]).unwrap();
        let gain = t.constant(vec![1.; 6], &[6]).unwrap();
        let bias = t.constant(vec![0.; 6], &[6]).unwrap();
        let y = t.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        let yd = t.data(&y);
        let mean: f32 = yd.iter().sum::<f32>() / 6.0;
        let var: f32 = yd.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 6.0;
        prop_assert!(mean.abs() < 1e-4, "mean {}", mean);
        prop_assert!((var - 1.0).abs() < 0.01, "var {}", var);
    }

    #[test]
    fn matmul_distributes_over_addition(a in proptest::collection::vec(-3.0f32..3.0, 6),
                                        b1 in proptest::collection::vec(-3.0f32..3.0, 6),
                                        b2 in proptest::collection::vec(-3.0f32..3.0, 6)) {
        let mut t = Tape::new();
        let ta = t.constant(a, &[2, 3]).unwrap();
        let tb1 = t.constant(b1, &[3, 2]).unwrap();
        let tb2 = t.constant(b2, &[3, 2]).unwrap();
        let sum = t.add(&tb1, &tb2).unwrap();
        let lhs = t.matmul(&ta, &sum).unwrap();
        let p1 = t.matmul(&ta, &tb1).unwrap();
        let p2 = t.matmul(&ta, &tb2).unwrap();
        let rhs = t.add(&p1, &p2).unwrap();
        let (l, r) = (t.data(&lhs).to_vec(), t.data(&rhs).to_vec());
        for (x, y) in l.iter().zip(&r) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn gather_gradients_count_multiplicity(ids in proptest::collection::vec(0usize..6, 1..10)) {
        let mut t = Tape::new();
        let table = t.leaf(vec![0.5; 12], &[6, 2], true).unwrap();
        let g = t.gather_rows(&table, &ids).unwrap();
        let loss = t.sum(&g).unwrap();
        t.backward(&loss).unwrap();
        let grad = t.grad(&table).unwrap();
        for row in 0..6 {
            let count = ids.iter().filter(|&&i| i == row).count() as f32;
            prop_assert_eq!(grad[row * 2], count);
            prop_assert_eq!(grad[row * 2 + 1], count);
        }
    }
}

// ── parameter store ──────────────────────────────────────────────────

#[test]
fn param_init_depends_only_on_name_and_seed() {
    let mut a = ParamStore::new();
    a.init("w.first", &[4, 3], Init::FanIn, 7).unwrap();
    a.init("w.second", &[2, 2], Init::Uniform { limit: 0.1 }, 7).unwrap();

    let mut b = ParamStore::new();
    b.init("unrelated", &[5], Init::Ones, 7).unwrap();
    b.init("w.second", &[2, 2], Init::Uniform { limit: 0.1 }, 7).unwrap();
    b.init("w.first", &[4, 3], Init::FanIn, 7).unwrap();

    assert_eq!(a.get("w.first").unwrap().data, b.get("w.first").unwrap().data);
    assert_eq!(a.get("w.second").unwrap().data, b.get("w.second").unwrap().data);

    let mut c = ParamStore::new();
    c.init("w.first", &[4, 3], Init::FanIn, 8).unwrap();
    assert_ne!(a.get("w.first").unwrap().data, c.get("w.first").unwrap().data);
}

#[test]
fn fan_in_init_respects_its_limit() {
    let mut s = ParamStore::new();
    s.init("w", &[16, 8], Init::FanIn, 3).unwrap();
    let limit = 1.0 / 4.0;
    for &v in &s.get("w").unwrap().data {
        assert!(v.abs() <= limit);
    }
}

#[test]
fn duplicate_param_names_are_rejected() {
    let mut s = ParamStore::new();
    s.init("w", &[2], Init::Zeros, 0).unwrap();
    assert!(matches!(s.init("w", &[2], Init::Zeros, 0), Err(Error::Contract(_))));
}

#[test]
fn export_grads_accumulates_across_tapes() {
    let mut store = ParamStore::new();
    store.insert("w", &[2], vec![1.0, 2.0]).unwrap();

    for scale in [1.0f32, 3.0] {
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape).unwrap();
        let w = bound.get("w").unwrap();
        let y = tape.mul_scalar(&w, scale).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        bound.export_grads(&tape, &mut store).unwrap();
    }
    assert_close(&store.get("w").unwrap().grad, &[4.0, 4.0], 0.0);
    store.zero_grads();
    assert_close(&store.get("w").unwrap().grad, &[0.0, 0.0], 0.0);
}

// ── checkpoints ──────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trips_exactly_and_sorts_entries() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("ckpt");
    let zeta = vec![0.1f32, -0.2, 0.3333, f32::MIN_POSITIVE];
    let alpha = vec![7.0f32; 6];
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), serde_json::json!(3));
    checkpoint::save(
        &prefix,
        vec![
            Section { name: "zeta".into(), shape: &[2, 2], data: &zeta },
            Section { name: "alpha".into(), shape: &[2, 3], data: &alpha },
        ],
        meta,
    ).unwrap();

    let loaded = checkpoint::load(&prefix).unwrap();
    let names: Vec<&str> = loaded.manifest.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["alpha", "zeta"]);
    assert_eq!(loaded.manifest.entries[0].offset, 0);
    assert_eq!(loaded.manifest.entries[1].offset, 24);
    assert_eq!(loaded.manifest.meta["epoch"], serde_json::json!(3));
    let (shape, data) = &loaded.tensors["zeta"];
    assert_eq!(shape, &[2, 2]);
    assert_eq!(data, &zeta);
}

#[test]
fn checkpoint_saves_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![0.5f32, 1.5, -2.5];
    for name in ["a", "b"] {
        checkpoint::save(
            &dir.path().join(name),
            vec![Section { name: "t".into(), shape: &[3], data: &data }],
            BTreeMap::new(),
        ).unwrap();
    }
    for ext in ["json", "bin"] {
        let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
        assert_eq!(a, b, "{ext} differs");
    }
}

#[test]
fn truncated_blob_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("ckpt");
    let data = vec![1.0f32; 8];
    checkpoint::save(
        &prefix,
        vec![Section { name: "t".into(), shape: &[8], data: &data }],
        BTreeMap::new(),
    ).unwrap();
    let bin = dir.path().join("ckpt.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..16]).unwrap();
    assert!(matches!(checkpoint::load(&prefix), Err(Error::Data(_))));
}

#[test]
fn unknown_checkpoint_format_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("ckpt");
    checkpoint::save(&prefix, vec![], BTreeMap::new()).unwrap();
    let json = dir.path().join("ckpt.json");
    let text = std::fs::read_to_string(&json).unwrap();
    std::fs::write(&json, text.replace(checkpoint::FORMAT, "other-format")).unwrap();
    assert!(matches!(checkpoint::load(&prefix), Err(Error::Data(_))));
}

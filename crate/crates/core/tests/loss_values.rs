mod common;

use common::*;
use kgamc::loss::{anchor_penalty, ce_loss, joint_loss, npair_loss};
use kgamc::mkg;
use kgamc::msnet;
use kgamc::nn::gradcheck::check_stores;
use kgamc::nn::{Tape, Tensor};
use kgamc::rgcn::{self, GraphOperators};
use proptest::prelude::*;

fn eval_npair(x: &Tensor<f64>, a: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let (xv, av) = (tape.constant(x.clone()), tape.constant(a.clone()));
    let l = npair_loss(&mut tape, xv, av, labels).unwrap();
    tape.value(l).item()
}

fn eval_penalty(a: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let l = anchor_penalty(&mut tape, av).unwrap();
    tape.value(l).item()
}

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        0.0
    } else {
        d / (nu * nv)
    }
}

/// Scalar-loop softmax cross-entropy.
fn brute_ce(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in rows.iter().zip(labels) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[y].exp() / denom).ln();
    }
    total / rows.len() as f64
}

fn brute_npair(x: &Tensor<f64>, a: &Tensor<f64>, labels: &[usize]) -> f64 {
    let rows: Vec<Vec<f64>> = (0..x.shape()[0])
        .map(|i| (0..a.shape()[0]).map(|k| cos(x.row(i), a.row(k))).collect())
        .collect();
    brute_ce(&rows, labels)
}

fn identity(m: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(&[m, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
}

#[test]
fn aligned_orthogonal_npair_value() {
    let a = identity(10, 16);
    let labels: Vec<usize> = (0..10).collect();
    let l = eval_npair(&a, &a, &labels);
    let e = std::f64::consts::E;
    assert!((l - (-(e / (e + 9.0)).ln())).abs() < 1e-12);
    assert!((l - 1.46115).abs() < 1e-5);
}

#[test]
fn equal_cosines_give_log_m_and_batch_order_is_irrelevant() {
    let a = Tensor::from_fn(&[4, 3], |i| [1.0, 2.0, 3.0][i % 3]);
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[5, 3]);
    let labels = [0, 1, 2, 3, 1];
    assert!((eval_npair(&x, &a, &labels) - 4f64.ln()).abs() < 1e-12);

    let a = rand_tensor(&mut r, &[4, 3]);
    let base = eval_npair(&x, &a, &labels);
    let order = [3, 0, 4, 1, 2];
    let xs = Tensor::from_fn(&[5, 3], |i| x.row(order[i / 3])[i % 3]);
    let ls: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    assert!((eval_npair(&xs, &a, &ls) - base).abs() < 1e-12);
}

#[test]
fn penalty_trivial_cases() {
    assert_eq!(eval_penalty(&identity(10, 10)), 0.0);
    assert_eq!(
        eval_penalty(&Tensor::from_fn(&[5, 3], |i| [0.3, -1.0, 2.0][i % 3])),
        1.0
    );
    let anti = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
    assert_eq!(eval_penalty(&anti), 0.0);
}

#[test]
fn ce_cases_and_scalar_oracle() {
    let eval = |logits: Tensor<f64>, labels: &[usize]| {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let c = ce_loss(&mut tape, l, labels).unwrap();
        tape.value(c).item()
    };
    assert!((eval(Tensor::zeros(&[3, 7]), &[0, 4, 6]) - 7f64.ln()).abs() < 1e-15);
    let huge = Tensor::from_fn(&[2, 3], |i| if i % 3 == [2, 0][i / 3] { 1e3 } else { 0.0 });
    assert!(eval(huge, &[2, 0]) < 1e-12);
    for seed in 0..20 {
        let m = rand_tensor(&mut rng(seed), &[4, 3]).map(|v| 4.0 * v);
        let labels = [seed as usize % 3, 1, 2, 0];
        let rows: Vec<Vec<f64>> = (0..4).map(|i| m.row(i).to_vec()).collect();
        assert!((eval(m, &labels) - brute_ce(&rows, &labels)).abs() < 1e-9);
    }
}

#[test]
fn lambda_zero_is_plain_cross_entropy() {
    let mut r = rng(4);
    let (x, a, lg) = (
        rand_tensor(&mut r, &[4, 5]),
        rand_tensor(&mut r, &[3, 5]),
        rand_tensor(&mut r, &[4, 3]),
    );
    let labels = [0, 2, 1, 1];
    let mut tape = Tape::new();
    let (xv, av, lv) = (tape.leaf(x), tape.leaf(a), tape.leaf(lg));
    let (total, parts) = joint_loss(&mut tape, xv, av, lv, &labels, 0.0).unwrap();
    assert_eq!(parts.l_total, parts.l_ce);
    tape.backward(total).unwrap();
    if let Some(g) = tape.grad(av) {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    let mut tape = Tape::new();
    let (xv, av, lv) = (
        tape.leaf(rand_tensor(&mut r, &[4, 5])),
        tape.leaf(rand_tensor(&mut r, &[3, 5])),
        tape.leaf(rand_tensor(&mut r, &[4, 3])),
    );
    let (_, parts) = joint_loss(&mut tape, xv, av, lv, &labels, 0.2).unwrap();
    assert!(parts.identity_gap() < 1e-12);
    assert!(parts.is_finite());
}

#[test]
fn joint_loss_gradients_through_both_networks() {
    let g = toy_graph();
    let feats = mkg::init_node_features(&g).unwrap();
    let anchors = mkg::anchors(&g, &toy_classes()).unwrap();
    let ops = GraphOperators::new(&g);
    for seed in 0..3 {
        let m = tiny_msnet(seed, 16, 3, 4);
        let rp = tiny_rgcn(seed + 50, &g, 4);
        let frames = rand_tensor(&mut rng(seed + 7), &[3, 2, 16]);
        let labels = [0, 2, 1];
        let stores = [m.features.clone(), m.classifier.clone(), rp.store.clone()];
        let r = check_stores(&stores, |tape, s| {
            let n = rgcn::rgcn_forward_with_store(tape, &ops, &feats, &rp, &s[2])?;
            let a = rgcn::semantic_anchors(tape, n, &anchors)?;
            let x = msnet::msnet_forward_with_store(tape, &frames, &m, &s[0])?;
            let logits = msnet::classify_with_store(tape, x, &m, &s[1])?;
            Ok(joint_loss(tape, x, a, logits, &labels, 0.2)?.0)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        assert!(r.kinks * 20 <= r.checked, "{r:?}");
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Tensor::from_vec(&[rows, cols], v).unwrap())
}

fn scale_row(t: &Tensor<f64>, row: usize, c: f64) -> Tensor<f64> {
    let cols = t.shape()[1];
    let mut out = t.clone();
    out.data_mut()[row * cols..(row + 1) * cols]
        .iter_mut()
        .for_each(|v| *v *= c);
    out
}

proptest! {
    #[test]
    fn metric_losses_are_scale_invariant(
        x in matrix(5, 4),
        a in matrix(3, 4),
        row in 0usize..3,
        c in 0.01f64..100.0,
    ) {
        let labels = [0, 1, 2, 1, 0];
        let base = eval_npair(&x, &a, &labels);
        prop_assert!((eval_npair(&scale_row(&x, row, c), &a, &labels) - base).abs() < 1e-9);
        prop_assert!((eval_npair(&x, &scale_row(&a, row, c), &labels) - base).abs() < 1e-9);
        let p = eval_penalty(&a);
        prop_assert!((eval_penalty(&scale_row(&a, row, c)) - p).abs() < 1e-9);
    }

    #[test]
    fn metric_losses_stay_in_range_and_match_oracle(x in matrix(6, 3), a in matrix(4, 3)) {
        let labels = [0, 1, 2, 3, 0, 2];
        let l = eval_npair(&x, &a, &labels);
        prop_assert!(l > 0.0 && l.is_finite());
        prop_assert!(l <= 4f64.ln() + 2.0);
        prop_assert!((l - brute_npair(&x, &a, &labels)).abs() < 1e-9);
        let p = eval_penalty(&a);
        prop_assert!((0.0..=1.0).contains(&p));
        let mut mean = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    mean += cos(a.row(i), a.row(j)) / 12.0;
                }
            }
        }
        prop_assert!((p - mean.max(0.0)).abs() < 1e-12);
    }
}

mod common;

use dysseg::{Graph, Tensor};

const SEEDS: u64 = 20;
const MAX_REL_ERR: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, case) in common::ops::suite() {
        let worst = (0..SEEDS).map(case).fold(0.0, f64::max);
        if !(worst < MAX_REL_ERR) {
            failures.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn matmul_gradient_of_sum_is_tight() {
    for seed in 0..5 {
        let mut r = common::rng(seed);
        let a = common::randn(&mut r, &[3, 4], 1.0);
        let b = common::randn(&mut r, &[4, 2], 1.0);
        let err = common::max_grad_error(&[a, b], seed, |g, v| {
            let p = g.matmul(v[0], v[1]).unwrap();
            g.sum_all(p)
        });
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn conv_gradient_is_tight() {
    for seed in 0..5 {
        let mut r = common::rng(100 + seed);
        let x = common::randn(&mut r, &[2, 2, 5, 5], 1.0);
        let w = common::randn(&mut r, &[3, 2, 3, 3], 1.0);
        let err = common::max_grad_error(&[x, w], seed, |g, v| g.conv2d(v[0], v[1], None, 2, 1).unwrap());
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut r = common::rng(7);
    let mut g = Graph::new();
    let x = g.constant(common::randn(&mut r, &[2, 5, 8], 1.0));
    let w: Vec<_> = (0..4)
        .map(|_| g.constant(common::randn(&mut r, &[8, 8], 0.7)))
        .collect();
    let att = g.multi_head_attention(x, w[0], w[1], w[2], w[3], 4).unwrap();
    assert_eq!(g.shape(att.out), &[2, 5, 8]);
    assert_eq!(g.shape(att.weights), &[8, 5, 5]);
    for row in g.value(att.weights).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut r = common::rng(3);
        let mut g = Graph::new();
        let x = g.constant(common::randn(&mut r, &[2, 3, 8, 8], 1.0));
        let w = g.constant(common::randn(&mut r, &[4, 3, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.max_pool2d(y, 2, 2, 0).unwrap();
        let y = g.upsample_bilinear2x(y).unwrap();
        let s = g.softmax(y, 1).unwrap();
        g.value(s).clone()
    };
    assert!(run().bitwise_eq(&run()));
}

#[test]
fn upsample_constant_and_pool_halving() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 3, 4, 4], -1.25));
    let u = g.upsample_bilinear2x(c).unwrap();
    assert!(g.value(u).data().iter().all(|&v| v == -1.25));
    let p = g.max_pool2d(c, 2, 2, 0).unwrap();
    assert_eq!(g.shape(p), &[2, 3, 2, 2]);
}

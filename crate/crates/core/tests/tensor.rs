mod support;

use maskdn::tensor::{Adam, AdamConfig, Graph, Tensor, TensorError};
use proptest::prelude::*;
use support::checks::gradient_integrity;
use support::gradients::uniform;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn softmax(data: &[f64], n: usize) -> Vec<f64> {
    let mut g = Graph::inference();
    let x = g.constant(t(&[data.len() / n, n], data));
    let y = g.softmax(x).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn gradient_integrity_criterion() {
    let c = gradient_integrity();
    assert!(c.passed, "{}", c.detail);
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0], 2), vec![0.5, 0.5]);
    let p = softmax(&[2f64.ln(), 0.0], 2);
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(softmax(&[1000.0, 1000.0], 2), vec![0.5, 0.5]);
    let p = softmax(&[-1000.0, 0.0, 1000.0], 3);
    assert!(p.iter().all(|v| v.is_finite()) && (p[2] - 1.0).abs() < 1e-15);
}

#[test]
fn matmul_identity_and_associativity() {
    let a = uniform(&[5, 7], 1.0, 1);
    assert_eq!(a.matmul(&Tensor::eye(7)).unwrap(), a);
    assert_eq!(Tensor::eye(5).matmul(&a).unwrap(), a);
    let b = uniform(&[7, 3], 1.0, 2);
    let c = uniform(&[3, 4], 1.0, 3);
    let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
    let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
    for (x, y) in left.data().iter().zip(right.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(matches!(a.matmul(&c), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_matches_naive_loop() {
    let (m, k, n) = (13, 17, 9);
    let a = uniform(&[m, k], 1.0, 4);
    let b = uniform(&[k, n], 1.0, 5);
    let c = a.matmul(&b).unwrap();
    for i in 0..m {
        for j in 0..n {
            let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
            assert!((c.data()[i * n + j] - want).abs() < 1e-12);
        }
    }
}

/// Textbook Adam on flat vectors.
fn reference_adam(p: &mut [f64], grads: &[Vec<f64>], cfg: AdamConfig) {
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (step, g) in grads.iter().enumerate() {
        let t = (step + 1) as i32;
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[test]
fn adam_matches_reference_trajectory() {
    let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
    let start = uniform(&[6], 1.0, 6);
    let grads: Vec<Vec<f64>> = (0..10).map(|s| uniform(&[6], 2.0, 100 + s).data().to_vec()).collect();
    let mut params = vec![start.clone()];
    let mut adam = Adam::new(cfg, &params);
    for g in &grads {
        adam.step(&mut params, &[t(&[6], g)]).unwrap();
    }
    let mut want = start.data().to_vec();
    reference_adam(&mut want, &grads, cfg);
    for (a, b) in params[0].data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
    assert_eq!(adam.steps_taken(), 10);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    let mut params = vec![t(&[3], &[0.0, 0.0, 0.0])];
    let mut adam = Adam::new(cfg, &params);
    adam.step(&mut params, &[t(&[3], &[2.0, -0.5, 0.0])]).unwrap();
    let p = params[0].data();
    assert!((p[0] + 1e-3).abs() < 1e-9 && (p[1] - 1e-3).abs() < 1e-9 && p[2] == 0.0);
}

#[test]
fn adam_with_zero_lr_is_a_no_op() {
    let mut params = vec![uniform(&[4], 1.0, 7)];
    let before = params.clone();
    let mut adam = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &params);
    for s in 0..3 {
        adam.step(&mut params, &[uniform(&[4], 1.0, 8 + s)]).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn backward_of_sum_is_ones_and_detached_params_get_zero() {
    let mut g = Graph::new();
    let w = g.param(uniform(&[3, 4], 1.0, 9));
    let other = g.param(uniform(&[2], 1.0, 10));
    let s = g.sum(w).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w), Tensor::ones(&[3, 4]));
    assert_eq!(grads.get(other), Tensor::zeros(&[2]));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let out = g.value(y).data();
    assert_eq!(&out[..2], &[0.0, 0.0]);
    assert!((out[2] - 1.0).abs() < 1e-9 && (out[3] + 1.0).abs() < 1e-9);
}

#[test]
fn l1_examples() {
    let mut g = Graph::inference();
    let a = uniform(&[4, 3], 1.0, 11);
    let (x, y) = (g.constant(a.clone()), g.constant(a.clone()));
    let z = g.l1_loss(x, y).unwrap();
    assert_eq!(g.value(z).item(), 0.0);
    let shifted = g.constant(a.map(|v| v + 0.1));
    let d = g.l1_loss(shifted, x).unwrap();
    assert!((g.value(d).item() - 0.1).abs() < 1e-12);
}

#[test]
fn non_finite_results_are_reported() {
    let mut g = Graph::inference();
    let a = g.constant(t(&[1, 1], &[1e200]));
    let b = g.constant(t(&[1, 1], &[1e200]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::NonFinite { .. })));
}

#[test]
fn construction_checks_lengths() {
    assert!(matches!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]), Err(TensorError::DataLength { .. })));
    assert_eq!(Tensor::<f32>::zeros(&[2, 3]).reshape(vec![3, 2]).unwrap().shape(), [3, 2]);
    assert!(Tensor::<f32>::zeros(&[2, 3]).reshape(vec![4, 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, n in 1usize..9, seed in 0u64..10_000, scale in 0.1f64..500.0) {
        let x = uniform(&[rows * n], scale, seed);
        let p = softmax(x.data(), n);
        for row in p.chunks_exact(n) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(n in 1usize..9, seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let x = uniform(&[n], 5.0, seed);
        let a = softmax(x.data(), n);
        let b = softmax(&x.data().iter().map(|v| v + shift).collect::<Vec<_>>(), n);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_an_involution(r in 1usize..8, c in 1usize..8, seed in 0u64..1000) {
        let a = uniform(&[r, c], 1.0, seed);
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }
}

//! Independent scalar oracles for the numerical primitives.

use editlab::autodiff::Tape;
use editlab::optim::{adam_step, AdamConfig, AdamState};
use editlab::tensor::{matmul, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let a: Vec<f32> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = matmul(
            &Tensor::new(vec![4, 5], a.clone()).unwrap(),
            &Tensor::new(vec![5, 3], b.clone()).unwrap(),
        )
        .unwrap();
        let a64: Vec<f64> = a.iter().map(|v| *v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|v| *v as f64).collect();
        let oracle = triple_loop(&a64, &b64, 4, 5, 3);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert!((*x as f64 - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn masked_cross_entropy_matches_scalar_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let logits: Vec<f32> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets = [rng.random_range(0..5usize), rng.random_range(0..5), rng.random_range(0..5)];
        let mask = [true, false, true];

        let mut oracle = 0.0f64;
        for t in [0usize, 2] {
            let row: Vec<f64> = logits[t * 5..(t + 1) * 5].iter().map(|v| *v as f64).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - row[targets[t]];
        }
        oracle /= 2.0;

        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::new(vec![3, 5], logits).unwrap());
        let loss = tape.masked_cross_entropy(l, &targets, &mask).unwrap();
        assert!((tape.scalar(loss).unwrap() - oracle).abs() < 1e-6);
    }
}

#[test]
fn last_position_mask_is_single_token_supervision() {
    let logits = Tensor::new(vec![3, 4], vec![0.1f32, 0.7, -0.2, 0.4, 1.0, 0.0, 0.5, -1.0, 0.3, 0.3, 0.9, 0.2]).unwrap();
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(logits.clone());
    let masked = tape.masked_cross_entropy(l, &[0, 1, 2], &[false, false, true]).unwrap();
    let mut tape2 = Tape::<f32>::new();
    let last = tape2.constant(Tensor::new(vec![1, 4], logits.data()[8..].to_vec()).unwrap());
    let single = tape2.masked_cross_entropy(last, &[2], &[true]).unwrap();
    assert_eq!(tape.scalar(masked), tape2.scalar(single));
}

/// Scalar Adam written out independently of the vectorized optimizer.
fn reference_adam(p: f64, grads: &[f64], cfg: AdamConfig) -> f64 {
    let (mut p, mut m, mut v) = (p, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    p
}

#[test]
fn adam_matches_scalar_reference_over_many_steps() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let grads = [1.0, -0.5, 0.25, 2.0, 0.0, -1.0];
    let mut params = vec![Tensor::new(vec![1], vec![1.0f32]).unwrap()];
    let mut state = AdamState::new(cfg, 1);
    for g in grads {
        adam_step(&mut params, &["p".into()], &[Some(vec![g as f32])], &mut state, &[true]).unwrap();
    }
    let expect = reference_adam(1.0, &grads, cfg);
    assert!((params[0].data()[0] as f64 - expect).abs() < 1e-6);
    assert_eq!(state.t, grads.len() as u64);
}

proptest! {
    #[test]
    fn masked_out_parameters_stay_bit_identical(
        mask in proptest::collection::vec(any::<bool>(), 4),
        steps in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Tensor<f32>> = (0..4)
            .map(|_| Tensor::new(vec![3], (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let before = params.clone();
        let names: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        let mut state = AdamState::new(AdamConfig::default(), 4);
        for _ in 0..steps {
            let grads: Vec<Option<Vec<f32>>> = (0..4)
                .map(|_| Some((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            adam_step(&mut params, &names, &grads, &mut state, &mask).unwrap();
        }
        for i in 0..4 {
            if !mask[i] {
                let a: Vec<u32> = params[i].data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = before[i].data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
        prop_assert_eq!(state.t, steps as u64);
    }
}

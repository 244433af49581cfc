//! Central finite-difference verification of the autodiff primitives.
//!
//! Each primitive is wrapped into a scalar `L = Σ out ⊙ R` with a random
//! projection `R`; the tape gradient of every input is compared with
//! `(L(x+h) − L(x−h)) / 2h` in f64 using the norm-wise relative error
//! `‖a − n‖ / max(‖a‖, ‖n‖)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::seed;
use crate::tensor::Tensor;

pub type Inputs = fn(&mut seed::Rng) -> Vec<Tensor<f64>>;
pub type Build = for<'a> fn(&mut Tape<'a, f64>, &[Var]) -> Var;

/// A primitive (or composition) under test.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub inputs: Inputs,
    pub build: Build,
}

pub fn random(rng: &mut seed::Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Layernorm parameters `[gain; bias]` with gains kept away from zero so
/// the input path is exercised.
fn ln_params(rng: &mut seed::Rng, d: usize) -> Tensor<f64> {
    let mut p = random(rng, &[2, d]);
    for g in &mut p.data_mut()[..d] {
        *g += 1.5;
    }
    p
}

fn loss_of(inputs: &[Tensor<f64>], proj: Option<&Tensor<f64>>, build: Build, grads: bool) -> (f64, Vec<Vec<f64>>, Vec<usize>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let loss = match proj {
        _ if tape.value(out).numel() == 1 => out,
        Some(r) => {
            let r = tape.constant(r.clone());
            let prod = tape.mul(out, r).expect("projection matches output");
            tape.sum(prod)
        }
        None => return (0.0, Vec::new(), shape),
    };
    let value = tape.scalar(loss).expect("scalar loss");
    if !grads {
        return (value, Vec::new(), shape);
    }
    let g = tape.backward(loss).expect("backward");
    let gs = vars.iter().map(|v| g.get(*v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
    (value, gs, shape)
}

/// Worst relative error over the inputs of `case` for one seed.
pub fn relative_error(case: &Case, seed: u64, h: f64) -> f64 {
    let mut rng = seed::rng(seed);
    let inputs = (case.inputs)(&mut rng);
    let (_, _, shape) = loss_of(&inputs, None, case.build, false);
    let proj = random(&mut rng, &shape);
    let (_, analytic, _) = loss_of(&inputs, Some(&proj), case.build, true);
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[which].data_mut()[i] -= h;
            let (lp, _, _) = loss_of(&plus, Some(&proj), case.build, false);
            let (lm, _, _) = loss_of(&minus, Some(&proj), case.build, false);
            *slot = (lp - lm) / (2.0 * h);
        }
        let a = &analytic[which];
        if a.len() != numeric.len() {
            return f64::INFINITY;
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Every primitive recorded by the tape, plus the per-layer composition
/// used by the model.
pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            inputs: |r| vec![random(r, &[3, 4]), random(r, &[4, 5])],
            build: |t, v| t.matmul(v[0], v[1]).unwrap(),
        },
        Case {
            name: "add",
            inputs: |r| vec![random(r, &[3, 4]), random(r, &[3, 4])],
            build: |t, v| t.add(v[0], v[1]).unwrap(),
        },
        Case {
            name: "mul",
            inputs: |r| vec![random(r, &[2, 5]), random(r, &[2, 5])],
            build: |t, v| t.mul(v[0], v[1]).unwrap(),
        },
        Case {
            name: "sum",
            inputs: |r| vec![random(r, &[4, 3])],
            build: |t, v| t.sum(v[0]),
        },
        Case {
            name: "layer_norm",
            inputs: |r| vec![random(r, &[3, 6]), ln_params(r, 6)],
            build: |t, v| t.layer_norm(v[0], v[1]).unwrap(),
        },
        Case {
            name: "softmax",
            inputs: |r| vec![random(r, &[3, 5])],
            build: |t, v| t.softmax(v[0]).unwrap(),
        },
        Case {
            name: "gelu",
            inputs: |r| vec![random(r, &[4, 4])],
            build: |t, v| t.gelu(v[0]),
        },
        Case {
            name: "gather",
            inputs: |r| vec![random(r, &[6, 3])],
            build: |t, v| t.gather(v[0], &[4, 0, 4, 2, 5]).unwrap(),
        },
        Case {
            name: "causal_attention",
            // Two sequences of length 3, width 4, two heads.
            inputs: |r| vec![random(r, &[6, 4]), random(r, &[6, 4]), random(r, &[6, 4])],
            build: |t, v| t.causal_attention(v[0], v[1], v[2], 2, 3).unwrap(),
        },
        Case {
            name: "masked_cross_entropy",
            inputs: |r| vec![random(r, &[4, 5])],
            build: |t, v| {
                t.masked_cross_entropy(v[0], &[1, 3, 0, 4], &[true, false, true, true])
                    .unwrap()
            },
        },
        Case {
            name: "weighted_cross_entropy",
            inputs: |r| vec![random(r, &[3, 6])],
            build: |t, v| {
                t.weighted_cross_entropy(v[0], &[5, 2, 0], &[0.25, 0.0, 0.75])
                    .unwrap()
            },
        },
        Case {
            name: "transformer_block",
            inputs: |r| {
                vec![
                    random(r, &[4, 4]),
                    ln_params(r, 4),
                    random(r, &[4, 4]),
                    random(r, &[4, 4]),
                    random(r, &[4, 4]),
                    random(r, &[4, 8]),
                    random(r, &[8, 4]),
                ]
            },
            build: |t, v| {
                let h = t.layer_norm(v[0], v[1]).unwrap();
                let q = t.matmul(h, v[2]).unwrap();
                let k = t.matmul(h, v[3]).unwrap();
                let val = t.matmul(h, v[4]).unwrap();
                let a = t.causal_attention(q, k, val, 2, 2).unwrap();
                let x = t.add(v[0], a).unwrap();
                let u = t.matmul(x, v[5]).unwrap();
                let u = t.gelu(u);
                let m = t.matmul(u, v[6]).unwrap();
                t.add(x, m).unwrap()
            },
        },
    ]
}

//! Adam with bias correction, restricted to a per-parameter trainable mask.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter plus the shared step counter.
/// Moments are allocated the first time a parameter is trainable.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn first_moment(&self, param: usize) -> Option<&[f32]> {
        self.m.get(param).and_then(|m| m.as_deref())
    }

    pub fn second_moment(&self, param: usize) -> Option<&[f32]> {
        self.v.get(param).and_then(|v| v.as_deref())
    }

    /// Clears moments and the step counter.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.iter_mut().for_each(|m| *m = None);
        self.v.iter_mut().for_each(|v| *v = None);
    }
}

/// Moments of rarely used rows decay geometrically and would otherwise
/// end up as subnormals, which are very slow to compute with. At that
/// magnitude their contribution to the update is far below f32 resolution.
#[inline(always)]
fn flush_subnormal(x: f32) -> f32 {
    if x.abs() < f32::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// One Adam update. Parameters whose mask entry is `false` (or that have no
/// gradient) are left untouched, bit for bit, and so are their moments; the
/// step counter advances regardless.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    names: &[String],
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    trainable: &[bool],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || trainable.len() != n || names.len() != n || state.m.len() != n {
        return shape_err(
            "adam_step",
            format!(
                "{n} params, {} names, {} grads, {} mask entries, state for {}",
                names.len(),
                grads.len(),
                trainable.len(),
                state.m.len()
            ),
        );
    }
    for i in 0..n {
        if let (true, Some(g)) = (trainable[i], &grads[i]) {
            if g.len() != params[i].numel() {
                return shape_err(
                    "adam_step",
                    format!("gradient for `{}` has {} entries", names[i], g.len()),
                );
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(names[i].clone()));
            }
        }
    }

    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);

    for i in 0..n {
        let (true, Some(g)) = (trainable[i], &grads[i]) else {
            continue;
        };
        let len = g.len();
        let m = state.m[i].get_or_insert_with(|| vec![0.0; len]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; len]);
        for (((p, gi), mi), vi) in params[i].data_mut().iter_mut().zip(g).zip(m).zip(v) {
            let gd = *gi as f64;
            let mn = beta1 * (*mi as f64) + (1.0 - beta1) * gd;
            let vn = beta2 * (*vi as f64) + (1.0 - beta2) * gd * gd;
            *mi = flush_subnormal(mn as f32);
            *vi = flush_subnormal(vn as f32);
            let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
            *p = ((*p as f64) - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn all_false_mask_is_a_no_op_but_counts_the_step() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), 1);
        let grads = vec![Some(vec![0.3f32, 0.1, -0.2])];
        adam_step(&mut params, &names(1), &grads, &mut state, &[false]).unwrap();
        assert_eq!(state.t, 1);
        assert_eq!(params[0].data(), before[0].data());
        assert!(state.first_moment(0).is_none());
    }

    #[test]
    fn scalar_update_matches_reference() {
        let mut params = vec![Tensor::new(vec![1], vec![1.0f32]).unwrap()];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, 1);
        adam_step(&mut params, &names(1), &[Some(vec![1.0])], &mut state, &[true]).unwrap();
        // Reference: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 → p = 1 − 0.1·1/(1 + 1e-8).
        let m_hat = (0.1f64) / (1.0 - 0.9);
        let v_hat = (0.001f64) / (1.0 - 0.999);
        let expect = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((params[0].data()[0] as f64 - expect).abs() < 1e-7);
        assert!((expect - 0.9).abs() < 1e-6);
    }

    #[test]
    fn only_masked_in_parameters_change() {
        let mut params = vec![
            Tensor::new(vec![2], vec![1.0f32, 1.0]).unwrap(),
            Tensor::new(vec![2], vec![1.0f32, 1.0]).unwrap(),
        ];
        let mut state = AdamState::new(AdamConfig::default(), 2);
        let grads = vec![Some(vec![1.0f32, 1.0]), Some(vec![1.0f32, 1.0])];
        adam_step(&mut params, &names(2), &grads, &mut state, &[true, false]).unwrap();
        assert!(params[0].data().iter().all(|p| *p < 1.0));
        assert_eq!(params[1].data(), &[1.0, 1.0]);
        assert!(state.second_moment(1).is_none());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = vec![Tensor::new(vec![1], vec![1.0f32]).unwrap()];
        let mut state = AdamState::new(AdamConfig::default(), 1);
        let err = adam_step(
            &mut params,
            &["layer3.mlp_down".to_string()],
            &[Some(vec![f32::NAN])],
            &mut state,
            &[true],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "layer3.mlp_down"));
        assert_eq!(state.t, 0);
    }
}

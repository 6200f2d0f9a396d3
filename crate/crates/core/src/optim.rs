//! Adam optimizer.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(param: &mut [f32], grad: &[f32], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(param.len(), grad.len(), "gradient length mismatch");
    assert_eq!(param.len(), state.m.len(), "state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = cfg.beta1 * state.m[i] as f64 + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        param[i] = (param[i] as f64 - update) as f32;
    }
}

/// Adam over a whole [`ParamStore`], with per-parameter step counters so that
/// parameters frozen for a while start with fresh bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: IndexMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: IndexMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Updates every parameter not rejected by `frozen`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Vec<f32>>, frozen: impl Fn(&str) -> bool) {
        for (name, grad) in grads {
            if frozen(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(grad.len()));
            adam_step(p.data_mut(), grad, state, &self.config);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params() {
        let mut p = vec![0.5f32, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default());
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0f32];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg);
        let (m0, v0) = (s.m[0], s.v[0]);
        adam_step(&mut p, &[0.0], &mut s, &cfg);
        assert!((s.m[0] - m0 * 0.9).abs() < 1e-7);
        assert!((s.v[0] - v0 * 0.999).abs() < 1e-9);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 => update = lr / (1 + eps)
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = vec![0.0f32];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg);
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![0.3f32, -0.7, 1.1];
            let mut s = AdamState::new(3);
            for k in 0..10 {
                let g: Vec<f32> = p.iter().map(|x| x * 2.0 + k as f32 * 0.01).collect();
                adam_step(&mut p, &g, &mut s, &AdamConfig::default());
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

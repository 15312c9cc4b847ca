use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Decoupled weight decay per unit learning rate.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 200,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weight_decay: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.adam_beta1 > 0.0
            && self.adam_beta1 < 1.0
            && self.adam_beta2 > 0.0
            && self.adam_beta2 < 1.0
            && self.adam_eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Advances the step counter and updates every parameter of `model` with
    /// `grads` laid out in visiting order.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        model.visit_params_mut(&mut |p| {
            let n = p.len();
            update(p, &grads[off..off + n], &mut m[off..off + n], &mut v[off..off + n], cfg, t);
            off += n;
        });
        debug_assert_eq!(off, grads.len());
    }
}

fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], cfg: &TrainConfig, t: u64) {
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * p[i]);
    }
}

/// One bias-corrected Adam update of a flat parameter vector at step `t ≥ 1`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig, t: u64) {
    assert!(t >= 1, "adam steps are 1-based");
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t = t;
    update(params, grads, &mut state.m, &mut state.v, cfg, t);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        for t in 1..=10 {
            adam_step(&mut p, &[0.0; 3], &mut s, &cfg, t);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_step_approaches_learning_rate() {
        // scalar simulation of the moment recursions in closed form:
        // m_t = g(1-b1^t), v_t = g²(1-b2^t), so the corrected step is lr·g/(|g|+eps·…)
        let cfg = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        for g in [3.0, -0.2, 1e-3] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            let mut prev = 0.0;
            for t in 1..=2000 {
                adam_step(&mut p, &[g], &mut s, &cfg, t);
                let step = p[0] - prev;
                prev = p[0];
                if t > 1000 {
                    let want = -cfg.learning_rate * g.signum();
                    assert!((step - want).abs() < 1e-4 * cfg.learning_rate.max(1.0), "g={g} t={t} step={step}");
                }
            }
        }
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut s = AdamState::new(2);
        for t in 1..=100 {
            adam_step(&mut p, &[0.0; 2], &mut s, &cfg, t);
        }
        let factor = (1.0f64 - 0.005).powi(100);
        assert!((p[0] - 2.0 * factor).abs() < 1e-12);
        assert!((p[1] + 4.0 * factor).abs() < 1e-12);
    }

    #[test]
    fn runs_are_bit_identical() {
        let cfg = TrainConfig::default();
        let run = || {
            let mut p = vec![0.5; 4];
            let mut s = AdamState::new(4);
            for t in 1..=50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x - 0.1 * t as f64).collect();
                adam_step(&mut p, &g, &mut s, &cfg, t);
            }
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validate_rejects_bad_configs() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { weight_decay: -1.0, ..TrainConfig::default() }.validate().is_err());
    }
}

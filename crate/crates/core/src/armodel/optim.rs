//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, decay: Vec<bool>) -> Self {
        let n = decay.len();
        AdamW {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            decay,
        }
    }

    /// Restores moment estimates saved by a checkpoint.
    pub fn with_state(
        config: AdamWConfig,
        decay: Vec<bool>,
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    ) -> Self {
        assert_eq!(m.len(), decay.len());
        assert_eq!(v.len(), decay.len());
        AdamW {
            config,
            m,
            v,
            step,
            decay,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut delta = mhat / (vhat.sqrt() + c.eps);
            if self.decay[i] {
                delta += c.weight_decay * params[i];
            }
            params[i] -= c.lr * delta;
        }
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` by `min(1, clip / ‖g‖)`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > 0.0 {
        let s = (clip / norm).min(1.0);
        if s < 1.0 {
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_applies_only_decay() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, vec![true, false]);
        let mut p = vec![2.0, 3.0];
        opt.update(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![2.0 - 0.1 * 0.01 * 2.0, 3.0]);
    }

    #[test]
    fn clipping_to_zero_and_norm_bound() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 0.0), 5.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let mut g = vec![3.0, 4.0];
        clip_global_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            vec![false],
        );
        let mut p = vec![1.0];
        opt.update(&mut p, &[0.5]);
        assert!((p[0] - (1.0 - 1e-4)).abs() < 1e-10);
    }
}

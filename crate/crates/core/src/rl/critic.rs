//! Twin Q heads over detached context embeddings, with Polyak-averaged
//! target copies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::armodel::ops::{gelu, gelu_grad, linear, linear_backward};
use crate::armodel::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::armodel::params::ParamStore;
use crate::error::{DapError, Result};
use crate::seeding::sub_seed;

/// Shape of a two-layer Q head: `d → hidden → actions`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QHeadShape {
    pub input: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl QHeadShape {
    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.actions + self.actions
    }
}

/// `Q(x) = GELU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct QHead {
    pub shape: QHeadShape,
    pub params: ParamStore,
}

/// Activations of a batched [`QHead::forward`].
#[derive(Clone, Debug)]
pub struct QCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    /// `rows × actions`.
    pub q: Vec<f64>,
}

impl QCache {
    pub fn row(&self, i: usize, k: usize) -> &[f64] {
        &self.q[i * k..(i + 1) * k]
    }
}

impl QHead {
    fn layout(shape: QHeadShape) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w1", &[shape.input, shape.hidden]);
        p.add("b1", &[shape.hidden]);
        p.add("w2", &[shape.hidden, shape.actions]);
        p.add("b2", &[shape.actions]);
        p
    }

    /// Hidden weights `N(0, 1/input)`, output weights `N(0, out_std²)`, zero biases.
    pub fn init(shape: QHeadShape, seed: u64, out_std: f64) -> Result<QHead> {
        if shape.input == 0 || shape.hidden == 0 || shape.actions == 0 {
            return Err(DapError::Config(
                "Q head dimensions must be positive".into(),
            ));
        }
        let mut params = Self::layout(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.fill_normal(
            0,
            shape.input * shape.hidden,
            (1.0 / shape.input as f64).sqrt(),
            &mut rng,
        );
        let w2 = shape.input * shape.hidden + shape.hidden;
        params.fill_normal(w2, shape.hidden * shape.actions, out_std, &mut rng);
        Ok(QHead { shape, params })
    }

    pub fn from_params(shape: QHeadShape, data: Vec<f64>) -> Result<QHead> {
        let mut params = Self::layout(shape);
        if data.len() != params.len() {
            return Err(DapError::Size(format!(
                "Q head expects {} parameters, got {}",
                params.len(),
                data.len()
            )));
        }
        params.data = data;
        Ok(QHead { shape, params })
    }

    fn parts(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let s = self.shape;
        let (w1, rest) = self.params.data.split_at(s.input * s.hidden);
        let (b1, rest) = rest.split_at(s.hidden);
        let (w2, b2) = rest.split_at(s.hidden * s.actions);
        (w1, b1, w2, b2)
    }

    /// Row-wise forward over `x: rows × input`.
    pub fn forward(&self, x: &[f64]) -> QCache {
        let s = self.shape;
        let rows = x.len() / s.input;
        let (w1, b1, w2, b2) = self.parts();
        let mut pre = vec![0.0; rows * s.hidden];
        linear(x, w1, Some(b1), s.input, s.hidden, &mut pre);
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let mut q = vec![0.0; rows * s.actions];
        linear(&act, w2, Some(b2), s.hidden, s.actions, &mut q);
        QCache {
            x: x.to_vec(),
            pre,
            act,
            q,
        }
    }

    /// Values for one embedding.
    pub fn values(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).q
    }

    /// Accumulates parameter gradients of `Σ dq·q`, and input gradients into `dx` when given.
    pub fn backward(&self, cache: &QCache, dq: &[f64], grads: &mut [f64], dx: Option<&mut [f64]>) {
        let s = self.shape;
        let (w1, _, w2, _) = self.parts();
        let n1 = s.input * s.hidden;
        let (g1, rest) = grads.split_at_mut(n1);
        let (gb1, rest) = rest.split_at_mut(s.hidden);
        let (g2, gb2) = rest.split_at_mut(s.hidden * s.actions);
        let mut dact = vec![0.0; cache.act.len()];
        linear_backward(
            &cache.act,
            w2,
            dq,
            s.hidden,
            s.actions,
            Some(&mut dact),
            g2,
            Some(gb2),
        );
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(g, &u)| g * gelu_grad(u))
            .collect();
        linear_backward(&cache.x, w1, &dpre, s.input, s.hidden, dx, g1, Some(gb1));
    }
}

/// Two trainable heads, their targets, and one optimizer per head.
#[derive(Clone, Debug, PartialEq)]
pub struct Critics {
    pub q: [QHead; 2],
    pub target: [QHead; 2],
    pub opt: [AdamW; 2],
}

impl Critics {
    /// Independent heads seeded from `seed`; targets start as exact copies.
    pub fn init(shape: QHeadShape, seed: u64, out_std: f64, opt: AdamWConfig) -> Result<Critics> {
        let q1 = QHead::init(shape, sub_seed(seed, "critic.q1"), out_std)?;
        let q2 = QHead::init(shape, sub_seed(seed, "critic.q2"), out_std)?;
        let mask = q1.params.decay_mask();
        Ok(Critics {
            target: [q1.clone(), q2.clone()],
            opt: [AdamW::new(opt, mask.clone()), AdamW::new(opt, mask)],
            q: [q1, q2],
        })
    }

    pub fn shape(&self) -> QHeadShape {
        self.q[0].shape
    }

    /// Clipped AdamW step on each trainable head; returns the pre-clip norms.
    pub fn apply(&mut self, mut grads: [Vec<f64>; 2], clip: f64) -> [f64; 2] {
        let mut norms = [0.0; 2];
        for i in 0..2 {
            norms[i] = if clip > 0.0 {
                clip_global_norm(&mut grads[i], clip)
            } else {
                crate::armodel::optim::global_norm(&grads[i])
            };
            self.opt[i].update(&mut self.q[i].params.data, &grads[i]);
        }
        norms
    }

    /// `Q̄ ← (1 − τ) Q̄ + τ Q`, exactly `Q` when `τ = 1`.
    pub fn polyak(&mut self, tau: f64) {
        for i in 0..2 {
            let src = &self.q[i].params.data;
            let dst = &mut self.target[i].params.data;
            if tau == 1.0 {
                dst.copy_from_slice(src);
            } else {
                for (t, s) in dst.iter_mut().zip(src) {
                    *t = (1.0 - tau) * *t + tau * s;
                }
            }
        }
    }

    /// Root-mean-square distance between target and trainable parameters.
    pub fn target_drift(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..2 {
            for (t, s) in self.target[i]
                .params
                .data
                .iter()
                .zip(&self.q[i].params.data)
            {
                acc += (t - s) * (t - s);
            }
            n += self.q[i].params.len();
        }
        (acc / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::gradcheck::rel_error;
    use crate::rl::objectives::critic_loss;

    fn shape() -> QHeadShape {
        QHeadShape {
            input: 5,
            hidden: 7,
            actions: 4,
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let h = QHead::init(shape(), 3, 0.1).unwrap();
        assert_eq!(h.params.len(), shape().param_count());
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let c = h.forward(&x);
        assert_eq!(c.q.len(), 8);
        assert_eq!(h.values(&x[5..]), c.row(1, 4));
        assert_eq!(QHead::init(shape(), 3, 0.1).unwrap(), h);
        assert!(QHead::init(
            QHeadShape {
                hidden: 0,
                ..shape()
            },
            1,
            0.1
        )
        .is_err());
        assert!(QHead::from_params(shape(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let h1 = QHead::init(shape(), 1, 0.5).unwrap();
        let h2 = QHead::init(shape(), 2, 0.5).unwrap();
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.61).cos()).collect();
        let actions = [1usize, 3, 0];
        let ys = [0.3, -0.2, 0.8];
        let loss = |a: &QHead, b: &QHead| -> (f64, [Vec<f64>; 2]) {
            let (ca, cb) = (a.forward(&x), b.forward(&x));
            let mut dq = [vec![0.0; ca.q.len()], vec![0.0; cb.q.len()]];
            let mut total = 0.0;
            for r in 0..3 {
                let t = critic_loss([ca.row(r, 4), cb.row(r, 4)], actions[r], ys[r], 0.5);
                total += t.loss / 3.0;
                for i in 0..2 {
                    for k in 0..4 {
                        dq[i][r * 4 + k] = t.grads[i][k] / 3.0;
                    }
                }
            }
            let mut g1 = vec![0.0; a.params.len()];
            let mut g2 = vec![0.0; b.params.len()];
            a.backward(&ca, &dq[0], &mut g1, None);
            b.backward(&cb, &dq[1], &mut g2, None);
            (total, [g1, g2])
        };
        let (_, grads) = loss(&h1, &h2);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for j in 0..h1.params.len() {
            let mut up = h1.clone();
            up.params.data[j] += eps;
            let mut down = h1.clone();
            down.params.data[j] -= eps;
            let num = (loss(&up, &h2).0 - loss(&down, &h2).0) / (2.0 * eps);
            worst = worst.max(rel_error(grads[0][j], num));
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let h = QHead::init(shape(), 9, 0.5).unwrap();
        let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
        let dq = [0.2, -1.0, 0.5, 0.7];
        let f = |x: &[f64]| h.values(x).iter().zip(&dq).map(|(a, b)| a * b).sum::<f64>();
        let mut g = vec![0.0; h.params.len()];
        let mut dx = vec![0.0; 5];
        h.backward(&h.forward(&x), &dq, &mut g, Some(&mut dx));
        for j in 0..5 {
            let mut up = x.clone();
            up[j] += 1e-6;
            let mut down = x.clone();
            down[j] -= 1e-6;
            let num = (f(&up) - f(&down)) / 2e-6;
            assert!(rel_error(dx[j], num) <= 1e-6, "{} vs {num}", dx[j]);
        }
    }

    #[test]
    fn polyak_is_the_stated_convex_combination() {
        let mut c = Critics::init(shape(), 4, 0.3, AdamWConfig::default()).unwrap();
        assert_eq!(c.target_drift(), 0.0);
        let g = [
            vec![0.5; shape().param_count()],
            vec![-0.5; shape().param_count()],
        ];
        c.apply(g, 0.0);
        let before = c.target.clone();
        c.polyak(0.25);
        for i in 0..2 {
            for j in 0..c.q[i].params.len() {
                let want = 0.75 * before[i].params.data[j] + 0.25 * c.q[i].params.data[j];
                assert_eq!(c.target[i].params.data[j], want);
            }
        }
        c.polyak(1.0);
        assert_eq!(c.target, c.q);
        assert_eq!(c.target_drift(), 0.0);
    }
}

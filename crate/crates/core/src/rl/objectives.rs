//! Per-transition SAC-BC objectives over a discrete action set, with their
//! gradients in the critic outputs or the policy logits.
//!
//! Policies are passed as logits; `π = softmax(logits)`.

use crate::armodel::ops::{log_sum_exp, softmax_in_place};
use crate::error::{DapError, Result};

/// Tolerance on `|Σπ − 1|` accepted by [`sac_target`].
pub const POLICY_SUM_TOL: f64 = 1e-6;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// `log π` computed stably.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

/// Elementwise minimum of two action-value vectors.
pub fn q_min(q1: &[f64], q2: &[f64]) -> Vec<f64> {
    q1.iter().zip(q2).map(|(a, b)| a.min(*b)).collect()
}

/// Soft Bellman target with the exact expectation over actions.
///
/// Zero-probability actions contribute nothing to the entropy term.
pub fn sac_target(
    r: f64,
    gamma: f64,
    alpha: f64,
    policy: &[f64],
    qbar1: &[f64],
    qbar2: &[f64],
    done: bool,
) -> Result<f64> {
    if policy.len() != qbar1.len() || policy.len() != qbar2.len() || policy.is_empty() {
        return Err(DapError::Size(format!(
            "policy has {} actions, target critics {} and {}",
            policy.len(),
            qbar1.len(),
            qbar2.len()
        )));
    }
    let total: f64 = policy.iter().sum();
    if (total - 1.0).abs() > POLICY_SUM_TOL || policy.iter().any(|p| *p < 0.0) {
        return Err(DapError::Internal(format!(
            "policy is not normalized (sum {total})"
        )));
    }
    if done {
        return Ok(r);
    }
    let mut v = 0.0;
    for ((&p, &a), &b) in policy.iter().zip(qbar1).zip(qbar2) {
        if p > 0.0 {
            v += p * (a.min(b) - alpha * p.ln());
        }
    }
    Ok(r + gamma * v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticTerm {
    pub loss: f64,
    /// Squared-error part `½Σ_i (Q_i(A) − y)²`.
    pub td: f64,
    /// Conservative part `Σ_i [lse Q_i − Q_i(A)]`, always ≥ 0.
    pub cql: f64,
    /// `∂loss/∂Q_i` per critic.
    pub grads: [Vec<f64>; 2],
}

/// Twin-critic regression with the CQL penalty for one transition.
pub fn critic_loss(q: [&[f64]; 2], action: usize, y: f64, alpha_cql: f64) -> CriticTerm {
    let mut out = CriticTerm {
        loss: 0.0,
        td: 0.0,
        cql: 0.0,
        grads: [vec![0.0; q[0].len()], vec![0.0; q[1].len()]],
    };
    for (i, qi) in q.iter().enumerate() {
        let err = qi[action] - y;
        out.td += 0.5 * err * err;
        out.cql += log_sum_exp(qi) - qi[action];
        let g = &mut out.grads[i];
        if alpha_cql != 0.0 {
            for (gk, pk) in g.iter_mut().zip(softmax(qi)) {
                *gk = alpha_cql * pk;
            }
            g[action] -= alpha_cql;
        }
        g[action] += err;
    }
    out.loss = out.td + alpha_cql * out.cql;
    out
}

/// `α Σ π ln π − Σ π q` and its gradient in the policy logits.
pub fn actor_loss(logits: &[f64], q: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let lp = log_softmax(logits);
    let g: Vec<f64> = lp.iter().zip(q).map(|(l, qa)| alpha * l - qa).collect();
    let loss: f64 = p.iter().zip(&g).map(|(pa, ga)| pa * ga).sum();
    // ∂/∂z_a of Σ_b π_b g_b with g_b = α ln π_b − q_b; the α·Σπ_b ∂ln π_b term vanishes.
    let grad = p.iter().zip(&g).map(|(pa, ga)| pa * (ga - loss)).collect();
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcTerm {
    pub loss: f64,
    pub adv: f64,
    pub weight: f64,
    pub nll: f64,
    /// `∂loss/∂logits`, with the weight held constant.
    pub grad: Vec<f64>,
}

/// AWAC weight `min(exp(adv/λ), clip)`.
pub fn awac_weight(adv: f64, lambda_awac: f64, clip: f64) -> f64 {
    (adv / lambda_awac).exp().min(clip)
}

/// Advantage-weighted negative log-likelihood of the expert action.
pub fn bc_loss(logits: &[f64], q: &[f64], expert: usize, lambda_awac: f64, clip: f64) -> BcTerm {
    let p = softmax(logits);
    let baseline: f64 = p.iter().zip(q).map(|(pa, qa)| pa * qa).sum();
    let adv = q[expert] - baseline;
    let weight = awac_weight(adv, lambda_awac, clip);
    let nll = -log_softmax(logits)[expert];
    let mut grad: Vec<f64> = p.iter().map(|pa| weight * pa).collect();
    grad[expert] -= weight;
    BcTerm {
        loss: weight * nll,
        adv,
        weight,
        nll,
        grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let o = x[i];
                x[i] = o + eps;
                let up = f(&x);
                x[i] = o - eps;
                let down = f(&x);
                x[i] = o;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn target_examples() {
        let y = sac_target(0.5, 0.9, 0.0, &[1.0], &[2.0], &[3.0], false).unwrap();
        assert!((y - (0.5 + 0.9 * 2.0)).abs() < 1e-15);
        let y = sac_target(0.7, 0.9, 0.3, &[0.25; 4], &[9.0; 4], &[9.0; 4], true).unwrap();
        assert_eq!(y, 0.7);
        let y = sac_target(0.1, 0.95, 1.0, &[0.25; 4], &[2.0; 4], &[2.0; 4], false).unwrap();
        assert!((y - (0.1 + 0.95 * (2.0 + 4f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn target_rejects_unnormalized_policy() {
        let r = sac_target(
            0.0,
            0.9,
            0.1,
            &[0.5, 0.5 + 2e-6],
            &[0.0; 2],
            &[0.0; 2],
            false,
        );
        assert!(matches!(r, Err(DapError::Internal(_))));
        assert!(sac_target(
            0.0,
            0.9,
            0.1,
            &[0.5, 0.5 + 5e-7],
            &[0.0; 2],
            &[0.0; 2],
            false
        )
        .is_ok());
        assert!(matches!(
            sac_target(0.0, 0.9, 0.1, &[1.0], &[0.0; 2], &[0.0; 2], false),
            Err(DapError::Size(_))
        ));
    }

    #[test]
    fn target_is_bit_reproducible() {
        let p = softmax(&[0.3, -1.0, 2.0, 0.0]);
        let a = sac_target(
            0.2,
            0.95,
            0.05,
            &p,
            &[1.0, 2.0, 3.0, 4.0],
            &[4.0, 3.0, 2.0, 1.0],
            false,
        )
        .unwrap();
        let b = sac_target(
            0.2,
            0.95,
            0.05,
            &p,
            &[1.0, 2.0, 3.0, 4.0],
            &[4.0, 3.0, 2.0, 1.0],
            false,
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn critic_examples() {
        let q = [0.3, 1.2, -0.4];
        let t = critic_loss([&q, &q], 1, 1.2, 0.0);
        assert_eq!(t.loss, 0.0);
        let k = 1144;
        let flat = vec![0.7; k];
        let t = critic_loss([&flat, &flat], 5, 0.7, 1.0);
        assert!((t.cql - 2.0 * (k as f64).ln()).abs() < 1e-9);
        assert!((t.loss - 2.0 * (k as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let q1 = [0.3, -0.2, 1.1, 0.5];
        let q2 = [0.1, 0.9, -0.7, 0.2];
        let t = critic_loss([&q1, &q2], 2, 0.4, 0.5);
        let n1 = numeric_grad(|x| critic_loss([x, &q2], 2, 0.4, 0.5).loss, &q1, 1e-6);
        let n2 = numeric_grad(|x| critic_loss([&q1, x], 2, 0.4, 0.5).loss, &q2, 1e-6);
        for (a, n) in t.grads[0]
            .iter()
            .chain(&t.grads[1])
            .zip(n1.iter().chain(&n2))
        {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn actor_is_stationary_at_boltzmann_policy() {
        let q = [0.4, -1.3, 2.2, 0.9, 0.0];
        let alpha = 0.7;
        let logits: Vec<f64> = q.iter().map(|x| x / alpha).collect();
        let num = numeric_grad(|z| actor_loss(z, &q, alpha).0, &logits, 1e-5);
        assert!(num.iter().all(|g| g.abs() <= 1e-5), "{num:?}");
        let (_, analytic) = actor_loss(&logits, &q, alpha);
        assert!(analytic.iter().all(|g| g.abs() <= 1e-12));
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let q = [0.4, -1.3, 2.2, 0.9];
        let z = [0.1, 0.5, -0.3, 1.0];
        let (_, g) = actor_loss(&z, &q, 0.2);
        let n = numeric_grad(|x| actor_loss(x, &q, 0.2).0, &z, 1e-6);
        for (a, b) in g.iter().zip(&n) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn actor_greedy_and_uniform_limits() {
        let q = [0.1, 0.9, 0.3];
        // With α = 0 the loss is −E_π[q], minimized by the one-hot argmax policy.
        let one_hot = [-60.0, 60.0, -60.0];
        let (best, _) = actor_loss(&one_hot, &q, 0.0);
        assert!((best + 0.9).abs() < 1e-12);
        for z in [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [3.0, 1.0, 0.0]] {
            assert!(actor_loss(&z, &q, 0.0).0 >= best);
        }
        let flat = [0.5; 3];
        let (u, g) = actor_loss(&[0.0; 3], &flat, 0.3);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        assert!(actor_loss(&[0.3, 0.0, -0.2], &flat, 0.3).0 > u);
    }

    #[test]
    fn bc_examples() {
        let z = [0.2, -0.5, 1.0];
        // Constant Q gives zero advantage.
        let t = bc_loss(&z, &[1.5; 3], 1, 1.0, 20.0);
        assert_eq!(t.adv, 0.0);
        assert_eq!(t.weight, 1.0);
        assert!((t.loss + log_softmax(&z)[1]).abs() < 1e-15);
        let t = bc_loss(&z, &[0.0, 5.0, -3.0], 1, 1e12, 20.0);
        assert!((t.weight - 1.0).abs() < 1e-10);
        let t = bc_loss(&[-80.0, 80.0, -80.0], &[0.0, 5.0, -3.0], 1, 1.0, 20.0);
        assert!(t.loss.abs() < 1e-12);
        let t = bc_loss(&z, &[0.0, 50.0, 0.0], 1, 1.0, 20.0);
        assert_eq!(t.weight, 20.0);
    }

    #[test]
    fn bc_gradient_holds_weight_constant() {
        let z = [0.2, -0.5, 1.0, 0.3];
        let q = [0.5, 1.0, -0.2, 0.0];
        let t = bc_loss(&z, &q, 1, 0.8, 20.0);
        let n = numeric_grad(|x| t.weight * -log_softmax(x)[1], &z, 1e-6);
        for (a, b) in t.grad.iter().zip(&n) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn cql_is_non_negative(q1 in prop::collection::vec(-50.0..50.0f64, 1..12), shift in -5.0..5.0f64, a in 0usize..12) {
            let q2: Vec<f64> = q1.iter().map(|x| x + shift).collect();
            let a = a % q1.len();
            prop_assert!(critic_loss([&q1, &q2], a, 0.0, 1.0).cql >= 0.0);
        }

        #[test]
        fn awac_weight_is_positive_and_clipped(adv in -200.0..200.0f64, lam in 0.01..10.0f64, clip in 1.0..50.0f64) {
            let w = awac_weight(adv, lam, clip);
            prop_assert!(w >= 0.0 && w <= clip);
            prop_assert!(w > 0.0 || adv / lam < -700.0);
        }
    }
}

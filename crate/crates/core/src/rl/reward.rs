//! Bounded geometry rewards and the low-speed-masked comfort penalty.

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_ctr: f64,
    pub w_clr: f64,
    pub w_comf: f64,
    /// Meters.
    pub sigma_ctr: f64,
    /// Meters.
    pub sigma_clr: f64,
    pub lambda_da: f64,
    pub lambda_alpha: f64,
    /// Speed (m/s) at or below which comfort is not penalized.
    pub eps_spd: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_ctr: 1.0,
            w_clr: 1.0,
            w_comf: 1.0,
            sigma_ctr: 1.5,
            sigma_clr: 3.0,
            lambda_da: 0.1,
            lambda_alpha: 0.1,
            eps_spd: 0.3,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_ctr,
            self.w_clr,
            self.w_comf,
            self.sigma_ctr,
            self.sigma_clr,
            self.lambda_da,
            self.lambda_alpha,
            self.eps_spd,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DapError::Config("reward weights must be finite".into()));
        }
        if !(self.sigma_ctr > 0.0 && self.sigma_clr > 0.0) {
            return Err(DapError::Config(
                "reward scales sigma_ctr and sigma_clr must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub ctr: f64,
    pub clr: f64,
    pub comf: f64,
}

fn check_distance(d: f64, what: &str) -> Result<()> {
    if d >= 0.0 {
        Ok(())
    } else {
        Err(DapError::Domain(format!(
            "{what} distance {d} must be non-negative"
        )))
    }
}

/// `max(1 − d/σ, 0)`.
pub fn reward_centerline(d_ctr: f64, sigma_ctr: f64) -> Result<f64> {
    check_distance(d_ctr, "centerline")?;
    Ok((1.0 - d_ctr / sigma_ctr).max(0.0))
}

/// `d/σ`, unbounded above.
pub fn reward_clearance(d_clr: f64, sigma_clr: f64) -> Result<f64> {
    check_distance(d_clr, "clearance")?;
    Ok((d_clr / sigma_clr).max(0.0))
}

/// `−(λ_Δa|Δa| + λ_α|α|)` when `|v| > ε_spd`, else 0.
pub fn reward_comfort(delta_a: f64, alpha: f64, v: f64, w: &RewardWeights) -> f64 {
    if v.abs() > w.eps_spd {
        -(w.lambda_da * delta_a.abs() + w.lambda_alpha * alpha.abs())
    } else {
        0.0
    }
}

pub fn reward_total(c: &RewardComponents, w: &RewardWeights) -> f64 {
    w.w_ctr * c.ctr + w.w_clr * c.clr + w.w_comf * c.comf
}

/// All three components from raw geometry and kinematics.
pub fn reward_components(
    d_ctr: f64,
    d_clr: f64,
    delta_a: f64,
    alpha: f64,
    v: f64,
    w: &RewardWeights,
) -> Result<RewardComponents> {
    Ok(RewardComponents {
        ctr: reward_centerline(d_ctr, w.sigma_ctr)?,
        clr: reward_clearance(d_clr, w.sigma_clr)?,
        comf: reward_comfort(delta_a, alpha, v, w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centerline_examples() {
        assert_eq!(reward_centerline(0.0, 1.5).unwrap(), 1.0);
        assert_eq!(reward_centerline(1.5, 1.5).unwrap(), 0.0);
        assert_eq!(reward_centerline(3.0, 1.5).unwrap(), 0.0);
        assert!(matches!(
            reward_centerline(-0.1, 1.5),
            Err(DapError::Domain(_))
        ));
    }

    #[test]
    fn clearance_examples() {
        assert_eq!(reward_clearance(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(reward_clearance(3.0, 3.0).unwrap(), 1.0);
        assert_eq!(reward_clearance(9.0, 3.0).unwrap(), 3.0);
        assert!(matches!(
            reward_clearance(-1.0, 3.0),
            Err(DapError::Domain(_))
        ));
    }

    #[test]
    fn comfort_examples() {
        let w = RewardWeights {
            lambda_da: 1.0,
            lambda_alpha: 2.0,
            eps_spd: 0.1,
            ..Default::default()
        };
        assert_eq!(reward_comfort(0.5, 0.25, 5.0, &w), -1.0);
        assert_eq!(reward_comfort(3.0, 3.0, 0.1, &w), 0.0);
        assert_eq!(reward_comfort(3.0, 3.0, -0.05, &w), 0.0);
        assert_eq!(reward_comfort(0.0, 0.0, 5.0, &w), 0.0);
    }

    #[test]
    fn total_examples() {
        let c = RewardComponents {
            ctr: 1.0,
            clr: 1.0,
            comf: 0.0,
        };
        assert_eq!(reward_total(&c, &RewardWeights::default()), 2.0);
        let zero = RewardWeights {
            w_ctr: 0.0,
            w_clr: 0.0,
            w_comf: 0.0,
            ..Default::default()
        };
        assert_eq!(
            reward_total(
                &RewardComponents {
                    ctr: 0.3,
                    clr: 7.0,
                    comf: -2.0
                },
                &zero
            ),
            0.0
        );
    }

    #[test]
    fn total_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let w = RewardWeights {
                w_ctr: rng.gen_range(0.0..2.0),
                w_clr: rng.gen_range(0.0..2.0),
                w_comf: rng.gen_range(0.0..2.0),
                sigma_ctr: rng.gen_range(0.5..3.0),
                sigma_clr: rng.gen_range(0.5..5.0),
                lambda_da: rng.gen_range(0.0..1.0),
                lambda_alpha: rng.gen_range(0.0..1.0),
                eps_spd: rng.gen_range(0.0..1.0),
            };
            let (dc, dl, da, al, v) = (
                rng.gen_range(0.0..4.0),
                rng.gen_range(0.0..20.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..10.0f64),
            );
            let got = reward_total(&reward_components(dc, dl, da, al, v, &w).unwrap(), &w);
            // Cell-by-cell recomputation.
            let ctr = if dc < w.sigma_ctr {
                1.0 - dc / w.sigma_ctr
            } else {
                0.0
            };
            let clr = dl / w.sigma_clr;
            let mask = if v.abs() > w.eps_spd { 1.0 } else { 0.0 };
            let comf = -mask * (w.lambda_da * da.abs() + w.lambda_alpha * al.abs());
            let want = w.w_ctr * ctr + w.w_clr * clr + w.w_comf * comf;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_rejects_bad_scales() {
        let w = RewardWeights {
            sigma_ctr: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let w = RewardWeights {
            w_clr: f64::NAN,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        assert!(RewardWeights::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn ranges_and_monotonicity(d in 0.0..10.0f64, e in 0.0..1.0f64, da in -3.0..3.0f64, al in -3.0..3.0f64, v in -5.0..15.0f64) {
            let w = RewardWeights::default();
            let c0 = reward_centerline(d, w.sigma_ctr).unwrap();
            let c1 = reward_centerline(d + e, w.sigma_ctr).unwrap();
            prop_assert!((0.0..=1.0).contains(&c0) && c1 <= c0);
            let l0 = reward_clearance(d, w.sigma_clr).unwrap();
            prop_assert!(l0 >= 0.0 && reward_clearance(d + e, w.sigma_clr).unwrap() >= l0);
            let f0 = reward_comfort(da, al, v, &w);
            prop_assert!(f0 <= 0.0);
            prop_assert!(reward_comfort(da.abs() + e, al, v, &w) <= reward_comfort(da, al, v, &w));
        }
    }
}

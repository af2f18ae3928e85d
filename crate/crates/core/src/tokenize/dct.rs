//! Orthonormal DCT-II / DCT-III pair and coefficient quantization.

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};

/// Precomputed orthonormal DCT basis for one sequence length.
#[derive(Clone, Debug)]
pub struct DctPlan {
    n: usize,
    // basis[k * n + i] = s_k cos(π (i + ½) k / n)
    basis: Vec<f64>,
}

impl DctPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(DapError::Size("DCT length must be at least 1".into()));
        }
        let nf = n as f64;
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let s = if k == 0 {
                (1.0 / nf).sqrt()
            } else {
                (2.0 / nf).sqrt()
            };
            for i in 0..n {
                basis[k * n + i] =
                    s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / nf).cos();
            }
        }
        Ok(DctPlan { n, basis })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "DCT input length");
        (0..self.n)
            .map(|k| {
                let row = &self.basis[k * self.n..(k + 1) * self.n];
                row.iter().zip(x).map(|(b, v)| b * v).sum()
            })
            .collect()
    }

    pub fn inverse(&self, c: &[f64]) -> Vec<f64> {
        assert_eq!(c.len(), self.n, "DCT coefficient length");
        let mut out = vec![0.0; self.n];
        for (k, ck) in c.iter().enumerate() {
            let row = &self.basis[k * self.n..(k + 1) * self.n];
            for (o, b) in out.iter_mut().zip(row) {
                *o += ck * b;
            }
        }
        out
    }
}

pub fn dct_forward(seq: &[f64]) -> Result<Vec<f64>> {
    Ok(DctPlan::new(seq.len())?.forward(seq))
}

pub fn dct_inverse(coeffs: &[f64]) -> Result<Vec<f64>> {
    Ok(DctPlan::new(coeffs.len())?.inverse(coeffs))
}

/// Quantization step and even level count for one DCT channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DctChannel {
    pub q: f64,
    pub levels: u32,
}

impl DctChannel {
    pub fn new(q: f64, levels: u32) -> Result<Self> {
        if !(q > 0.0) || levels == 0 || !levels.is_multiple_of(2) {
            return Err(DapError::Config(format!(
                "DCT channel needs q > 0 and even L, got q={q}, L={levels}"
            )));
        }
        Ok(DctChannel { q, levels })
    }

    pub fn quantize(&self, c: f64) -> i32 {
        dct_quantize(c, self.q, self.levels)
    }

    pub fn dequantize(&self, idx: i32) -> f64 {
        dct_dequantize(idx, self.q)
    }
}

/// `clamp(round(c / q), −L/2, L/2 − 1)`.
pub fn dct_quantize(c: f64, q: f64, levels: u32) -> i32 {
    let half = (levels / 2) as i32;
    let r = (c / q).round();
    if r.is_nan() {
        return 0;
    }
    r.clamp(-half as f64, (half - 1) as f64) as i32
}

pub fn dct_dequantize(idx: i32, q: f64) -> f64 {
    idx as f64 * q
}

/// Which trajectory representation a DCT codec transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DctSpace {
    /// x, y, yaw in the start frame.
    Xy,
    /// κ, a sequences.
    Ka,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DctConfig {
    pub space: DctSpace,
    pub channels: Vec<DctChannel>,
}

impl DctConfig {
    /// Per-token vocabulary: product of channel level counts.
    pub fn codebook_size(&self) -> usize {
        self.channels.iter().map(|c| c.levels as usize).product()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.space {
            DctSpace::Xy => 3,
            DctSpace::Ka => 2,
        };
        if self.channels.len() != expected {
            return Err(DapError::Config(format!(
                "{:?} DCT needs {expected} channels, got {}",
                self.space,
                self.channels.len()
            )));
        }
        for c in &self.channels {
            DctChannel::new(c.q, c.levels)?;
        }
        Ok(())
    }

    fn ch(q: f64, l: u32) -> DctChannel {
        DctChannel::new(q, l).expect("preset channel")
    }

    pub fn dct_xy_a() -> Self {
        DctConfig {
            space: DctSpace::Xy,
            channels: vec![Self::ch(2.0, 80), Self::ch(2.0, 80), Self::ch(0.01, 40)],
        }
    }
    pub fn dct_xy_b() -> Self {
        DctConfig {
            space: DctSpace::Xy,
            channels: vec![Self::ch(2.0, 120), Self::ch(2.0, 120), Self::ch(0.01, 50)],
        }
    }
    pub fn dct_ka_c() -> Self {
        DctConfig {
            space: DctSpace::Ka,
            channels: vec![Self::ch(0.01, 80), Self::ch(0.10, 80)],
        }
    }
    pub fn dct_ka_d() -> Self {
        DctConfig {
            space: DctSpace::Ka,
            channels: vec![Self::ch(0.008, 160), Self::ch(0.08, 160)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Direct summation through the complex-exponential form
    /// `X_k = s_k · Re(e^{−iπk/2N} Σ_n x_n e^{−iπkn/N})`.
    fn oracle_forward(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let kf = k as f64;
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let th = -PI * kf * i as f64 / n;
                    re += v * th.cos();
                    im += v * th.sin();
                }
                let ph = -PI * kf / (2.0 * n);
                let s = if k == 0 {
                    (1.0 / n).sqrt()
                } else {
                    (2.0 / n).sqrt()
                };
                s * (re * ph.cos() - im * ph.sin())
            })
            .collect()
    }

    #[test]
    fn constant_sequence_has_only_dc() {
        let c = dct_forward(&[3.0; 7]).unwrap();
        assert!((c[0] - 3.0 * 7f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_round_trip() {
        let x = [1.0, 0.0, 0.0, 0.0];
        let back = dct_inverse(&dct_forward(&x).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(dct_forward(&[]).is_err());
    }

    #[test]
    fn matches_direct_summation_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [1usize, 2, 5, 20, 33] {
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = dct_forward(&x).unwrap();
            for (a, b) in c.iter().zip(oracle_forward(&x)) {
                assert!((a - b).abs() < 1e-10, "len {len}: {a} vs {b}");
            }
            let back = dct_inverse(&c).unwrap();
            for (a, b) in back.iter().zip(&x) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quantizer_range_and_error() {
        assert_eq!(dct_quantize(0.0, 2.0, 80), 0);
        assert_eq!(dct_quantize(1e6, 2.0, 80), 39);
        assert_eq!(dct_quantize(-1e6, 2.0, 80), -40);
        assert_eq!(dct_dequantize(39, 2.0), 78.0);
        assert_eq!(dct_dequantize(-40, 2.0), -80.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let c: f64 = rng.gen_range(-80.0..78.0);
            let e = (dct_dequantize(dct_quantize(c, 2.0, 80), 2.0) - c).abs();
            assert!(e <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn preset_vocabularies() {
        assert_eq!(DctConfig::dct_xy_a().codebook_size(), 256_000);
        assert_eq!(DctConfig::dct_xy_b().codebook_size(), 720_000);
        assert_eq!(DctConfig::dct_ka_c().codebook_size(), 6400);
        assert_eq!(DctConfig::dct_ka_d().codebook_size(), 25600);
        assert!(DctChannel::new(1.0, 7).is_err());
        let mut bad = DctConfig::dct_ka_c();
        bad.channels.pop();
        assert!(bad.validate().is_err());
    }
}

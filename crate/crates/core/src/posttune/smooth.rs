//! Finite-difference regularized least squares on 1D sequences.
//!
//! `D1` is the `(n−1)×n` forward difference and `D2` the `(n−2)×n` second
//! difference, both without boundary padding; `I + w1 D1ᵀD1 + w2 D2ᵀD2` is
//! symmetric positive definite and pentadiagonal.

use crate::error::{DapError, Result};

/// Symmetric band matrix storing `diag[k][i] = A[i][i+k]` for `k ≤ bw`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymBand {
    pub n: usize,
    pub diag: Vec<Vec<f64>>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        SymBand {
            n,
            diag: (0..=bw).map(|k| vec![0.0; n.saturating_sub(k)]).collect(),
        }
    }

    pub fn bandwidth(&self) -> usize {
        self.diag.len() - 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let k = j - i;
        if k > self.bandwidth() {
            0.0
        } else {
            self.diag[k][i]
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.diag[j - i][i] += v;
    }

    /// Adds `w·rᵀr` for a row `r` with nonzeros `coeffs` starting at column `start`.
    fn add_outer(&mut self, start: usize, coeffs: &[f64], w: f64) {
        for (a, ca) in coeffs.iter().enumerate() {
            for (b, cb) in coeffs.iter().enumerate().skip(a) {
                self.add(start + a, start + b, w * ca * cb);
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (k, d) in self.diag.iter().enumerate() {
            for (i, &v) in d.iter().enumerate() {
                y[i] += v * x[i + k];
                if k > 0 {
                    y[i + k] += v * x[i];
                }
            }
        }
        y
    }

    /// Banded Cholesky `A = LLᵀ`; `L` is returned with the same band layout
    /// (`diag[k][i] = L[i+k][i]`).
    pub fn cholesky(&self) -> Result<SymBand> {
        let (n, bw) = (self.n, self.bandwidth());
        let mut l = SymBand::zeros(n, bw);
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in j.saturating_sub(bw)..j {
                let v = l.diag[j - k][k];
                d -= v * v;
            }
            if !(d > 0.0) {
                return Err(DapError::Internal(format!(
                    "matrix is not positive definite at row {j}"
                )));
            }
            let d = d.sqrt();
            l.diag[0][j] = d;
            for i in j + 1..(j + bw + 1).min(n) {
                let mut v = self.get(i, j);
                for k in i.saturating_sub(bw)..j {
                    v -= l.diag[i - k][k] * l.diag[j - k][k];
                }
                l.diag[i - j][j] = v / d;
            }
        }
        Ok(l)
    }
}

/// Solves `LLᵀx = b` for a factor from [`SymBand::cholesky`].
pub fn cholesky_solve(l: &SymBand, b: &[f64]) -> Vec<f64> {
    let (n, bw) = (l.n, l.bandwidth());
    let mut y = b.to_vec();
    for i in 0..n {
        for k in i.saturating_sub(bw)..i {
            y[i] -= l.diag[i - k][k] * y[k];
        }
        y[i] /= l.diag[0][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..(i + bw + 1).min(n) {
            y[i] -= l.diag[k - i][i] * y[k];
        }
        y[i] /= l.diag[0][i];
    }
    y
}

/// `I + w1 D1ᵀD1 + w2 D2ᵀD2` in band form.
pub fn system_matrix(n: usize, w1: f64, w2: f64) -> SymBand {
    let mut a = SymBand::zeros(n, 2);
    for i in 0..n {
        a.add(i, i, 1.0);
    }
    for i in 0..n.saturating_sub(1) {
        a.add_outer(i, &[-1.0, 1.0], w1);
    }
    for i in 0..n.saturating_sub(2) {
        a.add_outer(i, &[1.0, -2.0, 1.0], w2);
    }
    a
}

fn check(n: usize, w1: f64, w2: f64) -> Result<()> {
    if n < 3 {
        return Err(DapError::Size(format!(
            "smoothing needs at least 3 samples, got {n}"
        )));
    }
    if !(w1 >= 0.0 && w2 >= 0.0 && w1.is_finite() && w2.is_finite()) {
        return Err(DapError::Config(
            "smoothing weights must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// `‖x − data‖² + w1‖D1 x‖² + w2‖D2 x‖²`.
pub fn objective(x: &[f64], data: &[f64], w1: f64, w2: f64) -> f64 {
    let fit: f64 = x.iter().zip(data).map(|(a, b)| (a - b) * (a - b)).sum();
    let d1: f64 = x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    let d2: f64 = x
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2))
        .sum();
    fit + w1 * d1 + w2 * d2
}

/// Minimizer of [`objective`], by banded Cholesky on the normal equations.
pub fn smooth_1d(data: &[f64], w1: f64, w2: f64) -> Result<Vec<f64>> {
    check(data.len(), w1, w2)?;
    let l = system_matrix(data.len(), w1, w2).cholesky()?;
    Ok(cholesky_solve(&l, data))
}

/// Lateral correction `Δℓ` minimizing `‖Δℓ − gap‖² + w1‖D1Δℓ‖² + w2‖D2Δℓ‖²`.
pub fn solve_lateral(gap: &[f64], w1: f64, w2: f64) -> Result<Vec<f64>> {
    smooth_1d(gap, w1, w2)
}

/// Least-squares non-decreasing projection (pool adjacent violators).
pub fn isotonic(x: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(x.len());
    for &v in x {
        let mut cur = (v, 1usize);
        while let Some(&(m, c)) = blocks.last() {
            if m <= cur.0 {
                break;
            }
            blocks.pop();
            let total = c + cur.1;
            cur = ((m * c as f64 + cur.0 * cur.1 as f64) / total as f64, total);
        }
        blocks.push(cur);
    }
    blocks
        .iter()
        .flat_map(|&(m, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Smoothed arc lengths before and after the monotone projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Longitudinal {
    pub smoothed: Vec<f64>,
    pub s: Vec<f64>,
}

pub fn solve_longitudinal(s_raw: &[f64], w1: f64, w2: f64) -> Result<Longitudinal> {
    let smoothed = smooth_1d(s_raw, w1, w2)?;
    let s = isotonic(&smoothed);
    Ok(Longitudinal { smoothed, s })
}

//! Dense kernels over row-major f64 buffers and their adjoints.

/// `y[t, :] = b + x[t, :] · W` for `x: T×m`, `W: m×n`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, m: usize, n: usize, y: &mut [f64]) {
    let t = x.len() / m;
    debug_assert_eq!(y.len(), t * n);
    for i in 0..t {
        let yi = &mut y[i * n..(i + 1) * n];
        match b {
            Some(b) => yi.copy_from_slice(b),
            None => yi.iter_mut().for_each(|v| *v = 0.0),
        }
        for (k, &a) in x[i * m..(i + 1) * m].iter().enumerate() {
            if a != 0.0 {
                axpy(a, &w[k * n..(k + 1) * n], yi);
            }
        }
    }
}

/// Adjoint of [`linear`]: accumulates into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    m: usize,
    n: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let t = x.len() / m;
    if let Some(dx) = dx {
        for i in 0..t {
            let dyi = &dy[i * n..(i + 1) * n];
            for k in 0..m {
                dx[i * m + k] += dot(&w[k * n..(k + 1) * n], dyi);
            }
        }
    }
    for i in 0..t {
        let dyi = &dy[i * n..(i + 1) * n];
        for (k, &a) in x[i * m..(i + 1) * m].iter().enumerate() {
            if a != 0.0 {
                axpy(a, dyi, &mut dw[k * n..(k + 1) * n]);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..t {
            axpy(1.0, &dy[i * n..(i + 1) * n], db);
        }
    }
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the reduction vectorizable.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * c + j] * b[4 * c + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer norm; stores the normalized rows and inverse std for the adjoint.
pub fn layer_norm(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    d: usize,
    y: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for (i, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let h = (row[k] - mean) * r;
            xhat[i * d + k] = h;
            y[i * d + k] = h * g[k] + b[k];
        }
    }
}

pub fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    dy: &[f64],
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let mut dh = vec![0.0; d];
    for (i, r) in rstd.iter().enumerate() {
        let xh = &xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        for k in 0..d {
            dg[k] += dyi[k] * xh[k];
            db[k] += dyi[k];
            dh[k] = dyi[k] * g[k];
        }
        let mean_dh = dh.iter().sum::<f64>() / d as f64;
        let mean_dh_xh = dot(&dh, xh) / d as f64;
        for k in 0..d {
            dx[i * d + k] += r * (dh[k] - mean_dh - xh[k] * mean_dh_xh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place max-shifted softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = 1.0 / s;
    v.iter_mut().for_each(|x| *x *= inv);
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_adjoint_identity() {
        // <dy, L(x)> = <Lᵀ dy, x> for the bias-free map.
        let (t, m, n) = (3, 4, 5);
        let x: Vec<f64> = (0..t * m).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let dy: Vec<f64> = (0..t * n).map(|i| (i as f64 * 0.5).sin()).collect();
        let mut y = vec![0.0; t * n];
        linear(&x, &w, None, m, n, &mut y);
        let mut dx = vec![0.0; t * m];
        let mut dw = vec![0.0; m * n];
        linear_backward(&x, &w, &dy, m, n, Some(&mut dx), &mut dw, None);
        assert!((dot(&dy, &y) - dot(&dx, &x)).abs() < 1e-12);
        assert!((dot(&dy, &y) - dot(&dw, &w)).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_and_lse_are_stable() {
        let mut v = vec![1000.0, 1000.0];
        softmax_in_place(&mut v);
        assert_eq!(v, vec![0.5, 0.5]);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

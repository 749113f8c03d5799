//! Dense row-major kernels used by the forecaster.
//!
//! Weights follow the `out x in` convention, so a linear layer computes
//! `y = x W^T + b`.

/// Dot product with independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[rows x n_out] = x[rows x n_in] W^T + b`, `W` is `n_out x n_in`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert_eq!(b.len(), n_out);
    let rows = x.len() / n_in;
    debug_assert_eq!(out.len(), rows * n_out);
    for (xr, or) in x.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        for ((o, wr), bo) in or.iter_mut().zip(w.chunks_exact(n_in)).zip(b) {
            *o = dot(xr, wr) + bo;
        }
    }
}

/// Backward of [`linear`]: accumulates `dW += dy^T x`, `db += sum dy`, and
/// returns `dx = dy W` when `dx` is given.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n_in: usize,
    n_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for (xr, dyr) in x.chunks_exact(n_in).zip(dy.chunks_exact(n_out)) {
        for ((g, dwr), dbo) in dyr.iter().zip(dw.chunks_exact_mut(n_in)).zip(db.iter_mut()) {
            if *g != 0.0 {
                axpy(*g, xr, dwr);
                *dbo += g;
            }
        }
    }
    if let Some(dx) = dx {
        dx.fill(0.0);
        for (dxr, dyr) in dx.chunks_exact_mut(n_in).zip(dy.chunks_exact(n_out)) {
            for (g, wr) in dyr.iter().zip(w.chunks_exact(n_in)) {
                if *g != 0.0 {
                    axpy(*g, wr, dxr);
                }
            }
        }
    }
}

/// Per-row layer normalization. Returns the normalized rows `xhat` and the
/// per-row inverse standard deviations needed by the backward pass.
pub fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    let d = gamma.len();
    for (r, ((xr, or), hr)) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + eps);
        inv_std[r] = is;
        for j in 0..d {
            let h = (xr[j] - mean) * is;
            hr[j] = h;
            or[j] = h * gamma[j] + beta[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let d = gamma.len();
    let n = d as f64;
    for (r, ((hr, dyr), dxr)) in xhat
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
            let dh = dyr[j] * gamma[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
        }
        let scale = inv_std[r] / n;
        for j in 0..d {
            let dh = dyr[j] * gamma[j];
            dxr[j] = scale * (n * dh - sum_dh - hr[j] * sum_dh_h);
        }
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `dscores = p * (dp - <dp, p>)` for one softmax row.
pub fn softmax_row_backward(p: &[f64], dp: &[f64], dscores: &mut [f64]) {
    let inner = dot(p, dp);
    for ((ds, pi), dpi) in dscores.iter_mut().zip(p).zip(dp) {
        *ds = pi * (dpi - inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..21).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..21).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn linear_small() {
        // x = [1, 2], W = [[1, 0], [0, 1], [1, 1]], b = [0, 1, 2]
        let mut out = vec![0.0; 3];
        linear(&[1.0, 2.0], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[0.0, 1.0, 2.0], 2, 3, &mut out);
        assert_eq!(out, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1.0, 2.0, 3.0, 1000.0];
        softmax_row(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[3] > 0.999);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let (mut out, mut h, mut is) = ([0.0; 4], [0.0; 4], [0.0; 1]);
        layer_norm(&x, &[1.0; 4], &[0.0; 4], 0.0, &mut out, &mut h, &mut is);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}

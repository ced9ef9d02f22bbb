//! Dense row-major kernels. Reductions use a fixed 8-lane split so results
//! are reproducible and the loops vectorize.

use super::real::Real;

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[t] = W x[t]` with `W` stored `d_out x d_in`.
pub fn matmul_wt<F: Real>(x: &[F], w: &[F], rows: usize, d_in: usize, d_out: usize) -> Vec<F> {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_out * d_in);
    let mut y = vec![F::ZERO; rows * d_out];
    for t in 0..rows {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let yt = &mut y[t * d_out..(t + 1) * d_out];
        for (o, yo) in yt.iter_mut().enumerate() {
            *yo = dot(xt, &w[o * d_in..(o + 1) * d_in]);
        }
    }
    y
}

/// `dx[t] += W^T dy[t]`
pub fn matmul_w_acc<F: Real>(dy: &[F], w: &[F], rows: usize, d_in: usize, d_out: usize, dx: &mut [F]) {
    for t in 0..rows {
        let dyt = &dy[t * d_out..(t + 1) * d_out];
        let dxt = &mut dx[t * d_in..(t + 1) * d_in];
        for (o, &g) in dyt.iter().enumerate() {
            if g != F::ZERO {
                axpy(g, &w[o * d_in..(o + 1) * d_in], dxt);
            }
        }
    }
}

/// `dW += sum_t dy[t] x[t]^T`
pub fn outer_acc<F: Real>(dy: &[F], x: &[F], rows: usize, d_in: usize, d_out: usize, dw: &mut [F]) {
    for t in 0..rows {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let dyt = &dy[t * d_out..(t + 1) * d_out];
        for (o, &g) in dyt.iter().enumerate() {
            if g != F::ZERO {
                axpy(g, xt, &mut dw[o * d_in..(o + 1) * d_in]);
            }
        }
    }
}

/// Row-wise RMS normalization. Returns output and per-row `1/rms`.
pub fn rmsnorm<F: Real>(x: &[F], gain: &[F], rows: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let mut y = vec![F::ZERO; x.len()];
    let mut inv = vec![F::ZERO; rows];
    for t in 0..rows {
        let xt = &x[t * d..(t + 1) * d];
        let ms = dot(xt, xt) / F::from_usize(d);
        let r = F::ONE / (ms + eps).sqrt();
        inv[t] = r;
        for j in 0..d {
            y[t * d + j] = gain[j] * xt[j] * r;
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm`]: accumulates into `dx` and optionally `dgain`.
pub fn rmsnorm_backward<F: Real>(
    dy: &[F],
    x: &[F],
    gain: &[F],
    inv: &[F],
    dx: &mut [F],
    mut dgain: Option<&mut [F]>,
) {
    let d = gain.len();
    let df = F::from_usize(d);
    for (t, &r) in inv.iter().enumerate() {
        let xt = &x[t * d..(t + 1) * d];
        let dyt = &dy[t * d..(t + 1) * d];
        let mut s = F::ZERO;
        for j in 0..d {
            s += gain[j] * dyt[j] * xt[j];
        }
        let k = r * r * r * s / df;
        for j in 0..d {
            dx[t * d + j] += r * gain[j] * dyt[j] - k * xt[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyt[j] * xt[j] * r;
            }
        }
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::ONE + x * (F::ONE - s))
}

/// In-place softmax; returns `ln(sum exp)` relative to the max (log-partition).
pub fn softmax_in_place<F: Real>(row: &mut [F]) -> F {
    let m = row.iter().copied().fold(F::NEG_INFINITY, F::max);
    let mut z = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
    m + z.ln()
}

/// `log(sum(exp(row)))`
pub fn logsumexp<F: Real>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::NEG_INFINITY, F::max);
    let z: F = row.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_transposes() {
        // W = [[1,2],[3,4],[5,6]] (3x2), x = [1, -1]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = matmul_wt(&[1.0f64, -1.0], &w, 1, 2, 3);
        assert_eq!(y, vec![-1.0, -1.0, -1.0]);
        let mut dx = vec![0.0; 2];
        matmul_w_acc(&[1.0, 0.0, 1.0], &w, 1, 2, 3, &mut dx);
        assert_eq!(dx, vec![6.0, 8.0]);
        let mut dw = vec![0.0; 6];
        outer_acc(&[1.0, 0.0, 2.0], &[3.0, 4.0], 1, 2, 3, &mut dw);
        assert_eq!(dw, vec![3.0, 4.0, 0.0, 0.0, 6.0, 8.0]);
    }

    #[test]
    fn rmsnorm_gradient_fd() {
        let x = [0.3f64, -1.2, 0.7, 2.0];
        let g = [1.0, 0.5, -0.4, 2.0];
        let dy = [0.1, -0.3, 0.2, 0.05];
        let eps = 1e-5;
        let f = |x: &[f64]| -> f64 {
            let (y, _) = rmsnorm(x, &g, 1, eps);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let (_, inv) = rmsnorm(&x, &g, 1, eps);
        let mut dx = vec![0.0; 4];
        rmsnorm_backward(&dy, &x, &g, &inv, &mut dx, None);
        for j in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += 1e-6;
            xm[j] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[j]).abs() < 1e-8, "{j}: {fd} vs {}", dx[j]);
        }
    }

    #[test]
    fn silu_grad_fd() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1.0f64, 2.0, 3.0];
        let lse = softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((lse - logsumexp(&[1.0, 2.0, 3.0])).abs() < 1e-15);
    }
}

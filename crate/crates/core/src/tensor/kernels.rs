//! Slice-level numeric kernels. All matmul variants *accumulate* into the
//! output (`+=`), which serves both the forward pass (fresh zero buffers)
//! and the backward pass (gradient slots that may already hold values).
//!
//! Parallelism is only ever across independent output rows; the reduction
//! inside a row is a fixed-order sequential loop, so results do not depend
//! on thread count.

use crate::parallel::for_each_row;
use crate::scalar::Scalar;

/// out[l, m, n] += Σ_k x[l, m, k] · w[(l,) k, n]
///
/// `lead` leading slices; `w_shared` means `w` is a single [k, n] matrix
/// used by every slice, otherwise `w` is [lead, k, n].
pub fn batched_nn_acc<T: Scalar>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    lead: usize,
    m: usize,
    k: usize,
    n: usize,
    w_shared: bool,
) {
    debug_assert_eq!(x.len(), lead * m * k);
    debug_assert_eq!(out.len(), lead * m * n);
    for_each_row(out, n, k * n, |row, out_row| {
        let x_row = &x[row * k..row * k + k];
        let w_slice = if w_shared { w } else { &w[(row / m) * k * n..(row / m + 1) * k * n] };
        for (kk, &xv) in x_row.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let w_row = &w_slice[kk * n..kk * n + n];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o = *o + xv * wv;
            }
        }
    });
}

/// out[l, p, q] += Σ_c x[l, p, c] · y[(l,) q, c]  (x · yᵀ)
pub fn batched_nt_acc<T: Scalar>(
    x: &[T],
    y: &[T],
    out: &mut [T],
    lead: usize,
    p: usize,
    c: usize,
    q: usize,
    y_shared: bool,
) {
    debug_assert_eq!(x.len(), lead * p * c);
    debug_assert_eq!(out.len(), lead * p * q);
    for_each_row(out, q, c * q, |row, out_row| {
        let x_row = &x[row * c..row * c + c];
        let y_slice = if y_shared { y } else { &y[(row / p) * q * c..(row / p + 1) * q * c] };
        for (qq, o) in out_row.iter_mut().enumerate() {
            let y_row = &y_slice[qq * c..qq * c + c];
            let mut acc = T::zero();
            for (&a, &b) in x_row.iter().zip(y_row) {
                acc = acc + a * b;
            }
            *o = *o + acc;
        }
    });
}

/// out[m, n] += Σ_r x[r, m] · y[r, n], summing over *all* `r` rows.
/// Used for weight gradients of a shared right-hand side.
pub fn tn_acc_shared<T: Scalar>(x: &[T], y: &[T], out: &mut [T], r: usize, m: usize, n: usize) {
    debug_assert_eq!(x.len(), r * m);
    debug_assert_eq!(y.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, r * n, |mm, out_row| {
        for rr in 0..r {
            let xv = x[rr * m + mm];
            if xv == T::zero() {
                continue;
            }
            let y_row = &y[rr * n..rr * n + n];
            for (o, &yv) in out_row.iter_mut().zip(y_row) {
                *o = *o + xv * yv;
            }
        }
    });
}

/// out[l, m, n] += Σ_r x[l, r, m] · y[l, r, n], per leading slice.
pub fn tn_acc_batched<T: Scalar>(
    x: &[T],
    y: &[T],
    out: &mut [T],
    lead: usize,
    r: usize,
    m: usize,
    n: usize,
) {
    debug_assert_eq!(x.len(), lead * r * m);
    debug_assert_eq!(y.len(), lead * r * n);
    debug_assert_eq!(out.len(), lead * m * n);
    for_each_row(out, n, r * n, |row, out_row| {
        let l = row / m;
        let mm = row % m;
        let x_slice = &x[l * r * m..(l + 1) * r * m];
        let y_slice = &y[l * r * n..(l + 1) * r * n];
        for rr in 0..r {
            let xv = x_slice[rr * m + mm];
            if xv == T::zero() {
                continue;
            }
            let y_row = &y_slice[rr * n..rr * n + n];
            for (o, &yv) in out_row.iter_mut().zip(y_row) {
                *o = *o + xv * yv;
            }
        }
    });
}

/// Row-wise softmax with max subtraction. Returns true if any input element
/// was non-finite.
pub fn softmax_rows<T: Scalar>(x: &[T], out: &mut [T], width: usize) -> bool {
    debug_assert_eq!(x.len(), out.len());
    let saw_bad = std::sync::atomic::AtomicBool::new(false);
    for_each_row(out, width, 8 * width, |row, out_row| {
        let x_row = &x[row * width..row * width + width];
        let mut mx = x_row[0];
        let mut finite = true;
        for &v in x_row {
            if !v.is_finite() {
                finite = false;
            }
            if v > mx {
                mx = v;
            }
        }
        if !finite {
            saw_bad.store(true, std::sync::atomic::Ordering::Relaxed);
        }
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(x_row) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in out_row.iter_mut() {
            *o = *o * inv;
        }
    });
    saw_bad.into_inner()
}

/// dx[i] += y[i] · (dy[i] − Σ_j dy[j]·y[j]) per row, where y is the softmax
/// output.
pub fn softmax_vjp_rows<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], width: usize) {
    for_each_row(dx, width, 4 * width, |row, dx_row| {
        let y_row = &y[row * width..row * width + width];
        let dy_row = &dy[row * width..row * width + width];
        let mut dot = T::zero();
        for (&a, &b) in y_row.iter().zip(dy_row) {
            dot = dot + a * b;
        }
        for ((d, &yv), &dyv) in dx_row.iter_mut().zip(y_row).zip(dy_row) {
            *d = *d + yv * (dyv - dot);
        }
    });
}

/// Two-pass layer norm over the last axis; writes per-row mean and inverse
/// std (with `eps` inside the square root) for the backward pass.
pub fn layernorm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    mean: &mut [T],
    invstd: &mut [T],
    width: usize,
) {
    let rows = x.len() / width;
    debug_assert_eq!(mean.len(), rows);
    // mean/invstd are written per row; compute them first so the main loop
    // can run row-parallel over `out` alone.
    for r in 0..rows {
        let x_row = &x[r * width..r * width + width];
        let mut mu = T::zero();
        for &v in x_row {
            mu = mu + v;
        }
        mu = mu / T::from_f64(width as f64);
        let mut var = T::zero();
        for &v in x_row {
            let d = v - mu;
            var = var + d * d;
        }
        var = var / T::from_f64(width as f64);
        mean[r] = mu;
        invstd[r] = T::one() / (var + eps).sqrt();
    }
    for_each_row(out, width, 6 * width, |r, out_row| {
        let x_row = &x[r * width..r * width + width];
        let mu = mean[r];
        let is = invstd[r];
        for (i, (o, &v)) in out_row.iter_mut().zip(x_row).enumerate() {
            *o = (v - mu) * is * gamma[i] + beta[i];
        }
    });
}

/// Layer-norm input gradient:
/// dx = invstd · (g − mean(g) − x̂ · mean(g·x̂)) with g = dy·γ.
pub fn layernorm_vjp_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    invstd: &[T],
    dy: &[T],
    dx: &mut [T],
    width: usize,
) {
    let inv_w = T::one() / T::from_f64(width as f64);
    for_each_row(dx, width, 10 * width, |r, dx_row| {
        let x_row = &x[r * width..r * width + width];
        let dy_row = &dy[r * width..r * width + width];
        let mu = mean[r];
        let is = invstd[r];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..width {
            let g = dy_row[i] * gamma[i];
            let xh = (x_row[i] - mu) * is;
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * xh;
        }
        let mean_g = sum_g * inv_w;
        let mean_gx = sum_gx * inv_w;
        for i in 0..width {
            let g = dy_row[i] * gamma[i];
            let xh = (x_row[i] - mu) * is;
            dx_row[i] = dx_row[i] + is * (g - mean_g - xh * mean_gx);
        }
    });
}

// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC_COEF: f64 = 0.044_715;

pub fn gelu_rows<T: Scalar>(x: &[T], out: &mut [T]) {
    let c0 = T::from_f64(GELU_SQRT_2_OVER_PI);
    let c1 = T::from_f64(GELU_CUBIC_COEF);
    let half = T::from_f64(0.5);
    for (o, &v) in out.iter_mut().zip(x) {
        let inner = c0 * (v + c1 * v * v * v);
        *o = half * v * (T::one() + inner.tanh());
    }
}

/// dx += dy · gelu'(x) with
/// gelu'(x) = 0.5·(1 + t) + 0.5·x·(1 − t²)·√(2/π)·(1 + 3·0.044715·x²),
/// t = tanh(√(2/π)·(x + 0.044715·x³)).
pub fn gelu_vjp_rows<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    let c0 = T::from_f64(GELU_SQRT_2_OVER_PI);
    let c1 = T::from_f64(GELU_CUBIC_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        let t = (c0 * (v + c1 * v * v * v)).tanh();
        let sech2 = T::one() - t * t;
        let deriv = half * (T::one() + t) + half * v * sech2 * c0 * (T::one() + three * c1 * v * v);
        *d = *d + g * deriv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0), "{a} vs {b}");
    }

    #[test]
    fn nn_acc_matches_hand_product() {
        // [[1,2],[3,4]] · [[1],[1]] = [[3],[7]]
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [1.0, 1.0];
        let mut out = [0.0; 2];
        batched_nn_acc(&x, &w, &mut out, 1, 2, 2, 1, true);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn nn_acc_accumulates() {
        let x = [2.0f32];
        let w = [3.0];
        let mut out = [10.0];
        batched_nn_acc(&x, &w, &mut out, 1, 1, 1, 1, true);
        assert_eq!(out, [16.0]);
    }

    #[test]
    fn nt_equals_nn_with_transposed_rhs() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // [2,3]
        let y: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // [4,3]
        let mut out_nt = vec![0.0; 8];
        batched_nt_acc(&x, &y, &mut out_nt, 1, 2, 3, 4, true);
        // transpose y to [3,4] and use nn
        let mut yt = vec![0.0; 12];
        for r in 0..4 {
            for c in 0..3 {
                yt[c * 4 + r] = y[r * 3 + c];
            }
        }
        let mut out_nn = vec![0.0; 8];
        batched_nn_acc(&x, &yt, &mut out_nn, 1, 2, 3, 4, true);
        for (a, b) in out_nt.iter().zip(&out_nn) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn tn_shared_sums_all_rows() {
        // x: [2,1] (column), y: [2,2] → out[1,2] = Σ_r x[r]·y[r,:]
        let x = [2.0f64, 3.0];
        let y = [1.0, 10.0, 100.0, 1000.0];
        let mut out = [0.0; 2];
        tn_acc_shared(&x, &y, &mut out, 2, 1, 2);
        assert_eq!(out, [302.0, 3020.0]);
    }

    #[test]
    fn softmax_handles_extreme_magnitudes() {
        let x = [1e30f32, -1e30];
        let mut out = [0.0f32; 2];
        let bad = softmax_rows(&x, &mut out, 2);
        assert!(!bad);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn softmax_flags_non_finite() {
        let x = [f32::NAN, 0.0];
        let mut out = [0.0f32; 2];
        assert!(softmax_rows(&x, &mut out, 2));
    }

    #[test]
    fn layernorm_standardizes_with_small_eps() {
        let x = [1.0f64, -1.0];
        let gamma = [1.0, 1.0];
        let beta = [0.0, 0.0];
        let mut out = [0.0; 2];
        let mut mean = [0.0; 1];
        let mut invstd = [0.0; 1];
        layernorm_rows(&x, &gamma, &beta, 1e-12, &mut out, &mut mean, &mut invstd, 2);
        assert_close(out[0], 1.0, 1e-9);
        assert_close(out[1], -1.0, 1e-9);
    }

    #[test]
    fn gelu_known_points() {
        // gelu(0) = 0; gelu(x) → x for large x; gelu(-x) small.
        let x = [0.0f64, 5.0, -5.0, 1.0];
        let mut out = [0.0; 4];
        gelu_rows(&x, &mut out);
        assert_eq!(out[0], 0.0);
        assert_close(out[1], 5.0, 1e-6);
        assert!(out[2].abs() < 1e-4);
        // tanh-approximation value at 1.0
        assert_close(out[3], 0.841192, 1e-5);
    }
}

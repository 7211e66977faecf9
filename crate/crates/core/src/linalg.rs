// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f32 kernels over row-major slices.
//!
//! Matrix products go through `matrixmultiply::sgemm` (single-threaded, so
//! results are reproducible run to run). Everything else is plain loops.

/// Epsilon used by every RMS normalization in the crate.
pub const RMS_EPS: f32 = 1e-5;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "output buffer too small");
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe views that stay inside `a`, `b` and `c`;
    // callers size the slices from the same (m, k, n) they pass here and the
    // asserts below check the extents.
    unsafe {
        debug_assert!(a.len() >= m * k && b.len() >= k * n);
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] (+)= a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= n * k);
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), c, acc);
}

/// `c[m,n] (+)= a[m,k] · b[k,n]`
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, acc);
}

/// `c[m,n] (+)= a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), c, acc);
}

/// `out[r] = Σ_c w[r,c]·x[c]` for a row-major `w[rows, x.len()]`.
pub fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reciprocal RMS of one row.
pub fn inv_rms(x: &[f32]) -> f32 {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// RMS-normalize one row and scale by `gain`.
pub fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) -> f32 {
    let inv = inv_rms(x);
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

/// Row-wise RMS norm over `x[rows, dim]`; returns the per-row reciprocal RMS.
pub fn rms_norm_rows(x: &[f32], gain: &[f32], out: &mut [f32]) -> Vec<f32> {
    let dim = gain.len();
    x.chunks_exact(dim)
        .zip(out.chunks_exact_mut(dim))
        .map(|(xr, or)| rms_norm(xr, gain, or))
        .collect()
}

/// Backward of [`rms_norm_rows`]: accumulates into `dx` and `dgain`.
pub fn rms_norm_rows_backward(
    x: &[f32],
    gain: &[f32],
    inv: &[f32],
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
) {
    let dim = gain.len();
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(dim)
        .zip(dy.chunks_exact(dim))
        .zip(dx.chunks_exact_mut(dim))
        .enumerate()
    {
        let s = inv[r];
        let mut proj = 0.0f32;
        for j in 0..dim {
            proj += dyr[j] * gain[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * s;
        }
        let coef = s * s * s * proj / dim as f32;
        for j in 0..dim {
            dxr[j] += s * dyr[j] * gain[j] - coef * xr[j];
        }
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// `log Σ exp(x)` accumulated in f64.
pub fn log_sum_exp_f64(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k(values: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i, values[i])).collect()
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

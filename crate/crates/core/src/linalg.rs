//! Dense row-major kernels on plain slices.
//!
//! These are shared by the autodiff ops and by the tape-free decoding path,
//! so both routes see the same summation order for a given problem size.

/// `c (+)= a · b` for an `m×k` matrix `a` and a `k×n` matrix `b`, each given
/// with explicit (row, column) strides so transposed views cost nothing.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let a_extent = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let b_extent = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(a_extent < a.len(), "gemm lhs view out of bounds");
    assert!(b_extent < b.len(), "gemm rhs view out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index touched by the kernel lies within the extents
    // asserted above, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `m×k · k×n` product into a fresh buffer.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), &mut c, false);
    c
}

/// Per-row layer normalisation. Returns the normalised rows (`x̂`) and the
/// per-row inverse standard deviations, writing `x̂·γ + β` into `out`.
pub fn layer_norm_rows(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (xhat, inv_std)
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

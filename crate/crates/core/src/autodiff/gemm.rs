//! Row-major accumulate-into matrix products on raw slices.

/// `out (m×n) += A (m×k) · B (k×n)` where `A`/`B` are read through the
/// given row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    out: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach, and
    // `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (m×n) += a (m×k) · b (k×n)`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out (m×n) += a (m×k) · bᵀ` where `b` is `n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
}

/// `out (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    gemm_strided(m, k, n, a, (1, m as isize), b, (n as isize, 1), out);
}

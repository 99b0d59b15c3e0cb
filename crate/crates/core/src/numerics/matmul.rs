//! Thin wrapper around the `matrixmultiply` dgemm kernel.
//!
//! All tensors in this crate are row-major, but backward passes need the
//! products `G · Bᵀ` and `Aᵀ · G`; instead of materializing transposes the
//! wrapper exposes explicit strides so a transposed view is just a stride
//! swap. `beta = 1.0` accumulates into the output, which lets gradient
//! buffers be updated in place.

/// `c = alpha * a · b + beta * c` with explicit row/column strides.
///
/// Dimensions: `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Slices must
/// be large enough for the strided access pattern; plain row-major matrices
/// use strides `(cols, 1)`.
#[allow(clippy::too_many_arguments)]
pub fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(span(m, k, rsa, csa) <= a.len());
    debug_assert!(span(k, n, rsb, csb) <= b.len());
    debug_assert!(m * n <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `c = a · b` (the common forward case).
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    dgemm_strided(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c);
}

/// Number of elements a strided `r x c` view touches (for debug bounds).
fn span(r: usize, c: usize, rs: isize, cs: isize) -> usize {
    if r == 0 || c == 0 {
        return 0;
    }
    ((r - 1) as isize * rs + (c - 1) as isize * cs) as usize + 1
}

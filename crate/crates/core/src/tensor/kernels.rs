//! Safe wrappers over the `matrixmultiply` GEMM kernel.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. With `Trans::Yes` the buffer
/// holds the transposed matrix (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = match ta {
        Trans::No => (k, 1),
        Trans::Yes => (1, m),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n, 1),
        Trans::Yes => (1, k),
    };
    gemm_strided(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

/// GEMM over arbitrary strided views; used for per-head attention slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cdim: usize, rs: usize, cs: usize| {
        if r == 0 || cdim == 0 {
            0
        } else {
            (r - 1) * rs + (cdim - 1) * cs + 1
        }
    };
    assert!(last(m, k, rsa, csa) <= a.len(), "gemm: lhs view out of bounds");
    assert!(last(k, n, rsb, csb) <= b.len(), "gemm: rhs view out of bounds");
    assert!(last(m, n, rsc, csc) <= c.len(), "gemm: output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * rsc + j * csc];
                *x = if beta == 0.0 { 0.0 } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above and `c` does not alias `a` or `b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

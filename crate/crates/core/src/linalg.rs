//! Dense row-major matrix products backed by `matrixmultiply`.

/// `c = beta * c + a · wᵀ`, with `a: m×k`, `w: n×k`, `c: m×n`.
pub(crate) fn matmul_a_bt(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && w.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover every strided access checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = beta * c + a · w`, with `a: m×n`, `w: n×k`, `c: m×k`.
pub(crate) fn matmul_a_b(m: usize, n: usize, k: usize, a: &[f64], w: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * n && w.len() >= n * k && c.len() >= m * k);
    if m == 0 || k == 0 {
        return;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            beta,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `c = beta * c + gᵀ · h`, with `g: m×n`, `h: m×k`, `c: n×k`.
pub(crate) fn matmul_at_b(m: usize, n: usize, k: usize, g: &[f64], h: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(g.len() >= m * n && h.len() >= m * k && c.len() >= n * k);
    if n == 0 || k == 0 {
        return;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.as_ptr(),
            1,
            n as isize,
            h.as_ptr(),
            k as isize,
            1,
            beta,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

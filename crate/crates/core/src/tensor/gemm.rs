//! Thin wrapper over `matrixmultiply::sgemm` for row-major operands.

/// Logical layout of a row-major operand.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Stored as `[rows, cols]`.
    Normal,
    /// Stored as `[cols, rows]`; used as its transpose.
    Transposed,
}

/// `c = a · b + beta · c`, with `a` logically `[m, k]`, `b` logically `[k, n]`
/// and `c` row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the slices cover exactly the extents described by the strides.
    unsafe {
        matrixmultiply::sgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

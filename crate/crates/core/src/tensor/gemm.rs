// Bounds checks for the strided GEMM views handed to matrixmultiply.

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not used");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

#[allow(clippy::too_many_arguments)]
pub(super) fn check_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    rsa: isize,
    csa: isize,
    b_len: usize,
    rsb: isize,
    csb: isize,
    c_len: usize,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_offset(m, k, rsa, csa) < a_len, "gemm: A view out of bounds");
        assert!(max_offset(k, n, rsb, csb) < b_len, "gemm: B view out of bounds");
    }
    assert!(max_offset(m, n, rsc, csc) < c_len, "gemm: C view out of bounds");
}

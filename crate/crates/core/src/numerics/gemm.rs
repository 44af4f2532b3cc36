use super::Real;

/// Bounds-checked strided GEMM: `c = alpha * a * b + beta * c`.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`, each addressed through
/// (row stride, column stride). When `beta` is zero `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * rsc + j * csc];
                *x = if beta == T::zero() { T::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    // SAFETY: extents checked above; `c` is a unique borrow so it cannot alias `a`/`b`.
    unsafe {
        T::gemm_raw(
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
        )
    }
}

/// Contiguous matrix product `c (+)= op(a) * op(b)` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. A transposed operand is stored in its untransposed
/// row-major layout (`a` as `k x m`, `b` as `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Real>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let sa = if trans_a { (1, m) } else { (k, 1) };
    let sb = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm_strided(m, k, n, T::one(), a, sa, b, sb, beta, c, (n, 1));
}

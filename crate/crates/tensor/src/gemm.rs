//! Thin safe wrappers around the matrixmultiply GEMM kernel for row-major
//! buffers. Everything else in the engine is hand-written; only the innermost
//! dense multiply is delegated.

use crate::Real;

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_kernel;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_kernel;

/// `c = alpha * a @ b + beta * c` with row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
pub fn gemm_nn(m: usize, k: usize, n: usize, alpha: Real, a: &[Real], b: &[Real], beta: Real, c: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm_kernel(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = alpha * a @ b^T + beta * c` with row-major `a: [m,k]`, `b: [n,k]`, `c: [m,n]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, alpha: Real, a: &[Real], b: &[Real], beta: Real, c: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm_kernel(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = alpha * a^T @ b + beta * c` with row-major `a: [k,m]`, `b: [k,n]`, `c: [m,n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: Real, a: &[Real], b: &[Real], beta: Real, c: &mut [Real]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm_kernel(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_matches_hand_result() {
        // [2,3] @ [3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // [2,3] = b^T for b above
        let mut c = [0.0; 4];
        gemm_nt(2, 3, 2, 1.0, &a, &bt, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // [3,2] = a^T
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let mut c2 = [0.0; 4];
        gemm_tn(2, 3, 2, 1.0, &at, &b, 0.0, &mut c2);
        assert_eq!(c2, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let mut c = [10.0, 10.0, 10.0, 10.0];
        gemm_nn(2, 2, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [11.0, 12.0, 13.0, 14.0]);
    }
}

//! Matrix kernels. Products go through `matrixmultiply` (single threaded, so
//! the summation order depends only on the shapes); the dot product keeps
//! eight fixed lanes.

use super::Real;

/// Eight-accumulator dot product.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `C += A·B` with `A: m×k`, `B: k×n`, `C: m×n`.
pub fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    T::gemm_acc(m, k, n, a, [k, 1], b, [n, 1], c);
}

/// `C += A·Bᵀ` with `A: m×k`, `B: n×k`, `C: m×n`.
pub fn gemm_a_bt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    T::gemm_acc(m, k, n, a, [k, 1], b, [1, k], c);
}

/// `C += Aᵀ·B` with `A: m×k`, `B: m×n`, `C: k×n`.
pub fn gemm_at_b<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == m * n && c.len() == k * n);
    T::gemm_acc(k, m, n, a, [1, k], b, [n, 1], c);
}

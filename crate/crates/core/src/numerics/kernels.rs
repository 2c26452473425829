//! Row-major matrix kernels. All of them accumulate into `c`.

use crate::numerics::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert!(a.len() == n * k && b.len() == k * m && c.len() == n * m);
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * m..(p + 1) * m], ci);
            }
        }
    }
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert!(a.len() == n * k && b.len() == m * k && c.len() == n * m);
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[n×m] += a[k×n]ᵀ · b[k×m]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert!(a.len() == k * n && b.len() == k * m && c.len() == n * m);
    for p in 0..k {
        let ap = &a[p * n..(p + 1) * n];
        let bp = &b[p * m..(p + 1) * m];
        for (i, &api) in ap.iter().enumerate() {
            if api != T::zero() {
                axpy(api, bp, &mut c[i * m..(i + 1) * m]);
            }
        }
    }
}

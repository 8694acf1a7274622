use super::{Scalar, Tensor2};

const LANES: usize = 8;

/// Dot product with eight independent partial sums so the loop vectorizes
/// without reassociation.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    let mut s = tail;
    for v in acc {
        s = s + v;
    }
    s
}

/// Dot product of any two scalar slices accumulated in `f64`.
#[inline]
pub fn dot_f64acc<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l].as_f64() * y[l].as_f64();
        }
    }
    let mut s: f64 = ra
        .iter()
        .zip(rb)
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum();
    for v in acc {
        s += v;
    }
    s
}

/// Dot product of an `f64` slice with any scalar slice, in `f64`.
#[inline]
pub fn dot_mixed<T: Scalar>(a: &[f64], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l].as_f64();
        }
    }
    let mut s: f64 = ra.iter().zip(rb).map(|(&x, &y)| x * y.as_f64()).sum();
    for v in acc {
        s += v;
    }
    s
}

/// `out += a · b`
pub(crate) fn gemm_nn<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>, out: &mut Tensor2<T>) {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(out.shape(), (m, n));
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>, out: &mut Tensor2<T>) {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    debug_assert_eq!(out.shape(), (m, n));
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let v = dot(arow, b.row(j));
            let o = &mut out.data_mut()[i * n + j];
            *o = *o + v;
        }
    }
}

/// `out += aᵀ · b`
pub(crate) fn gemm_tn<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>, out: &mut Tensor2<T>) {
    let (k, m) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(out.shape(), (m, n));
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == T::zero() {
                continue;
            }
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
}

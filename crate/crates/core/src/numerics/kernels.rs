//! Inner-loop matrix kernels shared by the tape ops.
//!
//! All three accumulate into `c` (callers zero-fill or reuse as needed) and
//! keep both inner loops over contiguous rows so the compiler can vectorize.

use super::tensor::Scalar;

/// c[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // narrow outputs keep the accumulator row in registers via a
    // monomorphized width
    match n {
        8 => return mm_nn_fixed::<T, 8>(a, b, c, m, k),
        16 => return mm_nn_fixed::<T, 16>(a, b, c, m, k),
        24 => return mm_nn_fixed::<T, 24>(a, b, c, m, k),
        32 => return mm_nn_fixed::<T, 32>(a, b, c, m, k),
        48 => return mm_nn_fixed::<T, 48>(a, b, c, m, k),
        64 => return mm_nn_fixed::<T, 64>(a, b, c, m, k),
        _ => {}
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn mm_nn_fixed<T: Scalar, const N: usize>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * N..(i + 1) * N];
        let mut acc = [T::zero(); N];
        acc.copy_from_slice(crow);
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * N..(p + 1) * N];
            for j in 0..N {
                acc[j] = acc[j] + av * brow[j];
            }
        }
        crow.copy_from_slice(&acc);
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (dot products of contiguous rows)
///
/// Eight-lane partial accumulators let the reduction vectorize; the lane
/// combine order is fixed, so results stay bit-reproducible.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv = *cv + dot(arow, brow);
        }
    }
}

/// Fixed-order sum with eight partial lanes.
#[inline]
pub fn sum8<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ch = a.chunks_exact(8);
    for ca in &mut ch {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l];
        }
    }
    let mut s = T::zero();
    for l in 0..8 {
        s = s + acc[l];
    }
    for &v in ch.remainder() {
        s = s + v;
    }
    s
}

/// Fixed-order dot product with eight partial lanes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ach = a.chunks_exact(8);
    let mut bch = b.chunks_exact(8);
    for (ca, cb) in (&mut ach).zip(&mut bch) {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    let mut s = T::zero();
    for l in 0..8 {
        s = s + acc[l];
    }
    for (&av, &bv) in ach.remainder().iter().zip(bch.remainder()) {
        s = s + av * bv;
    }
    s
}

/// c[k,n] += a[m,k]^T * b[m,n]  (rank-1 row updates)
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    match n {
        8 => return mm_tn_fixed::<T, 8>(a, b, c, m, k),
        16 => return mm_tn_fixed::<T, 16>(a, b, c, m, k),
        24 => return mm_tn_fixed::<T, 24>(a, b, c, m, k),
        32 => return mm_tn_fixed::<T, 32>(a, b, c, m, k),
        48 => return mm_tn_fixed::<T, 48>(a, b, c, m, k),
        64 => return mm_tn_fixed::<T, 64>(a, b, c, m, k),
        _ => {}
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn mm_tn_fixed<T: Scalar, const N: usize>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let mut brow = [T::zero(); N];
        brow.copy_from_slice(&b[i * N..(i + 1) * N]);
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * N..(p + 1) * N];
            for j in 0..N {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// In-place row softmax over an [rows, cols] buffer.
pub fn softmax_rows<T: Scalar>(x: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            max = if v > max { v } else { max };
        }
        // exponentiate in one vectorizable pass, then reduce
        let mut chunks = row.chunks_exact_mut(8);
        for ch in &mut chunks {
            for l in 0..8 {
                ch[l] = (ch[l] - max).exp_inner();
            }
        }
        for v in chunks.into_remainder() {
            *v = (*v - max).exp_inner();
        }
        let sum = sum8(row);
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

//! Raw compute kernels shared by the tape ops.
//!
//! All matmul variants accumulate into `out` (callers zero-fill when needed).
//! The main kernel is ikj-ordered with a 4-way unroll over the reduction
//! axis so the inner loop runs over contiguous rows, keeps the output row
//! hot, and autovectorizes. The transposed variants materialize a transposed
//! copy (O(m·n) traffic) and reuse the fast path rather than running a
//! strided reduction.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let a0 = arow[p];
            let a1 = arow[p + 1];
            let a2 = arow[p + 2];
            let a3 = arow[p + 3];
            let (b0, rest) = b[p * n..].split_at(n);
            let (b1, rest) = rest.split_at(n);
            let (b2, rest) = rest.split_at(n);
            let b3 = &rest[..n];
            for ((((o, &v0), &v1), &v2), &v3) in orow
                .iter_mut()
                .zip(b0.iter())
                .zip(b1.iter())
                .zip(b2.iter())
                .zip(b3.iter())
            {
                *o += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
            p += 4;
        }
        while p < k {
            let ap = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += ap * bv;
            }
            p += 1;
        }
    }
}

/// Transpose src [r,c] into dst [c,r].
pub fn transpose_into<E: Scalar>(src: &[E], r: usize, c: usize, dst: &mut [E]) {
    debug_assert_eq!(src.len(), r * c);
    debug_assert_eq!(dst.len(), r * c);
    for i in 0..r {
        let row = &src[i * c..(i + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            dst[j * r + i] = v;
        }
    }
}

/// out[m,n] += aᵀ[m,k] * b[k,n] where `a` is stored as [k,m]
pub fn matmul_acc_at<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    let mut at: Vec<E> = vec![E::ZERO; k * m];
    transpose_into(a, k, m, &mut at);
    matmul_acc(&at, b, m, k, n, out);
}

/// out[m,n] += a[m,k] * bᵀ[k,n] where `b` is stored as [n,k]
pub fn matmul_acc_bt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(b.len(), n * k);
    let mut bt: Vec<E> = vec![E::ZERO; n * k];
    transpose_into(b, n, k, &mut bt);
    matmul_acc(a, &bt, m, k, n, out);
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, H*W] for a same-padded
/// stride-1 convolution with odd kernel extents.
pub fn im2col<E: Scalar>(x: &[E], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [E]) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * h * w);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &mut col[((ci * kh + dy) * kw + dx) * hw..((ci * kh + dy) * kw + dx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = E::ZERO;
                        }
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, v) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + dx as isize - pw as isize;
                        *v = if sx < 0 || sx >= w as isize {
                            E::ZERO
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Like [`im2col`] but writing the transposed layout [H*W, C*kh*kw]; the
/// conv-backward weight gradient consumes it directly, transpose-free.
pub fn im2col_t<E: Scalar>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    col_t: &mut [E],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col_t.len(), c * kh * kw * h * w);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let ckk = c * kh * kw;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col_t[(y * w + xx) * ckk..(y * w + xx + 1) * ckk];
            let mut idx = 0;
            for ci in 0..c {
                let plane = &x[ci * hw..(ci + 1) * hw];
                for dy in 0..kh {
                    let sy = y as isize + dy as isize - ph as isize;
                    for dx in 0..kw {
                        let sx = xx as isize + dx as isize - pw as isize;
                        row[idx] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            E::ZERO
                        } else {
                            plane[sy as usize * w + sx as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add the column form back onto an image; the adjoint of [`im2col`].
pub fn col2im_acc<E: Scalar>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    x: &mut [E],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * h * w);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &col[((ci * kh + dy) * kw + dx) * hw..((ci * kh + dy) * kw + dx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut x[(ci * h + sy as usize) * w..(ci * h + sy as usize + 1) * w];
                    for (xx, &v) in src.iter().enumerate() {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

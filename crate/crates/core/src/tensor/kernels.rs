//! Raw loops behind the tape ops.
//!
//! Parallel kernels split work over independent output rows only; every
//! output element is reduced sequentially in a fixed order, so results do not
//! depend on the rayon thread count.

use rayon::prelude::*;

use super::Element;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

pub(crate) fn transpose_batched<T: Element>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Batched `op(A)·op(B)`.
///
/// `a` is `[batch, m, k]` (or `[batch, k, m]` when `ta`), `b` is `[batch, k, n]`
/// (or `[batch, n, k]` when `tb`). Each output element accumulates over `k` in
/// ascending order starting from zero, which matches a textbook triple loop.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let a_owned;
    let a = if ta {
        a_owned = transpose_batched(a, batch, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose_batched(b, batch, n, k);
        &b_owned[..]
    } else {
        b
    };
    let mut out = vec![T::ZERO; batch * m * n];
    if n == 0 || m == 0 || batch == 0 {
        return out;
    }
    let row = |(r, c_row): (usize, &mut [T])| {
        let bi = r / m;
        let a_row = &a[r * k..(r + 1) * k];
        let b_mat = &b[bi * k * n..(bi + 1) * k * n];
        for (p, &s) in a_row.iter().enumerate() {
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += s * bv;
            }
        }
    };
    if batch * m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Same-padded per-channel correlation of `[batch, h, w, d]` with `[k, k, d]`.
pub(crate) fn depthwise_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
    k: usize,
) -> Vec<T> {
    let r = (k / 2) as isize;
    let mut out = vec![T::ZERO; batch * h * w * d];
    let per_row = |(idx, o_row): (usize, &mut [T])| {
        let bi = idx / h;
        let y = idx % h;
        let img = &x[bi * h * w * d..(bi + 1) * h * w * d];
        for xx in 0..w {
            let o = &mut o_row[xx * d..(xx + 1) * d];
            for i in 0..k {
                let sy = y as isize + i as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let sx = xx as isize + j as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &img[(sy as usize * w + sx as usize) * d..][..d];
                    let ker = &kernel[(i * k + j) * d..][..d];
                    for ((ov, &sv), &kv) in o.iter_mut().zip(src).zip(ker) {
                        *ov += sv * kv;
                    }
                }
            }
        }
    };
    if out.len() * k * k >= PAR_THRESHOLD {
        out.par_chunks_mut(w * d).enumerate().for_each(per_row);
    } else {
        out.chunks_mut(w * d).enumerate().for_each(per_row);
    }
    out
}

/// Gradients of [`depthwise_forward`] with respect to input and kernel.
pub(crate) fn depthwise_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    g: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let (batch, h, w, d) = dims;
    let r = (k / 2) as isize;
    let mut gx = vec![T::ZERO; x.len()];
    let mut gk = vec![T::ZERO; kernel.len()];
    for bi in 0..batch {
        let off = bi * h * w * d;
        for y in 0..h {
            for xx in 0..w {
                let go = &g[off + (y * w + xx) * d..][..d];
                for i in 0..k {
                    let sy = y as isize + i as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let sx = xx as isize + j as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src_off = off + (sy as usize * w + sx as usize) * d;
                        let kofs = (i * k + j) * d;
                        for c in 0..d {
                            gx[src_off + c] += go[c] * kernel[kofs + c];
                            gk[kofs + c] += go[c] * x[src_off + c];
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output `[shape[perm[0]], shape[perm[1]], ...]`.
pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

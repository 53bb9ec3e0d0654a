//! Raw computational kernels shared by tape operations.
//!
//! All loops are fixed-order, so results are bit-identical regardless of
//! thread count (threading happens above this layer, per sample).

use super::Scalar;
use crate::error::{Error, Result};

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Shape of `a op b` under numpy-style broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(Error::Shape(format!(
                    "cannot broadcast {a:?} with {b:?} (axis {i}: {x} vs {y})"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when broadcast up to `out_shape` (0 on expanded axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let mut s = vec![0; rank];
    let off = rank - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Calls `f(out_idx, a_idx, b_idx)` for every element of `out_shape` in
/// row-major order, with `a` and `b` indices broadcast.
pub fn zip_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut coord = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            coord[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
}

/// Adds `src` (of `src_shape`) into `dst` (of `dst_shape`), summing over the
/// axes that were broadcast when expanding `dst_shape` to `src_shape`.
pub fn reduce_into<F: Scalar>(src: &[F], src_shape: &[usize], dst: &mut [F], dst_shape: &[usize]) {
    if src_shape == dst_shape {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
        return;
    }
    let sd = broadcast_strides(dst_shape, src_shape);
    let rank = src_shape.len();
    let mut coord = vec![0usize; rank];
    let mut id = 0usize;
    for &s in src.iter() {
        dst[id] += s;
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            id += sd[ax];
            if coord[ax] < src_shape[ax] {
                break;
            }
            coord[ax] = 0;
            id -= sd[ax] * src_shape[ax];
        }
    }
}

/// `y[0..cols] += sum_i x[i] * w[i, 0..cols]` for row-major `w[rows, cols]`.
pub fn axpy_rows<F: Scalar>(y: &mut [F], x: &[F], w: &[F], rows: usize, cols: usize) {
    debug_assert_eq!(y.len(), cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(w.len(), rows * cols);
    for i in 0..rows {
        let xi = x[i];
        if xi == F::zero() {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += xi * *wj;
        }
    }
}

/// `out[i] += dot(g, w[i, ..])` for row-major `w[rows, cols]`.
pub fn dot_rows<F: Scalar>(out: &mut [F], g: &[F], w: &[F], rows: usize, cols: usize) {
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(g.len(), cols);
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        // Eight partial sums so the reduction vectorizes without -ffast-math.
        let mut acc = [F::zero(); 8];
        let chunks = cols / 8;
        for c in 0..chunks {
            let base = c * 8;
            for l in 0..8 {
                acc[l] += g[base + l] * row[base + l];
            }
        }
        let mut s = F::zero();
        for l in 0..8 {
            s += acc[l];
        }
        for j in chunks * 8..cols {
            s += g[j] * row[j];
        }
        out[i] += s;
    }
}

/// Output spatial size of a convolution axis.
pub fn conv_out(len: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "input extent {len} (+2*{pad} pad) smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds `x[c, h, w]` into `cols[c*kh*kw, oh*ow]` (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    cols: &mut [F],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let ncols = oh * ow;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ch * kh + ki) * kw + kj) * ncols..][..ncols];
                for oi in 0..oh {
                    let yi = (oi + ki) as isize - ph as isize;
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if yi < 0 || yi >= h as isize {
                        for v in dst.iter_mut() {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let src_row = &xc[yi as usize * w..(yi as usize + 1) * w];
                    for (oj, v) in dst.iter_mut().enumerate() {
                        let xj = (oj + kj) as isize - pw as isize;
                        *v = if xj < 0 || xj >= w as isize {
                            F::zero()
                        } else {
                            src_row[xj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adds the columns matrix back into `dx[c, h, w]`: adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    dx: &mut [F],
) {
    let ncols = oh * ow;
    for ch in 0..c {
        let dxc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ch * kh + ki) * kw + kj) * ncols..][..ncols];
                for oi in 0..oh {
                    let yi = (oi + ki) as isize - ph as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dxc[yi as usize * w..(yi as usize + 1) * w];
                    let src = &row[oi * ow..(oi + 1) * ow];
                    for (oj, &v) in src.iter().enumerate() {
                        let xj = (oj + kj) as isize - pw as isize;
                        if xj >= 0 && xj < w as isize {
                            dst_row[xj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling over the trailing two axes of `x[c, h, w]`.
/// Ties pick the first element in row-major window order. Returns argmax as
/// flat indices into `x`.
pub fn maxpool2d<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out: &mut [F],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / kh, w / kw);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_idx = 0u32;
                for ki in 0..kh {
                    let row = (ch * h + oi * kh + ki) * w + oj * kw;
                    for kj in 0..kw {
                        let v = x[row + kj];
                        if v > best {
                            best = v;
                            best_idx = (row + kj) as u32;
                        }
                    }
                }
                let o = (ch * oh + oi) * ow + oj;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// log(sum(exp(xs))) with the max trick; -inf inputs are handled exactly.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let mut m = F::neg_infinity();
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m == F::neg_infinity() {
        return m;
    }
    let mut s = F::zero();
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// In place log-softmax over contiguous rows of length `k`.
pub fn log_softmax_rows<F: Scalar>(data: &mut [F], k: usize) {
    debug_assert_eq!(data.len() % k, 0);
    for row in data.chunks_mut(k) {
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[3], &[2, 3]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape(&[2], &[3]).is_err());
    }

    #[test]
    fn zip_broadcast_channel_pattern() {
        // [2,3] * [3]: b index cycles over the last axis.
        let mut seen = Vec::new();
        zip_broadcast(&[2, 3], &[3], &[2, 3], |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![
                (0, 0, 0),
                (1, 1, 1),
                (2, 2, 2),
                (3, 3, 0),
                (4, 4, 1),
                (5, 5, 2)
            ]
        );
    }

    #[test]
    fn reduce_into_sums_broadcast_axes() {
        // src [2,3] reduced into dst [1,3] sums rows.
        let src = [1.0f64, 2.0, 3.0, 10.0, 20.0, 30.0];
        let mut dst = [0.0f64; 3];
        reduce_into(&src, &[2, 3], &mut dst, &[1, 3]);
        assert_eq!(dst, [11.0, 22.0, 33.0]);
        // src [2,3] reduced into scalar-shaped [1,1].
        let mut s = [0.0f64];
        reduce_into(&src, &[2, 3], &mut s, &[1, 1]);
        assert_eq!(s[0], 66.0);
    }

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, no pad: cols equal the input.
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let mut cols = vec![0.0f32; 4];
        im2col(&x, 1, 2, 2, 1, 1, 0, 0, 2, 2, &mut cols);
        assert_eq!(cols, x);
    }

    #[test]
    fn im2col_col2im_roundtrip_counts_multiplicity() {
        // 3x3 kernel pad 1 over 2x2: col2im(im2col(x)) multiplies each pixel
        // by the number of windows covering it (all 4 here).
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mut cols = vec![0.0f64; 9 * 4];
        im2col(&x, 1, 2, 2, 3, 3, 1, 1, 2, 2, &mut cols);
        let mut back = vec![0.0f64; 4];
        col2im_add(&cols, 1, 2, 2, 3, 3, 1, 1, 2, 2, &mut back);
        assert_eq!(back, vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn maxpool_tie_takes_first() {
        let x = [5.0f32, 5.0, 5.0, 5.0];
        let mut out = [0.0f32; 1];
        let mut arg = [0u32; 1];
        maxpool2d(&x, 1, 2, 2, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 5.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn lse_handles_neg_infinity() {
        assert_eq!(log_sum_exp::<f64>(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        let v = log_sum_exp::<f64>(&[0.0, f64::NEG_INFINITY]);
        assert!((v - 0.0).abs() < 1e-15);
        let v2 = log_sum_exp::<f64>(&[(2.0f64).ln(), (2.0f64).ln()]);
        assert!((v2 - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dot_rows_matches_naive() {
        let w: Vec<f64> = (0..3 * 19).map(|i| (i as f64) * 0.1 - 2.0).collect();
        let g: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let mut out = vec![0.0f64; 3];
        dot_rows(&mut out, &g, &w, 3, 19);
        for i in 0..3 {
            let naive: f64 = (0..19).map(|j| g[j] * w[i * 19 + j]).sum();
            assert!((out[i] - naive).abs() < 1e-12);
        }
    }
}

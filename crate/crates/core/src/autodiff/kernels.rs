//! Raw array kernels (forward and adjoint) behind the graph operations.
//!
//! Feature maps are NHWC: `(batch, height, width, channels)`. Convolution
//! weights are `(c_out, k_h, k_w, c_in / groups)` with zero "same" padding
//! and unit stride; kernel sizes are odd.

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, IxDyn};

use crate::scalar::Scalar;

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected an NHWC tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

pub(crate) fn contiguous<T: Scalar>(a: &ArrayD<T>) -> std::borrow::Cow<'_, [T]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// Unfolds `x` into rows of receptive fields, `(n*h*w, kh*kw*c)`.
pub(crate) fn im2col<T: Scalar>(x: &ArrayD<T>, kh: usize, kw: usize) -> Array2<T> {
    let (n, h, w, c) = dims4(x.shape());
    let xs = contiguous(x);
    let (ph, pw) = (kh / 2, kw / 2);
    let k = kh * kw * c;
    let mut cols = vec![T::zero(); n * h * w * k];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * h * w, k), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: folds receptive-field rows back onto the map.
pub(crate) fn col2im<T: Scalar>(
    cols: &Array2<T>,
    shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
) -> ArrayD<T> {
    let (n, h, w, c) = shape;
    let (ph, pw) = (kh / 2, kw / 2);
    let k = kh * kw * c;
    let cs = cols.as_slice().expect("standard layout cols");
    let mut out = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * kw + kx) * c;
                        for ci in 0..c {
                            out[dst + ci] = out[dst + ci] + cs[src + ci];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), out).expect("col2im shape")
}

fn weight_matrix<T: Scalar>(w: &ArrayD<T>) -> ArrayView2<'_, T> {
    let cout = w.shape()[0];
    let k = w.len() / cout;
    w.view()
        .into_shape_with_order((cout, k))
        .expect("conv weight must be in standard layout")
}

/// Convolution output plus the unfolded input kept for the backward pass
/// (only for ungrouped convolutions).
pub(crate) struct ConvForward<T> {
    pub out: ArrayD<T>,
    pub cols: Option<Array2<T>>,
}

pub(crate) fn conv2d<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: Option<&ArrayD<T>>,
    groups: usize,
) -> ConvForward<T> {
    let (n, h, wd, c) = dims4(x.shape());
    let (cout, kh, kw, cg) = dims4(w.shape());
    assert_eq!(cg * groups, c, "conv input channels {c} vs weight {cg}x{groups}");
    assert_eq!(cout % groups, 0, "conv output channels not divisible by groups");
    if groups == 1 {
        let cols = im2col(x, kh, kw);
        let wm = weight_matrix(w);
        let mut out = Array2::<T>::zeros((n * h * wd, cout));
        if let Some(b) = b {
            let bs = contiguous(b);
            for mut row in out.rows_mut() {
                for (o, &bv) in row.iter_mut().zip(bs.iter()) {
                    *o = bv;
                }
            }
            general_mat_mul(T::one(), &cols, &wm.t(), T::one(), &mut out);
        } else {
            general_mat_mul(T::one(), &cols, &wm.t(), T::zero(), &mut out);
        }
        let out = out
            .into_shape_with_order(IxDyn(&[n, h, wd, cout]))
            .expect("conv output shape");
        return ConvForward { out, cols: Some(cols) };
    }
    let og = cout / groups;
    let xs = contiguous(x);
    let ws = contiguous(w);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); n * h * wd * cout];
    if let Some(b) = b {
        let bs = contiguous(b);
        for px in out.chunks_mut(cout) {
            px.copy_from_slice(&bs);
        }
    }
    for bi in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                let o = ((bi * h + y) * wd + xx) * cout;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * wd + sx as usize) * c;
                        for co in 0..cout {
                            let g = co / og;
                            let wrow = ((co * kh + ky) * kw + kx) * cg;
                            let xin = &xs[src + g * cg..src + (g + 1) * cg];
                            let wk = &ws[wrow..wrow + cg];
                            let mut acc = T::zero();
                            for i in 0..cg {
                                acc = acc + wk[i] * xin[i];
                            }
                            out[o + co] = out[o + co] + acc;
                        }
                    }
                }
            }
        }
    }
    ConvForward {
        out: ArrayD::from_shape_vec(IxDyn(&[n, h, wd, cout]), out).expect("conv shape"),
        cols: None,
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    groups: usize,
    cols: Option<&Array2<T>>,
    dy: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (n, h, wd, c) = dims4(x.shape());
    let (cout, kh, kw, cg) = dims4(w.shape());
    let dys = contiguous(dy);
    let mut db = vec![T::zero(); cout];
    for px in dys.chunks(cout) {
        for (d, &g) in db.iter_mut().zip(px) {
            *d = *d + g;
        }
    }
    let db = ArrayD::from_shape_vec(IxDyn(&[cout]), db).expect("bias grad");
    if groups == 1 {
        let owned;
        let cols = match cols {
            Some(c) => c,
            None => {
                owned = im2col(x, kh, kw);
                &owned
            }
        };
        let dy2 = ArrayView2::from_shape((n * h * wd, cout), &dys).expect("dy as matrix");
        let wm = weight_matrix(w);
        let k = kh * kw * c;
        let mut dw = Array2::<T>::zeros((cout, k));
        general_mat_mul(T::one(), &dy2.t(), cols, T::zero(), &mut dw);
        let mut dcols = Array2::<T>::zeros((n * h * wd, k));
        general_mat_mul(T::one(), &dy2, &wm, T::zero(), &mut dcols);
        let dx = col2im(&dcols, (n, h, wd, c), kh, kw);
        let dw = dw
            .into_shape_with_order(IxDyn(&[cout, kh, kw, cg]))
            .expect("weight grad shape");
        return (dx, dw, db);
    }
    let og = cout / groups;
    let xs = contiguous(x);
    let ws = contiguous(w);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for bi in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                let o = ((bi * h + y) * wd + xx) * cout;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = xx as isize + kx as isize - pw as isize;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * wd + sx as usize) * c;
                        for co in 0..cout {
                            let g = dys[o + co];
                            let grp = co / og;
                            let wrow = ((co * kh + ky) * kw + kx) * cg;
                            let xoff = src + grp * cg;
                            for i in 0..cg {
                                dw[wrow + i] = dw[wrow + i] + g * xs[xoff + i];
                                dx[xoff + i] = dx[xoff + i] + g * ws[wrow + i];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(x.shape()), dx).expect("dx"),
        ArrayD::from_shape_vec(IxDyn(w.shape()), dw).expect("dw"),
        db,
    )
}

/// Rearranges channel groups into space: input channel `c*sh*sw + i*sw + j`
/// lands at spatial offset `(i, j)` of output channel `c`.
pub(crate) fn pixel_shuffle<T: Scalar>(x: &ArrayD<T>, sh: usize, sw: usize) -> ArrayD<T> {
    let (n, h, w, cin) = dims4(x.shape());
    let c = cin / (sh * sw);
    let xs = contiguous(x);
    let (ho, wo) = (h * sh, w * sw);
    let mut out = vec![T::zero(); xs.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((b * h + y) * w + xx) * cin;
                for co in 0..c {
                    for i in 0..sh {
                        for j in 0..sw {
                            let dst = ((b * ho + y * sh + i) * wo + xx * sw + j) * c + co;
                            out[dst] = xs[src + co * sh * sw + i * sw + j];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, ho, wo, c]), out).expect("shuffle shape")
}

/// Exact inverse of [`pixel_shuffle`] (and its adjoint).
pub(crate) fn pixel_unshuffle<T: Scalar>(x: &ArrayD<T>, sh: usize, sw: usize) -> ArrayD<T> {
    let (n, ho, wo, c) = dims4(x.shape());
    let (h, w) = (ho / sh, wo / sw);
    let cin = c * sh * sw;
    let xs = contiguous(x);
    let mut out = vec![T::zero(); xs.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((b * h + y) * w + xx) * cin;
                for co in 0..c {
                    for i in 0..sh {
                        for j in 0..sw {
                            let src = ((b * ho + y * sh + i) * wo + xx * sw + j) * c + co;
                            out[dst + co * sh * sw + i * sw + j] = xs[src];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, h, w, cin]), out).expect("unshuffle shape")
}

/// Interpolation taps `(lo, hi, frac)` for half-pixel-centred upsampling.
fn bilinear_taps(size: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..size * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(size - 1);
            let hi = if lo + 1 < size { lo + 1 } else { lo };
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_upsample<T: Scalar>(x: &ArrayD<T>, sh: usize, sw: usize) -> ArrayD<T> {
    let (n, h, w, c) = dims4(x.shape());
    let (ho, wo) = (h * sh, w * sw);
    let ty = bilinear_taps(h, sh);
    let tx = bilinear_taps(w, sw);
    let xs = contiguous(x);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let dst = ((b * ho + oy) * wo + ox) * c;
                let p00 = ((b * h + y0) * w + x0) * c;
                let p01 = ((b * h + y0) * w + x1) * c;
                let p10 = ((b * h + y1) * w + x0) * c;
                let p11 = ((b * h + y1) * w + x1) * c;
                for ci in 0..c {
                    out[dst + ci] = gy * (gx * xs[p00 + ci] + fx * xs[p01 + ci])
                        + fy * (gx * xs[p10 + ci] + fx * xs[p11 + ci]);
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, ho, wo, c]), out).expect("bilinear shape")
}

pub(crate) fn bilinear_upsample_backward<T: Scalar>(
    dy: &ArrayD<T>,
    in_shape: &[usize],
    sh: usize,
    sw: usize,
) -> ArrayD<T> {
    let (n, h, w, c) = dims4(in_shape);
    let (ho, wo) = (h * sh, w * sw);
    let ty = bilinear_taps(h, sh);
    let tx = bilinear_taps(w, sw);
    let ds = contiguous(dy);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let src = ((b * ho + oy) * wo + ox) * c;
                let taps = [
                    (((b * h + y0) * w + x0) * c, gy * gx),
                    (((b * h + y0) * w + x1) * c, gy * fx),
                    (((b * h + y1) * w + x0) * c, fy * gx),
                    (((b * h + y1) * w + x1) * c, fy * fx),
                ];
                for (p, wt) in taps {
                    for ci in 0..c {
                        dx[p + ci] = dx[p + ci] + wt * ds[src + ci];
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), dx).expect("bilinear grad shape")
}

/// Normalised 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a single-channel plane, `(h, w)` to
/// `(h - k + 1, w - k + 1)`.
pub fn filter_valid<T: Scalar>(plane: &[T], h: usize, w: usize, win: &[T]) -> Vec<T> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = T::zero();
            for (i, &g) in win.iter().enumerate() {
                acc = acc + g * plane[y * w + x + i];
            }
            tmp[y * wo + x] = acc;
        }
    }
    let mut out = vec![T::zero(); ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = T::zero();
            for (i, &g) in win.iter().enumerate() {
                acc = acc + g * tmp[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a `(h - k + 1, w - k + 1)` map back
/// onto `(h, w)`.
pub fn filter_valid_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, win: &[T]) -> Vec<T> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * wo];
    for y in 0..ho {
        for x in 0..wo {
            let v = g[y * wo + x];
            for (i, &gw) in win.iter().enumerate() {
                tmp[(y + i) * wo + x] = tmp[(y + i) * wo + x] + gw * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..wo {
            let v = tmp[y * wo + x];
            for (i, &gw) in win.iter().enumerate() {
                out[y * w + x + i] = out[y * w + x + i] + gw * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        Array::from_shape_vec(IxDyn(shape), (0..n).map(|i| i as f64 * 0.37 - 3.0).collect())
            .unwrap()
    }

    #[test]
    fn shuffle_unshuffle_round_trip() {
        let x = ramp(&[2, 3, 4, 12]);
        let y = pixel_shuffle(&x, 2, 3);
        assert_eq!(y.shape(), &[2, 6, 12, 2]);
        assert_eq!(pixel_unshuffle(&y, 2, 3), x);
    }

    #[test]
    fn grouped_conv_matches_blockwise_dense_conv() {
        let x = ramp(&[1, 4, 5, 4]).mapv(|v| (v * 0.3).sin());
        let w = ramp(&[4, 3, 3, 2]).mapv(|v| (v * 0.7).cos());
        let grouped = conv2d(&x, &w, None, 2).out;
        // Embed into a dense block-diagonal kernel.
        let mut dense = ArrayD::<f64>::zeros(IxDyn(&[4, 3, 3, 4]));
        for co in 0..4 {
            let g = co / 2;
            for ky in 0..3 {
                for kx in 0..3 {
                    for i in 0..2 {
                        dense[[co, ky, kx, g * 2 + i]] = w[[co, ky, kx, i]];
                    }
                }
            }
        }
        let full = conv2d(&x, &dense, None, 1).out;
        for (a, b) in grouped.iter().zip(full.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_keeps_constants() {
        let x = ArrayD::from_elem(IxDyn(&[1, 3, 2, 2]), 0.25f64);
        let y = bilinear_upsample(&x, 2, 3);
        assert_eq!(y.shape(), &[1, 6, 6, 2]);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn filter_adjoint_identity() {
        // <F a, b> == <a, F^T b>
        let (h, w) = (13, 15);
        let win: Vec<f64> = gaussian_window(5, 1.5);
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 7) % 11) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..(h - 4) * (w - 4)).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let fa = filter_valid(&a, h, w, &win);
        let ftb = filter_valid_adjoint(&b, h, w, &win);
        let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&ftb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

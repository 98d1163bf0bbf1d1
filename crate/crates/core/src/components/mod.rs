//! Interchangeable model parts: positional encodings, stems, upsample
//! blocks, skips and the head, plus the model that chains them.

mod block;
pub mod config;
mod model;
pub mod presets;
mod stem;

use ndarray::{ArrayD, IxDyn};

pub use block::{BlockContext, UpsampleBlock};
pub use config::{
    BlockKind, BlockSpec, EncodingSpec, FinalActivation, FuseKind, ModelConfig, NormKind, SkipKind, SkipSpec,
    StemSpec,
};
pub use model::{final_activation_graph, ForwardVars, Head, NervModel};
pub use stem::{Dense, Encoding, Stem};

use crate::autodiff::{kernels, LerpTap};
use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;

/// Interleaved `[sin(b^0 pi t), cos(b^0 pi t), sin(b^1 pi t), ...]`.
pub fn sinusoidal_encode(t: f64, base: f64, length: usize) -> Result<Vec<f64>> {
    if !(base > 1.0) {
        return config_err(format!("sinusoidal base must be > 1, got {base}"));
    }
    if length == 0 {
        return config_err("sinusoidal length must be >= 1");
    }
    let mut out = Vec::with_capacity(2 * length);
    for i in 0..length {
        let arg = base.powi(i as i32) * std::f64::consts::PI * t;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Time taps for a grid with `frames` slices.
pub fn grid_tap(t: f64, frames: usize) -> Result<LerpTap> {
    if frames < 2 {
        return config_err(format!("temporal grid needs at least 2 frames, got {frames}"));
    }
    if !(0.0..=1.0).contains(&t) {
        return config_err(format!("normalised time {t} outside [0, 1]"));
    }
    let pos = t * (frames - 1) as f64;
    let lo = (pos.floor() as usize).min(frames - 2);
    Ok(LerpTap { lo, hi: lo + 1, frac: pos - lo as f64 })
}

/// Linear interpolation of a `(T_g, h, w, c)` grid at time `t`.
pub fn grid_encode<T: Scalar>(t: f64, grid: &ArrayD<T>) -> Result<ArrayD<T>> {
    if grid.ndim() != 4 {
        return shape_err(format!("grid must be (T_g, h, w, c), got {:?}", grid.shape()));
    }
    let tap = grid_tap(t, grid.shape()[0])?;
    let (a, b) = (T::of(1.0 - tap.frac), T::of(tap.frac));
    let lo = grid.index_axis(ndarray::Axis(0), tap.lo);
    let hi = grid.index_axis(ndarray::Axis(0), tap.hi);
    Ok(ndarray::Zip::from(&lo).and(&hi).map_collect(|&l, &h| a * l + b * h).into_dyn())
}

fn lift<T: Scalar>(x: &ArrayD<T>) -> Result<(ArrayD<T>, bool)> {
    match x.ndim() {
        3 => {
            let s = x.shape();
            Ok((x.to_owned().into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]])).expect("lift"), true))
        }
        4 => Ok((x.to_owned(), false)),
        _ => shape_err(format!("expected (h, w, c) or (n, h, w, c), got {:?}", x.shape())),
    }
}

fn lower<T: Scalar>(x: ArrayD<T>, squeeze: bool) -> ArrayD<T> {
    if squeeze {
        x.index_axis_move(ndarray::Axis(0), 0)
    } else {
        x
    }
}

/// `(h, w, c*sh*sw) -> (h*sh, w*sw, c)`; also accepts an NHWC batch.
pub fn pixel_shuffle<T: Scalar>(x: &ArrayD<T>, sh: usize, sw: usize) -> Result<ArrayD<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if sh == 0 || sw == 0 || c % (sh * sw) != 0 {
        return shape_err(format!("{c} channels not divisible by stride {sh}x{sw}"));
    }
    let (b, squeeze) = lift(x)?;
    Ok(lower(kernels::pixel_shuffle(&b, sh, sw), squeeze))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &ArrayD<T>, sh: usize, sw: usize) -> Result<ArrayD<T>> {
    let s = x.shape();
    if s.len() < 3 || sh == 0 || sw == 0 || s[s.len() - 3] % sh != 0 || s[s.len() - 2] % sw != 0 {
        return shape_err(format!("map {s:?} not divisible by stride {sh}x{sw}"));
    }
    let (b, squeeze) = lift(x)?;
    Ok(lower(kernels::pixel_unshuffle(&b, sh, sw), squeeze))
}

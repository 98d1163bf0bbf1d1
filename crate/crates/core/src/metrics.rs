//! Reconstruction quality: PSNR and multi-scale SSIM.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{filter_valid, gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::error::{shape_err, NervError, Result};
use crate::scalar::Scalar;
use crate::video::{frame_f64, VideoTensor};

/// Finite stand-in for an exact reconstruction when PSNR is written to files.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Standard five-scale exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Smallest frame side supporting five scales with an 11-tap window.
pub const MS_SSIM_MIN_SIDE: usize = SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrMode {
    /// Average per-frame MSE, then convert once.
    #[default]
    MeanMse,
    /// Average of per-frame PSNR values.
    MeanFramePsnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetric {
    pub psnr: f64,
    pub ms_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    /// Absent when the frames are too small for the scale pyramid.
    pub ms_ssim: Option<f64>,
    pub per_frame: Option<Vec<FrameMetric>>,
}

impl MetricReport {
    /// PSNR with the infinite case replaced by [`PSNR_CAP_DB`].
    pub fn psnr_capped(&self) -> f64 {
        cap_psnr(self.psnr)
    }
}

pub fn cap_psnr(db: f64) -> f64 {
    if db.is_finite() {
        db.min(PSNR_CAP_DB)
    } else {
        PSNR_CAP_DB
    }
}

fn check_shapes<T: Scalar>(pred: &VideoTensor<T>, target: &VideoTensor<T>) -> Result<()> {
    if pred.frames().dim() != target.frames().dim() {
        return shape_err(format!(
            "prediction {:?} vs target {:?}",
            pred.frames().dim(),
            target.frames().dim()
        ));
    }
    Ok(())
}

fn mse_to_psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn frame_mse<T: Scalar>(pred: &VideoTensor<T>, target: &VideoTensor<T>) -> Result<Vec<f64>> {
    check_shapes(pred, target)?;
    Ok((0..pred.num_frames())
        .map(|i| {
            let (a, b) = (pred.frame(i), target.frame(i));
            let sum: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum();
            sum / a.len() as f64
        })
        .collect())
}

/// Peak signal-to-noise ratio on the unit range; `+inf` for identical input.
pub fn psnr<T: Scalar>(pred: &VideoTensor<T>, target: &VideoTensor<T>) -> Result<f64> {
    psnr_with_mode(pred, target, PsnrMode::MeanMse)
}

pub fn psnr_with_mode<T: Scalar>(pred: &VideoTensor<T>, target: &VideoTensor<T>, mode: PsnrMode) -> Result<f64> {
    let mses = frame_mse(pred, target)?;
    Ok(match mode {
        PsnrMode::MeanMse => mse_to_psnr(mses.iter().sum::<f64>() / mses.len() as f64),
        PsnrMode::MeanFramePsnr => {
            mses.iter().map(|&m| mse_to_psnr(m)).sum::<f64>() / mses.len() as f64
        }
    })
}

fn downsample(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (p.nrows() / 2, p.ncols() / 2);
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.25 * (p[[2 * y, 2 * x]] + p[[2 * y + 1, 2 * x]] + p[[2 * y, 2 * x + 1]] + p[[2 * y + 1, 2 * x + 1]])
    })
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn ssim_terms(x: &Array2<f64>, y: &Array2<f64>, win: &[f64]) -> (f64, f64) {
    let (h, w) = x.dim();
    let xs = x.as_standard_layout();
    let ys = y.as_standard_layout();
    let xv = xs.as_slice().unwrap();
    let yv = ys.as_slice().unwrap();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(xv, h, w, win);
    let my = filter_valid(yv, h, w, win);
    let exx = filter_valid(&sq(xv, xv), h, w, win);
    let eyy = filter_valid(&sq(yv, yv), h, w, win);
    let exy = filter_valid(&sq(xv, yv), h, w, win);
    let n = mx.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let c = (2.0 * sxy + SSIM_C2) / (sxx + syy + SSIM_C2);
        let l = (2.0 * ux * uy + SSIM_C1) / (ux * ux + uy * uy + SSIM_C1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

fn ms_ssim_plane(x: Array2<f64>, y: Array2<f64>, win: &[f64]) -> f64 {
    let (mut x, mut y) = (x, y);
    let mut value = 1.0;
    let last = MS_SSIM_WEIGHTS.len() - 1;
    for (scale, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, win);
        let term = if scale == last { ssim } else { cs };
        value *= term.max(0.0).powf(weight);
        if scale != last {
            x = downsample(&x);
            y = downsample(&y);
        }
    }
    value
}

/// MS-SSIM of one `(H, W, 3)` frame pair, averaged over colour channels.
pub fn ms_ssim_frame(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    let (h, w, c) = a.dim();
    if a.dim() != b.dim() {
        return shape_err(format!("frame {:?} vs {:?}", a.dim(), b.dim()));
    }
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(NervError::Config(format!(
            "MS-SSIM needs frames of at least {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE}, got {h}x{w}"
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let total: f64 = (0..c)
        .map(|ch| {
            ms_ssim_plane(
                a.slice(s![.., .., ch]).to_owned(),
                b.slice(s![.., .., ch]).to_owned(),
                &win,
            )
        })
        .sum();
    Ok((total / c as f64).clamp(0.0, 1.0))
}

/// Multi-scale structural similarity averaged over frames.
pub fn ms_ssim<T: Scalar>(pred: &VideoTensor<T>, target: &VideoTensor<T>) -> Result<f64> {
    Ok(ms_ssim_per_frame(pred, target)?.iter().sum::<f64>() / pred.num_frames() as f64)
}

pub fn ms_ssim_per_frame<T: Scalar>(pred: &VideoTensor<T>, target: &VideoTensor<T>) -> Result<Vec<f64>> {
    check_shapes(pred, target)?;
    (0..pred.num_frames())
        .map(|i| ms_ssim_frame(&frame_f64(pred.frame(i)), &frame_f64(target.frame(i))))
        .collect()
}

/// Full report; MS-SSIM is left empty when the resolution is too small.
pub fn evaluate<T: Scalar>(pred: &VideoTensor<T>, target: &VideoTensor<T>, per_frame: bool) -> Result<MetricReport> {
    let psnr = psnr(pred, target)?;
    let (h, w) = pred.resolution();
    let frames_ms = if h.min(w) >= MS_SSIM_MIN_SIDE { Some(ms_ssim_per_frame(pred, target)?) } else { None };
    let ms = frames_ms.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64);
    let per_frame = per_frame.then(|| {
        frame_mse(pred, target)
            .expect("shapes checked")
            .into_iter()
            .enumerate()
            .map(|(i, m)| FrameMetric { psnr: mse_to_psnr(m), ms_ssim: frames_ms.as_ref().map(|v| v[i]) })
            .collect()
    });
    Ok(MetricReport { psnr, ms_ssim: ms, per_frame })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn video(f: impl Fn(usize, usize, usize, usize) -> f64, dims: (usize, usize, usize)) -> VideoTensor<f64> {
        let (t, h, w) = dims;
        VideoTensor::new(Array4::from_shape_fn((t, h, w, 3), |(a, b, c, d)| f(a, b, c, d)), 25.0, "v").unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let target = video(|_, _, _, _| 0.0, (2, 4, 4));
        let half = video(|_, _, _, _| 0.5, (2, 4, 4));
        assert!((psnr(&half, &target).unwrap() - 6.020_599_913).abs() < 1e-6);
        let off = video(|_, _, _, _| 0.1, (2, 4, 4));
        assert!((psnr(&off, &target).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&target, &target).unwrap(), f64::INFINITY);
        assert_eq!(cap_psnr(f64::INFINITY), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_modes_differ_on_uneven_error() {
        let target = video(|_, _, _, _| 0.0, (2, 2, 2));
        let pred = video(|t, _, _, _| if t == 0 { 0.1 } else { 0.01 }, (2, 2, 2));
        let a = psnr_with_mode(&pred, &target, PsnrMode::MeanMse).unwrap();
        let b = psnr_with_mode(&pred, &target, PsnrMode::MeanFramePsnr).unwrap();
        assert!((a - 10.0 * (1.0f64 / 0.00505).log10()).abs() < 1e-9);
        assert!((b - 30.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = video(|_, _, _, _| 0.0, (1, 2, 2));
        let b = video(|_, _, _, _| 0.0, (1, 2, 3));
        assert!(matches!(psnr(&a, &b), Err(NervError::Shape(_))));
    }

    #[test]
    fn ms_ssim_small_frames_error_names_minimum() {
        let a = video(|_, _, _, _| 0.3, (1, 64, 64));
        let err = ms_ssim(&a, &a).unwrap_err().to_string();
        assert!(err.contains("176x176"), "{err}");
    }

    #[test]
    fn ms_ssim_self_similarity_and_ordering() {
        let tex = video(|_, y, x, c| (((x / 3 + y / 5 + c) % 4) as f64) / 3.0, (1, 176, 180));
        assert!((ms_ssim(&tex, &tex).unwrap() - 1.0).abs() < 1e-9);
        let flat = video(|_, _, _, _| 0.5, (1, 176, 180));
        assert!(ms_ssim(&flat, &tex).unwrap() < 1.0 - 1e-6);
    }
}

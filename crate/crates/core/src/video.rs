//! Frame sequences used as regression targets.

use ndarray::{s, Array3, Array4, ArrayD, ArrayView3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{data_err, Result};
use crate::scalar::Scalar;

/// A clip of RGB frames `(T, H, W, 3)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<T> {
    frames: Array4<T>,
    pub frame_rate: f64,
    pub name: String,
}

impl<T: Scalar> VideoTensor<T> {
    pub fn new(frames: Array4<T>, frame_rate: f64, name: impl Into<String>) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t == 0 || h == 0 || w == 0 {
            return data_err(format!("video must have T, H, W >= 1, got ({t}, {h}, {w})"));
        }
        if c != 3 {
            return data_err(format!("video must have 3 colour channels, got {c}"));
        }
        if let Some(bad) = frames.iter().find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one())) {
            return data_err(format!("pixel value {bad} outside [0, 1]"));
        }
        Ok(VideoTensor { frames, frame_rate, name: name.into() })
    }

    pub fn frames(&self) -> &Array4<T> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, T> {
        self.frames.slice(s![i, .., .., ..])
    }

    /// Normalised timestamp `i / (T - 1)`; a single frame maps to 0.
    pub fn timestamp(&self, i: usize) -> f64 {
        normalized_time(i, self.num_frames())
    }

    /// Frames `idx` stacked as an NHWC batch.
    pub fn batch(&self, idx: &[usize]) -> ArrayD<T> {
        let (_, h, w, c) = self.frames.dim();
        let mut out = Array4::<T>::zeros((idx.len(), h, w, c));
        for (o, &i) in idx.iter().enumerate() {
            out.slice_mut(s![o, .., .., ..]).assign(&self.frame(i));
        }
        out.into_dyn()
    }

    /// Sub-clip of frames `start..start + len`.
    pub fn clip(&self, start: usize, len: usize) -> Result<VideoTensor<T>> {
        if start + len > self.num_frames() || len == 0 {
            return data_err(format!(
                "clip {start}..{} out of range for {} frames",
                start + len,
                self.num_frames()
            ));
        }
        VideoTensor::new(
            self.frames.slice(s![start..start + len, .., .., ..]).to_owned(),
            self.frame_rate,
            format!("{}[{start}..{}]", self.name, start + len),
        )
    }

    pub fn cast<U: Scalar>(&self) -> VideoTensor<U> {
        VideoTensor {
            frames: self.frames.mapv(|v| U::of(v.f64())),
            frame_rate: self.frame_rate,
            name: self.name.clone(),
        }
    }

    /// Builds a video from an NHWC batch, clamping values into `[0, 1]`.
    pub fn from_batch(batch: &ArrayD<T>, frame_rate: f64, name: impl Into<String>) -> Result<Self> {
        let shape = batch.shape();
        if shape.len() != 4 {
            return data_err(format!("expected an NHWC batch, got shape {shape:?}"));
        }
        let frames = batch
            .mapv(|v| if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) })
            .into_shape_with_order((shape[0], shape[1], shape[2], shape[3]))
            .map_err(|e| crate::NervError::Shape(e.to_string()))?;
        VideoTensor::new(frames, frame_rate, name)
    }

    /// Smooth procedural clip: a drifting colour gradient with a few
    /// Gaussian blobs moving on linear paths. Deterministic in `seed`.
    pub fn synthetic(frames: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        struct Blob {
            start: (f64, f64),
            velocity: (f64, f64),
            radius: f64,
            colour: [f64; 3],
        }
        let blobs: Vec<Blob> = (0..3)
            .map(|_| Blob {
                start: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
                velocity: (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                radius: rng.random_range(0.08..0.18),
                colour: [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
            })
            .collect();
        let phase: [f64; 3] = [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)];
        let mut data = Array4::<T>::zeros((frames, height, width, 3));
        for t in 0..frames {
            let tn = normalized_time(t, frames);
            for y in 0..height {
                let yn = (y as f64 + 0.5) / height as f64;
                for x in 0..width {
                    let xn = (x as f64 + 0.5) / width as f64;
                    for c in 0..3 {
                        let mut v = 0.5
                            + 0.2 * (2.0 * xn + 1.5 * yn + phase[c] + 0.8 * tn).sin()
                            + 0.1 * (3.0 * yn - 2.0 * xn + phase[(c + 1) % 3]).cos();
                        for b in &blobs {
                            let cx = b.start.0 + b.velocity.0 * tn;
                            let cy = b.start.1 + b.velocity.1 * tn;
                            let d2 = (xn - cx).powi(2) + (yn - cy).powi(2);
                            v += b.colour[c] * (-d2 / (2.0 * b.radius * b.radius)).exp();
                        }
                        data[[t, y, x, c]] = T::of(v.clamp(0.0, 1.0));
                    }
                }
            }
        }
        VideoTensor { frames: data, frame_rate: 25.0, name: format!("synthetic-{seed}") }
    }
}

pub fn normalized_time(index: usize, total: usize) -> f64 {
    if total <= 1 {
        0.0
    } else {
        index as f64 / (total - 1) as f64
    }
}

/// Single frame helper used by metric code: `(H, W, 3)` view as owned `f64`.
pub(crate) fn frame_f64<T: Scalar>(v: ArrayView3<'_, T>) -> Array3<f64> {
    v.mapv(|e| e.f64())
}

/// Reshapes a `(H, W, C)` array into a one-frame NHWC batch.
pub fn as_batch<T: Scalar>(frame: ArrayView3<'_, T>) -> ArrayD<T> {
    let (h, w, c) = frame.dim();
    frame.to_owned().into_shape_with_order(IxDyn(&[1, h, w, c])).expect("frame as batch")
}

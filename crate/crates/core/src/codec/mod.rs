//! Model compression: k-bit quantization, arithmetic coding, bitstream
//! serialization, bits-per-pixel accounting and rate-distortion curves.

mod arith;
mod bitstream;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub use arith::{entropy_decode, entropy_encode, FrequencyTable, TABLE_TOTAL};
pub use bitstream::{compress_model, decompress_model, Bitstream, CodedTensor, BITSTREAM_MAGIC};

use crate::error::{config_err, data_err, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Bit widths accepted by [`quantize`].
pub const BIT_RANGE: std::ops::RangeInclusive<u8> = 4..=8;

/// Symmetric per-tensor quantization of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub symbols: Vec<i32>,
    /// `max|x| / (2^(k-1) - 1)`, or 0 for an all-zero tensor.
    pub scale: f64,
    pub bits: u8,
}

impl QuantizedTensor {
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }
}

fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !BIT_RANGE.contains(&bits) {
        return config_err(format!("bit width must be in 4..=8, got {bits}"));
    }
    Ok(())
}

/// Quantizes with round-half-to-even onto `[-qmax, qmax]`.
pub fn quantize<T: Scalar>(x: &ArrayD<T>, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let mut max = 0.0f64;
    for &v in x.iter() {
        let v = v.f64();
        if !v.is_finite() {
            return data_err(format!("cannot quantize non-finite value {v}"));
        }
        max = max.max(v.abs());
    }
    let q = qmax(bits);
    let scale = if max == 0.0 { 0.0 } else { max / q as f64 };
    let symbols = if scale == 0.0 {
        vec![0; x.len()]
    } else {
        x.iter().map(|&v| ((v.f64() / scale).round_ties_even() as i32).clamp(-q, q)).collect()
    };
    Ok(QuantizedTensor { shape: x.shape().to_vec(), symbols, scale, bits })
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor) -> ArrayD<T> {
    let data = q.symbols.iter().map(|&s| T::of(s as f64 * q.scale)).collect();
    ArrayD::from_shape_vec(IxDyn(&q.shape), data).expect("quantized tensor shape")
}

/// Every parameter replaced by its quantize/dequantize reconstruction.
pub fn quantize_params<T: Scalar>(params: &ParamStore<T>, bits: u8) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (name, value) in params.iter() {
        out.add(name, dequantize(&quantize(value, bits)?));
    }
    Ok(out)
}

/// Bits per pixel of `total_bits` spread over a `frames x height x width` video.
pub fn bpp(total_bits: u64, frames: usize, height: usize, width: usize) -> Result<f64> {
    let pixels = frames * height * width;
    if pixels == 0 {
        return config_err("bpp needs a non-empty video");
    }
    Ok(total_bits as f64 / pixels as f64)
}

/// Uncoded size: every parameter stored at `bits`.
pub fn raw_bpp(num_params: usize, bits: u8, frames: usize, height: usize, width: usize) -> Result<f64> {
    bpp(num_params as u64 * bits as u64, frames, height, width)
}

/// One measured rate-distortion pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
    pub preset: String,
    pub bits: u8,
}

impl RdPoint {
    pub fn new(bpp: f64, quality: f64, preset: impl Into<String>, bits: u8) -> Self {
        RdPoint { bpp, quality, preset: preset.into(), bits }
    }
}

/// Sorts by size and drops every point that does not improve on the quality
/// of all smaller points.
pub fn rd_curve(points: &[RdPoint]) -> Vec<RdPoint> {
    let mut sorted: Vec<&RdPoint> =
        points.iter().filter(|p| p.bpp > 0.0 && p.bpp.is_finite() && p.quality.is_finite()).collect();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(b.quality.total_cmp(&a.quality)));
    let mut out: Vec<RdPoint> = Vec::new();
    for p in sorted {
        match out.last() {
            Some(last) if p.bpp <= last.bpp || p.quality <= last.quality => {}
            _ => out.push(p.clone()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_four_bits() {
        let x = ArrayD::from_shape_vec(IxDyn(&[5]), vec![-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let q = quantize(&x, 4).unwrap();
        assert!((q.scale - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(q.symbols, vec![-7, -4, 0, 4, 7]);
    }

    #[test]
    fn zero_tensor_is_lossless() {
        let x = ArrayD::<f32>::zeros(IxDyn(&[3, 4]));
        let q = quantize(&x, 6).unwrap();
        assert_eq!(q.scale, 0.0);
        assert!(q.symbols.iter().all(|&s| s == 0));
        assert_eq!(dequantize::<f32>(&q), x);
    }

    #[test]
    fn extreme_maps_to_qmax() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, -2.5, 1.0]).unwrap();
        let q = quantize(&x, 8).unwrap();
        assert_eq!(q.symbols[1], -127);
        assert!(quantize(&x, 3).is_err() && quantize(&x, 9).is_err());
    }

    #[test]
    fn bpp_closed_forms() {
        assert_eq!(bpp(1, 1, 1, 1).unwrap(), 1.0);
        assert!((raw_bpp(2448, 8, 8, 256, 256).unwrap() - 19584.0 / 524288.0).abs() < 1e-15);
        assert!(bpp(8, 0, 1, 1).is_err());
    }

    #[test]
    fn rd_hand_example() {
        let pts = [RdPoint::new(0.1, 30.0, "a", 8), RdPoint::new(0.2, 29.0, "a", 7), RdPoint::new(0.3, 35.0, "a", 6)];
        let kept: Vec<(f64, f64)> = rd_curve(&pts).iter().map(|p| (p.bpp, p.quality)).collect();
        assert_eq!(kept, vec![(0.1, 30.0), (0.3, 35.0)]);
        assert_eq!(rd_curve(&pts[..1]), pts[..1].to_vec());
    }
}

//! Per-clip bitstream and the hyper-network file.
//!
//! Clip bitstream layout (little-endian):
//!
//! | field         | bytes                                          |
//! |---------------|------------------------------------------------|
//! | magic         | `NRVH`                                         |
//! | version       | u8 = 1                                         |
//! | layout hash   | 32 raw SHA-256 bytes                           |
//! | masked        | u8 (0 or 1)                                    |
//! | bits          | u8                                             |
//! | layer count   | u16 (modulated layers only)                    |
//! | per layer     | u16 layer index, coded tensor header (name, shape, scale, table, payload length) |
//! | payloads      | concatenated in layer order                    |

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;

use super::layout::HypoLayout;
use super::network::{apply_mask, HyperConfig, HyperNerv};
use crate::codec::{bpp, check_bits, dequantize, quantize, CodedTensor};
use crate::error::{data_err, NervError, Result};
use crate::scalar::Scalar;
use crate::trainer::checkpoint::{read_hash, read_store, read_str32, truncated, write_hash, write_store, write_str32};
use crate::video::VideoTensor;

pub const CLIP_MAGIC: &[u8; 4] = b"NRVH";
pub const HYPER_MAGIC: &[u8; 4] = b"NRVN";
const VERSION: u8 = 1;

/// Quantized, entropy-coded weight tokens of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBitstream {
    pub layout_hash: String,
    pub masked: bool,
    pub bits: u8,
    /// `(layer index, coded (stored tokens, token_dim) block)`.
    pub layers: Vec<(usize, CodedTensor)>,
}

/// Result of [`encode_clip`].
#[derive(Clone, Debug)]
pub struct EncodedClip {
    pub bitstream: ClipBitstream,
    /// Set when masking was requested from a network not trained with it.
    pub warning: Option<String>,
}

impl ClipBitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLIP_MAGIC);
        out.push(VERSION);
        write_hash(&mut out, &self.layout_hash);
        out.push(self.masked as u8);
        out.push(self.bits);
        out.write_u16::<LittleEndian>(self.layers.len() as u16).expect("vec write");
        for (i, t) in &self.layers {
            out.write_u16::<LittleEndian>(*i as u16).expect("vec write");
            t.write_header(&mut out);
        }
        for (_, t) in &self.layers {
            out.extend_from_slice(&t.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != CLIP_MAGIC {
            return data_err("not a clip bitstream (bad magic)");
        }
        let version = cur.read_u8().map_err(|_| truncated("version"))?;
        if version != VERSION {
            return data_err(format!("unsupported clip bitstream version {version}"));
        }
        let layout_hash = read_hash(&mut cur)?;
        let masked = match cur.read_u8().map_err(|_| truncated("mask flag"))? {
            0 => false,
            1 => true,
            other => return data_err(format!("invalid mask flag {other}")),
        };
        let bits = cur.read_u8().map_err(|_| truncated("bits"))?;
        check_bits(bits).map_err(|e| NervError::Data(e.to_string()))?;
        let n = cur.read_u16::<LittleEndian>().map_err(|_| truncated("layer count"))? as usize;
        let mut headers = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = cur.read_u16::<LittleEndian>().map_err(|_| truncated("layer index"))? as usize;
            headers.push((idx, CodedTensor::read_header(&mut cur)?));
        }
        let mut layers = Vec::with_capacity(n);
        for (idx, (mut t, len)) in headers {
            t.read_payload(&mut cur, len)?;
            layers.push((idx, t));
        }
        if cur.position() as usize != bytes.len() {
            return data_err("trailing bytes after clip payload");
        }
        Ok(ClipBitstream { layout_hash, masked, bits, layers })
    }

    pub fn total_bytes(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn payload_bytes(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.payload.len()).sum()
    }

    /// Token elements stored in this bitstream.
    pub fn stored_params(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.shape.iter().product::<usize>()).sum()
    }

    /// Stored tokens at `bits` each, per pixel of the clip.
    pub fn raw_bpp(&self, frames: usize, height: usize, width: usize) -> Result<f64> {
        bpp(self.stored_params() as u64 * self.bits as u64, frames, height, width)
    }

    /// Whole file size per pixel of the clip.
    pub fn coded_bpp(&self, frames: usize, height: usize, width: usize) -> Result<f64> {
        bpp(self.total_bytes() as u64 * 8, frames, height, width)
    }

    pub fn check_layout(&self, layout: &HypoLayout) -> Result<()> {
        if self.layout_hash != layout.hash() {
            return Err(NervError::HashMismatch { expected: layout.hash(), found: self.layout_hash.clone() });
        }
        Ok(())
    }

    /// Dequantized stored tokens per layer.
    pub fn tokens<T: Scalar>(&self, layout: &HypoLayout) -> Result<Vec<Option<ArrayD<T>>>> {
        self.check_layout(layout)?;
        let mut out: Vec<Option<ArrayD<T>>> = vec![None; layout.layers.len()];
        for (idx, t) in &self.layers {
            let Some(layer) = layout.layers.get(*idx) else {
                return data_err(format!("bitstream references layer {idx} beyond the layout"));
            };
            let want = [layer.stored_tokens(self.masked), layer.token_dim];
            if t.shape != want {
                return data_err(format!("layer {idx}: stored tokens {:?}, layout expects {want:?}", t.shape));
            }
            out[*idx] = Some(dequantize(&t.decode(self.bits)?));
        }
        for (i, l) in layout.layers.iter().enumerate() {
            if l.is_modulated() && out[i].is_none() {
                return data_err(format!("bitstream lacks tokens for modulated layer {i}"));
            }
        }
        Ok(out)
    }
}

/// Predicts tokens for `clip`, keeps the first half per layer when
/// `mask_on`, and codes them at `bits`.
pub fn encode_clip<T: Scalar>(net: &HyperNerv<T>, clip: &VideoTensor<T>, mask_on: bool, bits: u8) -> Result<EncodedClip> {
    check_bits(bits)?;
    let warning = (mask_on && !net.mask_trained())
        .then(|| "masked encoding requested from a network trained without masking; quality is not guaranteed".to_string());
    let stored = apply_mask(&net.predict_tokens(clip)?, net.layout(), mask_on);
    let mut layers = Vec::new();
    for (i, t) in stored.iter().enumerate() {
        if let Some(t) = t {
            layers.push((i, CodedTensor::encode(&format!("layer{i}"), &quantize(t, bits)?)?));
        }
    }
    let bitstream = ClipBitstream { layout_hash: net.layout().hash(), masked: mask_on, bits, layers };
    Ok(EncodedClip { bitstream, warning })
}

/// Renders the clip from the coded tokens and the network's shared parameters.
pub fn decode_clip<T: Scalar>(bitstream: &ClipBitstream, net: &HyperNerv<T>) -> Result<VideoTensor<T>> {
    let tokens = bitstream.tokens::<T>(net.layout())?;
    let frames = net.render_tokens(&tokens, bitstream.masked)?;
    VideoTensor::from_batch(&frames, 25.0, "decoded")
}

/// Serialises layout, backbone config, mask-training flag and all parameters.
pub fn encode_hypernet<T: Scalar>(net: &HyperNerv<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HYPER_MAGIC);
    out.push(VERSION);
    out.push(T::BYTES as u8);
    write_str32(&mut out, &net.layout().to_json());
    write_str32(&mut out, &serde_json::to_string(net.config()).expect("config serialises"));
    out.push(net.mask_trained() as u8);
    write_store(&mut out, net.params());
    out
}

pub fn decode_hypernet<T: Scalar>(bytes: &[u8]) -> Result<HyperNerv<T>> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != HYPER_MAGIC {
        return data_err("not a hyper-network file (bad magic)");
    }
    let version = cur.read_u8().map_err(|_| truncated("version"))?;
    if version != VERSION {
        return data_err(format!("unsupported hyper-network version {version}"));
    }
    let width = cur.read_u8().map_err(|_| truncated("scalar width"))? as usize;
    if width != 4 && width != 8 {
        return data_err(format!("unsupported scalar width {width}"));
    }
    let layout: HypoLayout =
        serde_json::from_str(&read_str32(&mut cur)?).map_err(|e| NervError::Data(format!("layout: {e}")))?;
    let config: HyperConfig =
        serde_json::from_str(&read_str32(&mut cur)?).map_err(|e| NervError::Data(format!("hyper config: {e}")))?;
    let mask_trained = cur.read_u8().map_err(|_| truncated("mask flag"))? != 0;
    let store = read_store::<T>(&mut cur, width)?;
    let mut net = HyperNerv::<T>::new(&layout, &config, 0)?.with_params(store)?;
    net.set_mask_trained(mask_trained);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::quantize;

    fn setup() -> (HyperNerv<f64>, VideoTensor<f64>) {
        let net = HyperNerv::new(&HypoLayout::desk(), &HyperConfig::desk(), 5).unwrap();
        (net, VideoTensor::synthetic(8, 32, 32, 1))
    }

    #[test]
    fn decode_equals_forward_of_quantized_tokens() {
        let (net, clip) = setup();
        for mask in [false, true] {
            let enc = encode_clip(&net, &clip, mask, 8).unwrap();
            assert_eq!(enc.warning.is_some(), mask);
            let bs = ClipBitstream::from_bytes(&enc.bitstream.to_bytes()).unwrap();
            assert_eq!(bs, enc.bitstream);
            let q: Vec<_> = apply_mask(&net.predict_tokens(&clip).unwrap(), net.layout(), mask)
                .into_iter()
                .map(|t| t.map(|t| dequantize::<f64>(&quantize(&t, 8).unwrap())))
                .collect();
            let direct = net.render_tokens(&q, mask).unwrap();
            assert_eq!(decode_clip(&bs, &net).unwrap().frames().clone().into_dyn(), direct.mapv(|v| v.clamp(0.0, 1.0)));
            assert_eq!(bs.stored_params(), net.layout().unique_param_count(mask));
        }
    }

    #[test]
    fn masked_stream_is_about_half() {
        let (net, clip) = setup();
        let full = encode_clip(&net, &clip, false, 8).unwrap().bitstream;
        let half = encode_clip(&net, &clip, true, 8).unwrap().bitstream;
        assert_eq!(half.stored_params() * 2, full.stored_params());
        let ratio = half.payload_bytes() as f64 / full.payload_bytes() as f64;
        assert!((0.4..0.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn shared_params_never_serialised() {
        let (net, clip) = setup();
        let bs = encode_clip(&net, &clip, false, 8).unwrap().bitstream;
        assert!(bs.layers.iter().all(|(_, t)| t.name.starts_with("layer")));
        assert!(bs.total_bytes() < net.shared_param_count());
        let mut other = net.clone();
        let w = other.hypo_layers()[3].weight;
        other.params_mut().get_mut(w).mapv_inplace(|v| v * 0.5);
        assert_ne!(decode_clip(&bs, &net).unwrap(), decode_clip(&bs, &other).unwrap());
    }

    #[test]
    fn foreign_layout_and_network_file() {
        let (net, clip) = setup();
        let bs = encode_clip(&net, &clip, false, 8).unwrap().bitstream;
        let mut layout = HypoLayout::desk();
        layout.mask_fill = crate::hypernerv::MaskFill::Repeat;
        let other = HyperNerv::<f64>::new(&layout, &HyperConfig::desk(), 5).unwrap();
        assert!(matches!(decode_clip(&bs, &other), Err(NervError::HashMismatch { .. })));
        let back = decode_hypernet::<f64>(&encode_hypernet(&net)).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.layout(), net.layout());
    }
}

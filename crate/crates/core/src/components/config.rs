//! Declarative model description and its on-disk schema.
//!
//! Configs are TOML documents. Every polymorphic section carries an explicit
//! `kind` field:
//!
//! ```toml
//! name = "rnerv-desk"
//! target_resolution = [64, 128]
//! exp = 4.0
//! r = 1.2
//! head_kernel = 3
//! final_activation = "sigmoid"
//!
//! [encoding]
//! kind = "temporal_grid"
//! grid_frames = 4
//! grid_shape = [4, 8, 9]
//!
//! [stem]
//! kind = "stemless"
//! out_shape = [4, 8, 9]
//!
//! [skip]
//! kind = "t_skip"
//! fuse = "affine_modulate"
//! norm_before_fuse = true
//!
//! [[blocks]]
//! kind = "ffnerv_double"
//! stride = [2, 2]
//! in_channels = 9
//! out_channels = 36
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::budget::plan_widths;
use crate::error::{config_err, NervError, Result};

pub const DEFAULT_BASE: f64 = 1.25;
pub const DEFAULT_LENGTH: usize = 80;
/// Floor applied to every derived channel width.
pub const MIN_WIDTH: usize = 4;

fn default_base() -> f64 {
    DEFAULT_BASE
}
fn default_length() -> usize {
    DEFAULT_LENGTH
}
fn default_xy_length() -> usize {
    8
}
fn default_kernel() -> usize {
    3
}
fn default_t_length() -> usize {
    8
}
fn default_grid_frames() -> usize {
    2
}
fn default_grid_dim() -> usize {
    4
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_heads() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncodingSpec {
    /// Sinusoids of `t` only.
    SinusoidalT {
        #[serde(default = "default_base")]
        base: f64,
        #[serde(default = "default_length")]
        length: usize,
    },
    /// Sinusoids of `t` plus a per-cell encoding of normalised `(x, y)`.
    SinusoidalXyT {
        #[serde(default = "default_base")]
        base: f64,
        #[serde(default = "default_length")]
        length: usize,
        #[serde(default = "default_xy_length")]
        xy_length: usize,
    },
    /// Learnable feature grid interpolated linearly along time.
    TemporalGrid { grid_frames: usize, grid_shape: [usize; 3] },
}

impl EncodingSpec {
    /// Width of the vector encoding (zero for grids).
    pub fn vector_dim(&self) -> usize {
        match self {
            EncodingSpec::SinusoidalT { length, .. } | EncodingSpec::SinusoidalXyT { length, .. } => 2 * length,
            EncodingSpec::TemporalGrid { .. } => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StemSpec {
    Mlp { hidden_dims: Vec<usize>, out_shape: [usize; 3] },
    SingleFc { out_shape: [usize; 3] },
    TransformerXy {
        dim: usize,
        #[serde(default = "default_heads")]
        heads: usize,
        out_shape: [usize; 3],
    },
    Stemless { out_shape: [usize; 3] },
}

impl StemSpec {
    pub fn out_shape(&self) -> [usize; 3] {
        match self {
            StemSpec::Mlp { out_shape, .. }
            | StemSpec::SingleFc { out_shape }
            | StemSpec::TransformerXy { out_shape, .. }
            | StemSpec::Stemless { out_shape } => *out_shape,
        }
    }

    fn out_shape_mut(&mut self) -> &mut [usize; 3] {
        match self {
            StemSpec::Mlp { out_shape, .. }
            | StemSpec::SingleFc { out_shape }
            | StemSpec::TransformerXy { out_shape, .. }
            | StemSpec::Stemless { out_shape } => out_shape,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Convolution, PixelShuffle, activation.
    NervBasic,
    /// Group-wise convolution in front of a basic block.
    FfnervDouble,
    /// Bilinear upsampling followed by a convolution.
    BilinearConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    None,
    LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub stride: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub norm: NormKind,
    /// Groups of the leading group-wise convolution; absent means depthwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(default = "default_kernel")]
    pub group_kernel: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, stride: [usize; 2], in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind,
            stride,
            in_channels,
            out_channels,
            kernel_size: 3,
            activation: Activation::Gelu,
            norm: NormKind::None,
            groups: None,
            group_kernel: 3,
        }
    }

    pub fn upsample(&self) -> usize {
        self.stride[0] * self.stride[1]
    }

    /// Output channels of the main convolution (before any PixelShuffle).
    pub fn conv_out_channels(&self) -> usize {
        match self.kind {
            BlockKind::NervBasic | BlockKind::FfnervDouble => self.out_channels * self.upsample(),
            BlockKind::BilinearConv => self.out_channels,
        }
    }

    pub fn group_count(&self) -> usize {
        self.groups.unwrap_or(self.in_channels)
    }

    /// Channel width at which a local-grid skip is added.
    pub fn skip_channels(&self) -> usize {
        match self.kind {
            BlockKind::BilinearConv => self.in_channels,
            _ => self.out_channels,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    #[default]
    None,
    /// Per-block FC of a `t` encoding fused into the block features.
    TSkip,
    /// Per-block learnable grid projected and added after upsampling.
    LocalGrid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseKind {
    Add,
    #[default]
    AffineModulate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipSpec {
    pub kind: SkipKind,
    #[serde(default)]
    pub fuse: FuseKind,
    #[serde(default)]
    pub norm_before_fuse: bool,
    /// Frequency pairs of the `t` encoding feeding the skip FCs.
    #[serde(default = "default_t_length")]
    pub t_length: usize,
    #[serde(default = "default_base")]
    pub t_base: f64,
    #[serde(default = "default_grid_frames")]
    pub grid_frames: usize,
    #[serde(default = "default_grid_dim")]
    pub grid_dim: usize,
}

impl Default for SkipSpec {
    fn default() -> Self {
        SkipSpec {
            kind: SkipKind::None,
            fuse: FuseKind::AffineModulate,
            norm_before_fuse: false,
            t_length: default_t_length(),
            t_base: DEFAULT_BASE,
            grid_frames: default_grid_frames(),
            grid_dim: default_grid_dim(),
        }
    }
}

impl SkipSpec {
    pub fn t_skip(fuse: FuseKind, norm_before_fuse: bool) -> Self {
        SkipSpec { kind: SkipKind::TSkip, fuse, norm_before_fuse, ..SkipSpec::default() }
    }

    pub fn local_grid(grid_frames: usize, grid_dim: usize) -> Self {
        SkipSpec { kind: SkipKind::LocalGrid, grid_frames, grid_dim, ..SkipSpec::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Sigmoid,
    /// `(tanh(x) + 1) / 2`.
    TanhShift,
    /// `x + 0.5`.
    AddHalf,
}

impl FinalActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FinalActivation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            FinalActivation::TanhShift => (x.tanh() + 1.0) / 2.0,
            FinalActivation::AddHalf => x + 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// `(H, W)` of the frames the model renders.
    pub target_resolution: [usize; 2],
    /// First block width as a multiple of `fc_dim`.
    pub exp: f64,
    /// Width reduction from one block to the next.
    pub r: f64,
    pub encoding: EncodingSpec,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub skip: SkipSpec,
    #[serde(default = "default_kernel")]
    pub head_kernel: usize,
    pub final_activation: FinalActivation,
}

impl ModelConfig {
    /// `(fc_h, fc_w, fc_dim)` of the stem output.
    pub fn fc_shape(&self) -> [usize; 3] {
        self.stem.out_shape()
    }

    pub fn fc_dim(&self) -> usize {
        self.fc_shape()[2]
    }

    pub fn stride_product(&self) -> (usize, usize) {
        self.blocks.iter().fold((1, 1), |(a, b), blk| (a * blk.stride[0], b * blk.stride[1]))
    }

    /// Channels entering the head.
    pub fn head_channels(&self) -> usize {
        self.blocks.last().map_or(self.fc_dim(), |b| b.out_channels)
    }

    /// Spatial size `(h, w)` at the input of each block.
    pub fn block_input_sizes(&self) -> Vec<(usize, usize)> {
        let [h, w, _] = self.fc_shape();
        let mut size = (h, w);
        self.blocks
            .iter()
            .map(|b| {
                let cur = size;
                size = (size.0 * b.stride[0], size.1 * b.stride[1]);
                cur
            })
            .collect()
    }

    /// Recomputes every block width from `fc_dim`, `exp` and `r`.
    pub fn replan(&mut self) {
        let widths = plan_widths(self.fc_dim(), self.exp, self.r, self.blocks.len());
        let mut prev = self.fc_dim();
        for (b, &w) in self.blocks.iter_mut().zip(&widths) {
            let depthwise = b.groups.is_none() || b.groups == Some(b.in_channels);
            b.in_channels = prev;
            b.out_channels = w;
            if depthwise {
                b.groups = None;
            }
            prev = w;
        }
    }

    /// Copy with a different `fc_dim`; a grid encoding tied to the stem
    /// output follows it, and block widths are re-planned.
    pub fn with_fc_dim(&self, fc_dim: usize) -> ModelConfig {
        let mut c = self.clone();
        let old = c.fc_dim();
        c.stem.out_shape_mut()[2] = fc_dim;
        if let EncodingSpec::TemporalGrid { grid_shape, .. } = &mut c.encoding {
            if grid_shape[2] == old {
                grid_shape[2] = fc_dim;
            }
        }
        c.replan();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let [fh, fw, fd] = self.fc_shape();
        if fh == 0 || fw == 0 || fd == 0 {
            return config_err(format!("stem out_shape {:?} must be positive", self.fc_shape()));
        }
        if !(self.exp >= 1.0) || !(self.r >= 1.0) {
            return config_err(format!("exp ({}) and r ({}) must be >= 1", self.exp, self.r));
        }
        match &self.encoding {
            EncodingSpec::SinusoidalT { base, length } | EncodingSpec::SinusoidalXyT { base, length, .. } => {
                if !(*base > 1.0) {
                    return config_err(format!("encoding base must be > 1, got {base}"));
                }
                if *length == 0 {
                    return config_err("encoding length must be >= 1");
                }
            }
            EncodingSpec::TemporalGrid { grid_frames, grid_shape } => {
                if *grid_frames < 2 {
                    return config_err(format!("temporal_grid needs grid_frames >= 2, got {grid_frames}"));
                }
                if grid_shape.iter().any(|&d| d == 0) {
                    return config_err(format!("grid_shape {grid_shape:?} must be positive"));
                }
            }
        }
        match (&self.stem, &self.encoding) {
            (StemSpec::Stemless { out_shape }, EncodingSpec::TemporalGrid { grid_shape, .. }) => {
                if out_shape != grid_shape {
                    return config_err(format!(
                        "stemless requires grid_shape {grid_shape:?} == out_shape {out_shape:?}"
                    ));
                }
            }
            (StemSpec::Stemless { .. }, _) => return config_err("stemless requires a temporal_grid encoding"),
            (StemSpec::TransformerXy { dim, heads, .. }, enc) => {
                if !matches!(enc, EncodingSpec::SinusoidalXyT { .. }) {
                    return config_err("transformer_xy stem requires a sinusoidal_xy_t encoding");
                }
                if *heads == 0 || *dim == 0 || dim % heads != 0 {
                    return config_err(format!("transformer_xy dim {dim} must be a positive multiple of heads {heads}"));
                }
            }
            (StemSpec::Mlp { hidden_dims, .. }, enc) => {
                if hidden_dims.iter().any(|&d| d == 0) {
                    return config_err("mlp hidden_dims must be positive");
                }
                if enc.vector_dim() == 0 {
                    return config_err("mlp stem needs a sinusoidal encoding");
                }
            }
            (StemSpec::SingleFc { .. }, enc) => {
                if enc.vector_dim() == 0 {
                    return config_err("single_fc stem needs a sinusoidal encoding");
                }
            }
        }
        let mut prev = fd;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != prev {
                return config_err(format!("block {i}: in_channels {} != previous width {prev}", b.in_channels));
            }
            if b.in_channels == 0 || b.out_channels == 0 {
                return config_err(format!("block {i}: channel counts must be >= 1"));
            }
            if b.stride[0] == 0 || b.stride[1] == 0 {
                return config_err(format!("block {i}: stride {:?} must be positive", b.stride));
            }
            if b.kernel_size % 2 == 0 || b.group_kernel % 2 == 0 {
                return config_err(format!("block {i}: kernel sizes must be odd"));
            }
            if b.kind == BlockKind::FfnervDouble {
                let g = b.group_count();
                if g == 0 || b.in_channels % g != 0 {
                    return config_err(format!("block {i}: {} channels not divisible into {g} groups", b.in_channels));
                }
            }
            prev = b.out_channels;
        }
        if self.head_kernel % 2 == 0 {
            return config_err("head_kernel must be odd");
        }
        let (sh, sw) = self.stride_product();
        let [th, tw] = self.target_resolution;
        if fh * sh != th || fw * sw != tw {
            return config_err(format!(
                "stride product {sh}x{sw} times fc {fh}x{fw} gives {}x{}, target resolution is {th}x{tw}",
                fh * sh,
                fw * sw
            ));
        }
        match self.skip.kind {
            SkipKind::TSkip if self.skip.t_length == 0 || !(self.skip.t_base > 1.0) => {
                return config_err("t_skip needs t_length >= 1 and t_base > 1")
            }
            SkipKind::LocalGrid if self.skip.grid_frames < 2 || self.skip.grid_dim == 0 => {
                return config_err("local_grid needs grid_frames >= 2 and grid_dim >= 1")
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable content digest (hex SHA-256 of the canonical JSON form).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// Parses and validates a TOML config. Errors carry line/column and the
    /// offending key.
    pub fn from_toml_str(text: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| NervError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn from_json(text: &str) -> Result<ModelConfig> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| NervError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

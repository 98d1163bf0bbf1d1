use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::components::FinalActivation;
use crate::error::{config_err, Result};

/// How a masked layer fills the positions of its dropped tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// Dropped tokens read as zero; the repeat factor is unchanged.
    #[default]
    Zero,
    /// Kept tokens tile the whole layer, repeating twice as often.
    Repeat,
}

/// One conv + pixel-shuffle layer of the hypo-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypoLayer {
    pub kernel: usize,
    pub upscale: [usize; 2],
    pub in_channels: usize,
    /// Channels after the pixel shuffle.
    pub out_channels: usize,
    pub tokens_max: usize,
    pub tokens_min: usize,
    pub token_dim: usize,
}

impl HypoLayer {
    /// `(out * sh * sw, k, k, in)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        let [sh, sw] = self.upscale;
        [self.out_channels * sh * sw, self.kernel, self.kernel, self.in_channels]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.weight_shape()[0]
    }

    pub fn is_modulated(&self) -> bool {
        self.tokens_max > 0
    }

    /// Tokens stored per clip.
    pub fn stored_tokens(&self, masked: bool) -> usize {
        if masked {
            self.tokens_min
        } else {
            self.tokens_max
        }
    }

    /// Layer weights per stored token element, if integral.
    pub fn repeat_factor(&self, tokens: usize) -> Option<usize> {
        let unit = tokens * self.token_dim;
        (unit > 0 && self.weight_count() % unit == 0).then(|| self.weight_count() / unit)
    }
}

/// Shape of the hypo-network and of the weight tokens that modulate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypoLayout {
    pub name: String,
    pub clip_frames: usize,
    /// Spatial size of the learnable input embedding.
    pub base: [usize; 2],
    pub pos_dim: usize,
    pub fc_dim: usize,
    pub layers: Vec<HypoLayer>,
    pub activation: Activation,
    pub final_activation: FinalActivation,
    #[serde(default)]
    pub mask_fill: MaskFill,
}

pub const NORM_EPS: f64 = 1e-6;

impl HypoLayout {
    /// Four-layer NeRV-style hypo-network: `pos_dim -> fc -> fc -> fc -> 3`.
    #[allow(clippy::too_many_arguments)]
    pub fn nerv(
        name: &str,
        clip_frames: usize,
        base: [usize; 2],
        pos_dim: usize,
        fc_dim: usize,
        kernels: [usize; 4],
        upscales: [usize; 4],
        tokens_max: [usize; 4],
        tokens_min: [usize; 4],
        token_dims: [usize; 4],
    ) -> Self {
        let chans = [pos_dim, fc_dim, fc_dim, fc_dim, 3];
        let layers = (0..4)
            .map(|i| HypoLayer {
                kernel: kernels[i],
                upscale: [upscales[i], upscales[i]],
                in_channels: chans[i],
                out_channels: chans[i + 1],
                tokens_max: tokens_max[i],
                tokens_min: tokens_min[i],
                token_dim: token_dims[i],
            })
            .collect();
        HypoLayout {
            name: name.to_string(),
            clip_frames,
            base,
            pos_dim,
            fc_dim,
            layers,
            activation: Activation::Gelu,
            final_activation: FinalActivation::Sigmoid,
            mask_fill: MaskFill::Zero,
        }
    }

    /// 8x256x256 clips, `fc_dim` 20, tokens (4, 80, 16, 0) x (256, 240, 240, 0).
    pub fn fc20() -> Self {
        let t = [4, 80, 16, 0];
        Self::nerv("hypo-fc20", 8, [1, 1], 16, 20, [1, 3, 3, 3], [4; 4], t, t, [256, 240, 240, 0])
    }

    /// The 85.6k-parameter hypo-network with `fc_dim` 16.
    pub fn fc16() -> Self {
        let t = [4, 64, 16, 0];
        Self::nerv("hypo-fc16", 8, [1, 1], 16, 16, [1, 3, 3, 3], [4; 4], t, t, [256, 288, 288, 0])
    }

    /// Larger weight-masking model.
    pub fn masking_large() -> Self {
        Self::nerv(
            "hypo-mask-large",
            8,
            [1, 1],
            16,
            16,
            [1, 3, 3, 3],
            [4; 4],
            [2, 64, 8, 0],
            [1, 32, 4, 0],
            [256, 144, 72, 0],
        )
    }

    /// Smaller weight-masking model.
    pub fn masking_small() -> Self {
        Self::nerv(
            "hypo-mask-small",
            8,
            [1, 1],
            16,
            16,
            [1, 3, 3, 3],
            [4; 4],
            [0, 32, 4, 0],
            [0, 16, 2, 0],
            [256, 144, 72, 0],
        )
    }

    /// 8x32x32 clips for tests and laptops.
    pub fn desk() -> Self {
        Self::nerv("hypo-desk", 8, [2, 2], 8, 16, [1, 3, 3, 3], [2; 4], [2, 16, 8, 0], [1, 8, 4, 0], [64, 72, 72, 0])
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Some(match name {
            "hypo-fc20" => Self::fc20(),
            "hypo-fc16" => Self::fc16(),
            "hypo-mask-large" => Self::masking_large(),
            "hypo-mask-small" => Self::masking_small(),
            "hypo-desk" => Self::desk(),
            _ => return None,
        })
    }

    /// `(H, W)` of the rendered frames.
    pub fn output_size(&self) -> [usize; 2] {
        self.layers
            .iter()
            .fold(self.base, |[h, w], l| [h * l.upscale[0], w * l.upscale[1]])
    }

    /// Weight-token elements stored per clip.
    pub fn unique_param_count(&self, masked: bool) -> usize {
        self.layers.iter().map(|l| l.stored_tokens(masked) * l.token_dim).sum()
    }

    /// Conv weights and biases of the hypo-network.
    pub fn hypo_param_count(&self) -> usize {
        self.layers.iter().map(HypoLayer::param_count).sum()
    }

    /// True when some layer stores fewer tokens under masking.
    pub fn supports_masking(&self) -> bool {
        self.layers.iter().any(|l| l.tokens_min < l.tokens_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return config_err("hypo layout needs at least one layer");
        }
        if self.clip_frames == 0 || self.base.contains(&0) || self.pos_dim == 0 {
            return config_err("hypo layout needs positive clip_frames, base and pos_dim");
        }
        let mut prev = self.pos_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != prev {
                return config_err(format!("layer {i}: in_channels {} but previous layer gives {prev}", l.in_channels));
            }
            prev = l.out_channels;
            if l.kernel % 2 == 0 || l.upscale.contains(&0) || l.out_channels == 0 {
                return config_err(format!("layer {i}: kernel must be odd and upscale/channels positive"));
            }
            if l.tokens_min > l.tokens_max {
                return config_err(format!("layer {i}: tokens_min {} > tokens_max {}", l.tokens_min, l.tokens_max));
            }
            if l.tokens_max > 0 && l.token_dim == 0 {
                return config_err(format!("layer {i}: modulated layer needs token_dim > 0"));
            }
            for count in [l.tokens_max, l.tokens_min] {
                if count > 0 && l.repeat_factor(count).is_none() {
                    return config_err(format!(
                        "layer {i}: {} weights are not a multiple of {count} tokens x {}",
                        l.weight_count(),
                        l.token_dim
                    ));
                }
            }
            if self.mask_fill == MaskFill::Repeat && l.tokens_max > 0 && l.tokens_min == 0 {
                return config_err(format!("layer {i}: repeat fill needs at least one kept token"));
            }
        }
        if prev != 3 {
            return config_err(format!("last hypo layer must emit 3 channels, got {prev}"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialises")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_layout_counts() {
        let base = HypoLayout::fc20();
        assert_eq!(base.unique_param_count(false), 24_064);
        let reps: Vec<_> = base.layers[..3].iter().map(|l| l.repeat_factor(l.tokens_max).unwrap()).collect();
        assert_eq!(reps, vec![5, 3, 15]);
        assert_eq!(HypoLayout::fc16().hypo_param_count(), 85_552);
        let large = HypoLayout::masking_large();
        assert_eq!((large.unique_param_count(true), large.unique_param_count(false)), (5_152, 10_304));
        let small = HypoLayout::masking_small();
        assert_eq!((small.unique_param_count(true), small.unique_param_count(false)), (2_448, 4_896));
        for l in [base, HypoLayout::fc16(), large, small, HypoLayout::desk()] {
            l.validate().unwrap();
            assert_eq!(l.output_size(), if l.name == "hypo-desk" { [32, 32] } else { [256, 256] });
        }
    }

    #[test]
    fn bad_repeat_factor_is_rejected() {
        let mut l = HypoLayout::desk();
        l.layers[1].token_dim = 70;
        assert!(l.validate().unwrap_err().to_string().contains("not a multiple"));
        let mut r = HypoLayout::masking_small();
        r.mask_fill = MaskFill::Repeat;
        assert!(r.validate().is_ok());
        r.layers[2].tokens_min = 0;
        assert!(r.validate().is_err());
    }
}

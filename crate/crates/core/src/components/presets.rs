//! Reference architectures. Block widths come from `fc_dim`, `exp` and `r`;
//! use [`crate::budget::solve_width`] to size them for a parameter target.

use super::config::*;

/// Strides taking a 9x16 map to 1080x1920.
pub const STRIDES_1080P: [[usize; 2]; 5] = [[5, 5], [3, 3], [2, 2], [2, 2], [2, 2]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizePreset {
    /// 1.5M parameters.
    Small,
    /// 3M parameters.
    Large,
}

impl SizePreset {
    pub fn target_params(self) -> usize {
        match self {
            SizePreset::Small => 1_500_000,
            SizePreset::Large => 3_000_000,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizePreset::Small => "1.5M",
            SizePreset::Large => "3M",
        }
    }
}

fn chain(kind: BlockKind, strides: &[[usize; 2]]) -> Vec<BlockSpec> {
    strides.iter().map(|&s| BlockSpec::new(kind, s, 0, 0)).collect()
}

fn finish(mut cfg: ModelConfig) -> ModelConfig {
    cfg.replan();
    cfg
}

/// Sinusoidal encoding, MLP stem, basic blocks, `r = 2`.
pub fn nerv_1080p() -> ModelConfig {
    finish(ModelConfig {
        name: "nerv".into(),
        target_resolution: [1080, 1920],
        exp: 4.0,
        r: 2.0,
        encoding: EncodingSpec::SinusoidalT { base: DEFAULT_BASE, length: DEFAULT_LENGTH },
        stem: StemSpec::Mlp { hidden_dims: vec![512], out_shape: [9, 16, 24] },
        blocks: chain(BlockKind::NervBasic, &STRIDES_1080P),
        skip: SkipSpec::default(),
        head_kernel: 3,
        final_activation: FinalActivation::Sigmoid,
    })
}

/// Temporal grid, no stem, group-conv blocks.
pub fn ffnerv_1080p() -> ModelConfig {
    finish(ModelConfig {
        name: "ffnerv".into(),
        target_resolution: [1080, 1920],
        exp: 1.0,
        r: 2.0,
        encoding: EncodingSpec::TemporalGrid { grid_frames: 16, grid_shape: [9, 16, 64] },
        stem: StemSpec::Stemless { out_shape: [9, 16, 64] },
        blocks: chain(BlockKind::FfnervDouble, &STRIDES_1080P),
        skip: SkipSpec::default(),
        head_kernel: 3,
        final_activation: FinalActivation::Sigmoid,
    })
}

/// NeRV with normalised temporal skips fused into every block.
pub fn enerv_1080p() -> ModelConfig {
    let mut cfg = nerv_1080p();
    cfg.name = "enerv".into();
    cfg.skip = SkipSpec::t_skip(FuseKind::AffineModulate, true);
    cfg
}

/// NeRV with kernel 1 in the first block and 5 in the others.
pub fn hnerv_ks_1080p() -> ModelConfig {
    let mut cfg = nerv_1080p();
    cfg.name = "nerv-ks15".into();
    override_kernels(&mut cfg, 1, 5);
    cfg
}

/// First block kernel `first`, all later blocks `rest`.
pub fn override_kernels(cfg: &mut ModelConfig, first: usize, rest: usize) {
    for (i, b) in cfg.blocks.iter_mut().enumerate() {
        b.kernel_size = if i == 0 { first } else { rest };
    }
}

/// Group-conv blocks on a stemless temporal grid with normalised temporal
/// skips; `r` is 1.2 for the small size and 1.4 for the large one.
pub fn rnerv_1080p(size: SizePreset) -> ModelConfig {
    let r = match size {
        SizePreset::Small => 1.2,
        SizePreset::Large => 1.4,
    };
    finish(ModelConfig {
        name: format!("rnerv-{}", size.label()),
        target_resolution: [1080, 1920],
        exp: 4.0,
        r,
        encoding: EncodingSpec::TemporalGrid { grid_frames: 16, grid_shape: [9, 16, 16] },
        stem: StemSpec::Stemless { out_shape: [9, 16, 16] },
        blocks: chain(BlockKind::FfnervDouble, &STRIDES_1080P),
        skip: SkipSpec::t_skip(FuseKind::AffineModulate, true),
        head_kernel: 3,
        final_activation: FinalActivation::Sigmoid,
    })
}

/// Small RNeRV for `resolution` divisible by 16 (four 2x stages).
pub fn rnerv_desk(resolution: [usize; 2], fc_dim: usize) -> ModelConfig {
    let fc = [resolution[0] / 16, resolution[1] / 16, fc_dim];
    finish(ModelConfig {
        name: "rnerv-desk".into(),
        target_resolution: resolution,
        exp: 4.0,
        r: 1.2,
        encoding: EncodingSpec::TemporalGrid { grid_frames: 4, grid_shape: fc },
        stem: StemSpec::Stemless { out_shape: fc },
        blocks: chain(BlockKind::FfnervDouble, &[[2, 2]; 4]),
        skip: SkipSpec::t_skip(FuseKind::AffineModulate, true),
        head_kernel: 3,
        final_activation: FinalActivation::Sigmoid,
    })
}

/// Bilinear-upsampling blocks with per-block local grids at desk scale.
pub fn bilinear_desk(resolution: [usize; 2], fc_dim: usize) -> ModelConfig {
    let fc = [resolution[0] / 8, resolution[1] / 8, fc_dim];
    finish(ModelConfig {
        name: "bilinear-desk".into(),
        target_resolution: resolution,
        exp: 2.0,
        r: 1.5,
        encoding: EncodingSpec::TemporalGrid { grid_frames: 3, grid_shape: fc },
        stem: StemSpec::Stemless { out_shape: fc },
        blocks: chain(BlockKind::BilinearConv, &[[2, 2]; 3]),
        skip: SkipSpec::local_grid(2, 2),
        head_kernel: 3,
        final_activation: FinalActivation::Sigmoid,
    })
}

/// Sinusoidal `(x, y, t)` encoding with an attention stem at desk scale.
pub fn transformer_desk(resolution: [usize; 2], fc_dim: usize) -> ModelConfig {
    let fc = [resolution[0] / 8, resolution[1] / 8, fc_dim];
    finish(ModelConfig {
        name: "transformer-desk".into(),
        target_resolution: resolution,
        exp: 2.0,
        r: 1.5,
        encoding: EncodingSpec::SinusoidalXyT { base: DEFAULT_BASE, length: 8, xy_length: 4 },
        stem: StemSpec::TransformerXy { dim: 16, heads: 2, out_shape: fc },
        blocks: chain(BlockKind::NervBasic, &[[2, 2]; 3]),
        skip: SkipSpec::default(),
        head_kernel: 3,
        final_activation: FinalActivation::Sigmoid,
    })
}

/// Solver templates for the three method families at one size.
pub fn reference_templates(size: SizePreset) -> Vec<ModelConfig> {
    vec![nerv_1080p(), ffnerv_1080p(), rnerv_1080p(size)]
}

/// Looks up a preset by name (`nerv`, `ffnerv`, `enerv`, `nerv-ks15`,
/// `rnerv-small`, `rnerv-large`, `rnerv-desk`).
pub fn by_name(name: &str) -> Option<ModelConfig> {
    Some(match name {
        "nerv" => nerv_1080p(),
        "ffnerv" => ffnerv_1080p(),
        "enerv" => enerv_1080p(),
        "nerv-ks15" => hnerv_ks_1080p(),
        "rnerv-small" => rnerv_1080p(SizePreset::Small),
        "rnerv-large" => rnerv_1080p(SizePreset::Large),
        "rnerv-desk" => rnerv_desk([64, 128], 9),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            nerv_1080p(),
            ffnerv_1080p(),
            enerv_1080p(),
            hnerv_ks_1080p(),
            rnerv_1080p(SizePreset::Small),
            rnerv_1080p(SizePreset::Large),
            rnerv_desk([64, 128], 9),
            bilinear_desk([32, 48], 6),
            transformer_desk([32, 48], 6),
        ] {
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
        }
    }

    #[test]
    fn kernel_override() {
        let cfg = hnerv_ks_1080p();
        assert_eq!(cfg.blocks[0].kernel_size, 1);
        assert!(cfg.blocks[1..].iter().all(|b| b.kernel_size == 5));
    }
}

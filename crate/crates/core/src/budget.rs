//! Channel planning, parameter counting and FLOPs estimation.

use serde::{Deserialize, Serialize};

use crate::components::config::{
    BlockKind, BlockSpec, EncodingSpec, FuseKind, ModelConfig, NormKind, SkipKind, StemSpec, MIN_WIDTH,
};
use crate::error::{config_err, NervError, Result};

/// Smallest and largest `fc_dim` the width solver considers.
pub const FC_DIM_RANGE: (usize, usize) = (4, 4096);

/// Per-block widths: `round(fc_dim * exp)`, then `round(ch / r)`, floored at [`MIN_WIDTH`].
pub fn plan_widths(fc_dim: usize, exp: f64, r: f64, blocks: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(blocks);
    let mut ch = ((fc_dim as f64 * exp).round() as usize).max(MIN_WIDTH);
    for _ in 0..blocks {
        out.push(ch);
        ch = ((ch as f64 / r).round() as usize).max(MIN_WIDTH);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub per_layer_channels: Vec<usize>,
    /// Output channels of each main convolution, before any PixelShuffle.
    pub conv_output_channels: Vec<usize>,
    /// Parameters of the block convolutions (group and main).
    pub total_params: usize,
    /// FLOPs per frame of the same convolutions.
    pub total_flops_per_frame: u64,
}

/// Plans block widths for a stem output of `fc_shape = (fc_h, fc_w, fc_dim)`.
/// Kinds, strides and kernels come from `blocks`; their channel fields are ignored.
pub fn plan_channels(fc_shape: [usize; 3], exp: f64, r: f64, blocks: &[BlockSpec]) -> ChannelPlan {
    let widths = plan_widths(fc_shape[2], exp, r, blocks.len());
    let mut prev = fc_shape[2];
    let (mut h, mut w) = (fc_shape[0], fc_shape[1]);
    let mut conv_output_channels = Vec::new();
    let (mut params, mut flops) = (0usize, 0u64);
    for (b, &c) in blocks.iter().zip(&widths) {
        let mut spec = b.clone();
        let depthwise = spec.groups.is_none();
        spec.in_channels = prev;
        spec.out_channels = c;
        if depthwise {
            spec.groups = None;
        }
        conv_output_channels.push(spec.conv_out_channels());
        params += block_conv_params(&spec);
        flops += block_conv_flops(&spec, (h, w));
        h *= spec.stride[0];
        w *= spec.stride[1];
        prev = c;
    }
    ChannelPlan { per_layer_channels: widths, conv_output_channels, total_params: params, total_flops_per_frame: flops }
}

fn conv_params(cout: usize, cin: usize, k: usize, groups: usize) -> usize {
    cout * k * k * (cin / groups) + cout
}

fn fc_params(out: usize, inp: usize) -> usize {
    out * inp + out
}

fn block_conv_params(b: &BlockSpec) -> usize {
    let group = match b.kind {
        BlockKind::FfnervDouble => conv_params(b.in_channels, b.in_channels, b.group_kernel, b.group_count()),
        _ => 0,
    };
    group + conv_params(b.conv_out_channels(), b.in_channels, b.kernel_size, 1)
}

fn block_conv_flops(b: &BlockSpec, (h, w): (usize, usize)) -> u64 {
    let hw = (h * w) as u64;
    let k2 = |k: usize| (k * k) as u64;
    let group = match b.kind {
        BlockKind::FfnervDouble => {
            2 * hw * b.in_channels as u64 * (b.in_channels / b.group_count()) as u64 * k2(b.group_kernel)
        }
        _ => 0,
    };
    let main = match b.kind {
        BlockKind::BilinearConv => {
            2 * hw * (b.upsample() as u64) * b.in_channels as u64 * b.out_channels as u64 * k2(b.kernel_size)
        }
        _ => 2 * hw * b.in_channels as u64 * b.conv_out_channels() as u64 * k2(b.kernel_size),
    };
    group + main
}

fn stem_params(stem: &StemSpec, encoding: &EncodingSpec) -> usize {
    let flat: usize = stem.out_shape().iter().product();
    match stem {
        StemSpec::Mlp { hidden_dims, .. } => {
            let mut prev = encoding.vector_dim();
            let mut total = 0;
            for &d in hidden_dims.iter().chain(std::iter::once(&flat)) {
                total += fc_params(d, prev);
                prev = d;
            }
            total
        }
        StemSpec::SingleFc { .. } => fc_params(flat, encoding.vector_dim()),
        StemSpec::TransformerXy { dim, out_shape, .. } => {
            let width = match encoding {
                EncodingSpec::SinusoidalXyT { length, xy_length, .. } => 2 * length + 4 * xy_length,
                _ => 0,
            };
            fc_params(*dim, width) + 6 * fc_params(*dim, *dim) + fc_params(out_shape[2], *dim)
        }
        StemSpec::Stemless { .. } => 0,
    }
}

fn stem_flops(stem: &StemSpec, encoding: &EncodingSpec) -> u64 {
    match stem {
        StemSpec::Stemless { .. } => 0,
        StemSpec::TransformerXy { dim, out_shape, .. } => {
            let s = (out_shape[0] * out_shape[1]) as u64;
            let d = *dim as u64;
            let width = match encoding {
                EncodingSpec::SinusoidalXyT { length, xy_length, .. } => (2 * length + 4 * xy_length) as u64,
                _ => 0,
            };
            2 * s * width * d + 12 * s * d * d + 4 * s * s * d + 2 * s * d * out_shape[2] as u64
        }
        _ => 2 * (stem_params(stem, encoding) as u64 - stem_bias_count(stem) as u64),
    }
}

fn stem_bias_count(stem: &StemSpec) -> usize {
    let flat: usize = stem.out_shape().iter().product();
    match stem {
        StemSpec::Mlp { hidden_dims, .. } => hidden_dims.iter().sum::<usize>() + flat,
        StemSpec::SingleFc { .. } => flat,
        _ => 0,
    }
}

fn skip_rows(cfg: &ModelConfig, b: &BlockSpec) -> usize {
    match cfg.skip.fuse {
        FuseKind::Add => b.out_channels,
        FuseKind::AffineModulate => 2 * b.out_channels,
    }
}

/// Closed-form count of every learnable scalar: encodings, grids, stem,
/// blocks, skips, norm affine terms and the head.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let mut total = match cfg.encoding {
        EncodingSpec::TemporalGrid { grid_frames, grid_shape } => grid_frames * grid_shape.iter().product::<usize>(),
        _ => 0,
    };
    total += stem_params(&cfg.stem, &cfg.encoding);
    for (b, (h, w)) in cfg.blocks.iter().zip(cfg.block_input_sizes()) {
        total += block_conv_params(b);
        if b.norm == NormKind::LayerNorm {
            total += 2 * b.out_channels;
        }
        total += match cfg.skip.kind {
            SkipKind::None => 0,
            SkipKind::TSkip => fc_params(skip_rows(cfg, b), 2 * cfg.skip.t_length),
            SkipKind::LocalGrid => {
                cfg.skip.grid_frames * h * w * cfg.skip.grid_dim
                    + conv_params(b.skip_channels() * b.upsample(), cfg.skip.grid_dim, 1, 1)
            }
        };
    }
    total + conv_params(3, cfg.head_channels(), cfg.head_kernel, 1)
}

/// Multiply-accumulate cost (2 FLOPs each) of one frame through every conv
/// and FC at its true feature size. Activations, norms, interpolation and
/// rearrangements are not counted.
pub fn estimate_flops(cfg: &ModelConfig) -> u64 {
    let mut total = stem_flops(&cfg.stem, &cfg.encoding);
    for (b, (h, w)) in cfg.blocks.iter().zip(cfg.block_input_sizes()) {
        total += block_flops(cfg, b, (h, w));
    }
    let [th, tw] = cfg.target_resolution;
    let k = cfg.head_kernel as u64;
    total + 2 * (th * tw) as u64 * cfg.head_channels() as u64 * 3 * k * k
}

/// FLOPs of one block including its skip.
pub fn block_flops(cfg: &ModelConfig, b: &BlockSpec, size: (usize, usize)) -> u64 {
    let skip = match cfg.skip.kind {
        SkipKind::None => 0,
        SkipKind::TSkip => 2 * (skip_rows(cfg, b) * 2 * cfg.skip.t_length) as u64,
        SkipKind::LocalGrid => {
            2 * (size.0 * size.1 * cfg.skip.grid_dim * b.skip_channels() * b.upsample()) as u64
        }
    };
    block_conv_flops(b, size) + skip
}

/// Best integer `fc_dim` for `target` (closest count, ties to the smaller).
pub fn solve_fc_dim(target: usize, template: &ModelConfig) -> (usize, usize) {
    let count = |d: usize| count_params(&template.with_fc_dim(d));
    let (mut lo, mut hi) = FC_DIM_RANGE;
    if count(hi) < target {
        return (hi, count(hi));
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if count(mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let above = (lo, count(lo));
    if lo == FC_DIM_RANGE.0 {
        return above;
    }
    let below = (lo - 1, count(lo - 1));
    if target - below.1 <= above.1 - target {
        below
    } else {
        above
    }
}

fn distance(a: usize, b: usize) -> usize {
    a.abs_diff(b)
}

/// Secondary integer knob with linear parameter cost: grid frames of a
/// temporal grid, or the last hidden width of an MLP stem.
fn fine_knob(cfg: &ModelConfig) -> Option<(usize, usize)> {
    match (&cfg.encoding, &cfg.stem) {
        (EncodingSpec::TemporalGrid { grid_frames, .. }, _) => Some((*grid_frames, 2)),
        (_, StemSpec::Mlp { hidden_dims, .. }) if !hidden_dims.is_empty() => Some((*hidden_dims.last().unwrap(), 1)),
        _ => None,
    }
}

fn set_knob(cfg: &ModelConfig, value: usize) -> ModelConfig {
    let mut c = cfg.clone();
    match (&mut c.encoding, &mut c.stem) {
        (EncodingSpec::TemporalGrid { grid_frames, .. }, _) => *grid_frames = value,
        (_, StemSpec::Mlp { hidden_dims, .. }) => *hidden_dims.last_mut().unwrap() = value,
        _ => {}
    }
    c
}

fn tune_knob(target: usize, cfg: &ModelConfig) -> ModelConfig {
    let Some((start, min)) = fine_knob(cfg) else { return cfg.clone() };
    let base = count_params(&set_knob(cfg, min));
    let step = count_params(&set_knob(cfg, min + 1)) - base;
    let ideal = if target <= base || step == 0 { min } else { min + ((target - base) as f64 / step as f64).round() as usize };
    let candidates = [ideal.saturating_sub(1).max(min), ideal, ideal + 1, start];
    candidates
        .iter()
        .map(|&v| set_knob(cfg, v))
        .min_by_key(|c| (distance(count_params(c), target), count_params(c)))
        .expect("non-empty")
}

/// Resizes `template` to `target` parameters within `tolerance * target`.
///
/// `fc_dim` (and any grid dimension tied to it) is searched first. If that
/// integer step is too coarse, the grid frame count or last MLP hidden
/// width is adjusted for both neighbouring `fc_dim` values.
pub fn solve_width(target: usize, template: &ModelConfig, tolerance: f64) -> Result<ModelConfig> {
    if target == 0 || !(tolerance >= 0.0) {
        return config_err(format!("invalid solver target {target} / tolerance {tolerance}"));
    }
    let slack = tolerance * target as f64;
    let within = |c: &ModelConfig| distance(count_params(c), target) as f64 <= slack;
    if within(template) {
        return Ok(template.clone());
    }
    let (fc, _) = solve_fc_dim(target, template);
    let coarse = template.with_fc_dim(fc);
    if within(&coarse) {
        return Ok(coarse);
    }
    let mut best = coarse.clone();
    for d in [fc.saturating_sub(1).max(FC_DIM_RANGE.0), fc, (fc + 1).min(FC_DIM_RANGE.1)] {
        let tuned = tune_knob(target, &template.with_fc_dim(d));
        if tuned.validate().is_ok()
            && distance(count_params(&tuned), target) < distance(count_params(&best), target)
        {
            best = tuned;
        }
    }
    if within(&best) {
        Ok(best)
    } else {
        Err(NervError::Config(format!(
            "cannot reach {target} parameters within {:.2}%: nearest achievable is {}",
            tolerance * 100.0,
            count_params(&best)
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::presets::{self, SizePreset};

    #[test]
    fn width_plans() {
        assert_eq!(plan_widths(12, 4.0, 2.0, 4), vec![48, 24, 12, 6]);
        assert_eq!(plan_widths(12, 4.0, 1.2, 5), vec![48, 40, 33, 28, 23]);
        assert_eq!(plan_widths(12, 2.0, 1.0, 3), vec![24, 24, 24]);
        assert_eq!(plan_widths(1, 1.0, 8.0, 3), vec![4, 4, 4]);
    }

    #[test]
    fn channel_plan_conv_outputs() {
        let blocks = vec![BlockSpec::new(BlockKind::NervBasic, [2, 3], 0, 0); 2];
        let p = plan_channels([9, 16, 12], 4.0, 2.0, &blocks);
        assert_eq!(p.per_layer_channels, vec![48, 24]);
        assert_eq!(p.conv_output_channels, vec![48 * 6, 24 * 6]);
        assert_eq!(p.total_params, (288 * 9 * 12 + 288) + (144 * 9 * 48 + 144));
    }

    #[test]
    fn small_closed_forms() {
        assert_eq!(conv_params(4, 2, 3, 1), 76);
        let b = BlockSpec { kernel_size: 1, ..BlockSpec::new(BlockKind::NervBasic, [1, 1], 1, 1) };
        assert_eq!(block_conv_flops(&b, (4, 4)), 32);
    }

    #[test]
    fn fixed_point_returns_template() {
        let t = presets::rnerv_desk([64, 128], 9);
        assert_eq!(solve_width(count_params(&t), &t, 0.0).unwrap(), t);
    }

    #[test]
    fn unreachable_target_reports_nearest() {
        let t = presets::rnerv_desk([64, 128], 9);
        let err = solve_width(10, &t, 0.01).unwrap_err().to_string();
        assert!(err.contains("nearest achievable"), "{err}");
    }

    #[test]
    fn size_presets_hit_targets() {
        for size in [SizePreset::Small, SizePreset::Large] {
            let t = presets::rnerv_1080p(size);
            let c = solve_width(size.target_params(), &t, 0.01).unwrap();
            assert!(distance(count_params(&c), size.target_params()) as f64 <= 0.01 * size.target_params() as f64);
        }
    }
}

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::config::{BlockKind, BlockSpec, FuseKind, NormKind, SkipKind, SkipSpec};
use super::grid_tap;
use super::stem::GRID_INIT_STD;
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{fan_in_uniform, normal, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl ConvParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        groups: usize,
    ) -> Self {
        let fan_in = k * k * cin / groups;
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &[cout, k, k, cin / groups], fan_in));
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[cout], fan_in));
        ConvParams { weight, bias, groups }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        g.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)), self.groups)
    }
}

#[derive(Clone, Debug)]
enum Skip {
    None,
    Temporal { fc_weight: ParamId, fc_bias: ParamId, fuse: FuseKind, norm_before_fuse: bool },
    LocalGrid { grid: ParamId, proj: ConvParams },
}

/// Per-call inputs shared by every block.
pub struct BlockContext<'a> {
    /// Normalised timestamps of the batch.
    pub ts: &'a [f64],
    /// `(N, 2L)` encoding consumed by temporal skips.
    pub t_encoding: Option<Var>,
}

/// One upsampling stage plus its skip connection.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    spec: BlockSpec,
    group: Option<ConvParams>,
    conv: ConvParams,
    norm: Option<(ParamId, ParamId)>,
    skip: Skip,
}

impl UpsampleBlock {
    /// `input_size` is the `(h, w)` entering the block (needed to size local grids).
    pub fn new<T: Scalar, R: Rng>(
        spec: &BlockSpec,
        skip: &SkipSpec,
        input_size: (usize, usize),
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
    ) -> Self {
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let [sh, sw] = spec.stride;
        let group = (spec.kind == BlockKind::FfnervDouble).then(|| {
            ConvParams::new(store, rng, &format!("{name}.group"), cin, cin, spec.group_kernel, spec.group_count())
        });
        let conv = ConvParams::new(store, rng, &format!("{name}.conv"), spec.conv_out_channels(), cin, spec.kernel_size, 1);
        let norm = (spec.norm == NormKind::LayerNorm).then(|| {
            let gain = store.add(format!("{name}.norm.gain"), ArrayD::from_elem(IxDyn(&[cout]), T::one()));
            let bias = store.add(format!("{name}.norm.bias"), ArrayD::zeros(IxDyn(&[cout])));
            (gain, bias)
        });
        let skip = match skip.kind {
            SkipKind::None => Skip::None,
            SkipKind::TSkip => {
                let width = 2 * skip.t_length;
                let rows = match skip.fuse {
                    FuseKind::Add => cout,
                    FuseKind::AffineModulate => 2 * cout,
                };
                let fc_weight = store.add(format!("{name}.skip.weight"), fan_in_uniform(rng, &[rows, width], width));
                let fc_bias = store.add(format!("{name}.skip.bias"), fan_in_uniform(rng, &[rows], width));
                Skip::Temporal { fc_weight, fc_bias, fuse: skip.fuse, norm_before_fuse: skip.norm_before_fuse }
            }
            SkipKind::LocalGrid => {
                let (h, w) = input_size;
                let grid = store.add(
                    format!("{name}.skip.grid"),
                    normal(rng, &[skip.grid_frames, h, w, skip.grid_dim], GRID_INIT_STD),
                );
                let proj = ConvParams::new(
                    store,
                    rng,
                    &format!("{name}.skip.proj"),
                    spec.skip_channels() * sh * sw,
                    skip.grid_dim,
                    1,
                    1,
                );
                Skip::LocalGrid { grid, proj }
            }
        };
        UpsampleBlock { spec: spec.clone(), group, conv, norm, skip }
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    /// Zeroes the temporal skip projection so the fusion is the identity.
    pub fn zero_skip<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if let Skip::Temporal { fc_weight, fc_bias, .. } = self.skip {
            store.get_mut(fc_weight).fill(T::zero());
            store.get_mut(fc_bias).fill(T::zero());
        }
    }

    fn local_grid<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, ctx: &BlockContext) -> Result<Option<Var>> {
        let Skip::LocalGrid { grid, proj } = &self.skip else { return Ok(None) };
        let src = bound.var(*grid);
        let frames = g.shape(src)[0];
        let taps = ctx.ts.iter().map(|&t| grid_tap(t, frames)).collect::<Result<Vec<_>>>()?;
        let feat = g.lerp_rows(src, taps);
        let feat = proj.apply(g, bound, feat);
        Ok(Some(g.pixel_shuffle(feat, self.spec.stride[0], self.spec.stride[1])))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var, ctx: &BlockContext) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.spec.in_channels {
            return shape_err(format!("block expects {} input channels, got {shape:?}", self.spec.in_channels));
        }
        let [sh, sw] = self.spec.stride;
        let mut h = match self.spec.kind {
            BlockKind::NervBasic | BlockKind::FfnervDouble => {
                let mut h = x;
                if let Some(gc) = &self.group {
                    h = gc.apply(g, bound, h);
                }
                h = self.conv.apply(g, bound, h);
                h = g.pixel_shuffle(h, sh, sw);
                if let Some(extra) = self.local_grid(g, bound, ctx)? {
                    h = g.add(h, extra);
                }
                h
            }
            BlockKind::BilinearConv => {
                let mut h = g.bilinear(x, sh, sw);
                if let Some(extra) = self.local_grid(g, bound, ctx)? {
                    h = g.add(h, extra);
                }
                self.conv.apply(g, bound, h)
            }
        };
        if let Some((gain, bias)) = self.norm {
            h = g.layer_norm(h, NORM_EPS);
            h = g.mul_last_dim(h, bound.var(gain));
            h = g.add_last_dim(h, bound.var(bias));
        }
        if let Skip::Temporal { fc_weight, fc_bias, fuse, norm_before_fuse } = self.skip {
            let enc = ctx.t_encoding.expect("temporal skip needs a t encoding");
            if norm_before_fuse {
                h = g.layer_norm(h, NORM_EPS);
            }
            let n = shape[0];
            let c = self.spec.out_channels;
            let m = g.linear(enc, bound.var(fc_weight), Some(bound.var(fc_bias)));
            h = match fuse {
                FuseKind::Add => g.channel_affine(h, None, Some(m)),
                FuseKind::AffineModulate => {
                    let m = g.reshape(m, &[n, 2, c]);
                    let gamma = g.slice_rows(m, 0, 1);
                    let gamma = g.reshape(gamma, &[n, c]);
                    let scale = g.offset(gamma, T::one());
                    let beta = g.slice_rows(m, 1, 1);
                    let beta = g.reshape(beta, &[n, c]);
                    g.channel_affine(h, Some(scale), Some(beta))
                }
            };
        }
        Ok(g.activation(h, self.spec.activation))
    }
}

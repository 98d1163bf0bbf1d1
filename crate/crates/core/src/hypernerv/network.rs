use ndarray::{ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::{HypoLayer, HypoLayout, MaskFill, NORM_EPS};
use crate::autodiff::{Activation, Graph, Var};
use crate::components::{final_activation_graph, Dense};
use crate::error::{config_err, shape_err, Result};
use crate::params::{fan_in_uniform, normal, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::video::VideoTensor;

const LN_EPS: f64 = 1e-5;
const TOKEN_INIT_STD: f64 = 0.02;

/// Transformer backbone settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub patch: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl HyperConfig {
    /// 47.9M-parameter backbone: width 720, feed-forward 2880, 12 heads, 6 blocks.
    pub fn full() -> Self {
        HyperConfig { patch: 64, d_model: 720, ff_dim: 2880, heads: 12, blocks: 6 }
    }

    pub fn desk() -> Self {
        HyperConfig { patch: 8, d_model: 64, ff_dim: 128, heads: 2, blocks: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.d_model == 0 || self.ff_dim == 0 || self.blocks == 0 {
            return config_err("hyper-network sizes must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return config_err(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        Ok(())
    }
}

/// Non-overlapping `p x p` patches of a `(T, H, W, C)` clip, flattened in
/// `(py, px, c)` order: `(T * H/p * W/p, p * p * C)`.
pub fn tokenize_clip<T: Scalar>(clip: &ArrayD<T>, patch: usize) -> Result<ArrayD<T>> {
    if clip.ndim() != 4 {
        return shape_err(format!("clip must be (T, H, W, C), got {:?}", clip.shape()));
    }
    let (t, h, w, c) = (clip.shape()[0], clip.shape()[1], clip.shape()[2], clip.shape()[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("frame {h}x{w} not divisible by patch size {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(clip.len());
    for f in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            data.push(clip[[f, gy * patch + py, gx * patch + px, ch]]);
                        }
                    }
                }
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[t * gh * gw, patch * patch * c]), data).expect("token shape"))
}

/// Modulated conv weight: `shared * tile(tokens)`, each output row
/// L2-normalised and scaled by `gain`.
///
/// `shared` is `(Cout, k, k, Cin)`, `tokens` any shape whose element count
/// divides the weight count, `gain` is `(Cout)`.
pub fn modulate_graph<T: Scalar>(g: &mut Graph<T>, shared: Var, tokens: Var, gain: Var) -> Var {
    let shape = g.shape(shared).to_vec();
    let rows = shape[0];
    let n: usize = shape.iter().product();
    let tiled = g.tile(tokens, n);
    let flat = g.reshape(shared, &[n]);
    let m = g.mul(flat, tiled);
    let m = g.reshape(m, &[rows, n / rows]);
    let m = g.row_normalize(m, NORM_EPS);
    let m = g.reshape(m, &[rows, n / rows, 1]);
    let gain = g.reshape(gain, &[rows, 1]);
    let m = g.channel_affine(m, Some(gain), None);
    g.reshape(m, &shape)
}

/// Array version of [`modulate_graph`].
pub fn modulate<T: Scalar>(shared: &ArrayD<T>, tokens: &ArrayD<T>, gain: &ArrayD<T>) -> ArrayD<T> {
    let mut g = Graph::new();
    let (s, t, k) = (g.constant(shared.clone()), g.constant(tokens.clone()), g.constant(gain.clone()));
    let out = modulate_graph(&mut g, s, t, k);
    g.into_value(out)
}

/// Tokens kept for storage: the first `tokens_min` rows of each masked layer.
pub fn apply_mask<T: Scalar>(tokens: &[Option<ArrayD<T>>], layout: &HypoLayout, mask_on: bool) -> Vec<Option<ArrayD<T>>> {
    tokens
        .iter()
        .zip(&layout.layers)
        .map(|(t, l)| {
            t.as_ref().map(|t| {
                let keep = l.stored_tokens(mask_on);
                t.slice_axis(Axis(0), ndarray::Slice::from(0..keep)).to_owned()
            })
        })
        .collect()
}

/// Full-size tokens with the dropped rows of each masked layer set to zero.
pub fn zero_dropped<T: Scalar>(tokens: &[Option<ArrayD<T>>], layout: &HypoLayout) -> Vec<Option<ArrayD<T>>> {
    tokens
        .iter()
        .zip(&layout.layers)
        .map(|(t, l)| {
            t.as_ref().map(|t| {
                let mut t = t.clone();
                t.slice_axis_mut(Axis(0), ndarray::Slice::from(l.tokens_min..)).fill(T::zero());
                t
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    ln1: (ParamId, ParamId),
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: (ParamId, ParamId),
    ff1: Dense,
    ff2: Dense,
}

/// Shared parameters of one hypo layer and the FC that produces its tokens.
#[derive(Clone, Debug)]
pub struct HypoHandles {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: Option<ParamId>,
    pub token_fc: Option<Dense>,
    slot_offset: usize,
}

/// Graph nodes of one hypo forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HypoVars {
    pub head_input: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    /// Shuffled head output before the final activation.
    pub pre_activation: Var,
    pub output: Var,
}

/// Transformer hyper-network plus the shared hypo-network it modulates.
#[derive(Clone, Debug)]
pub struct HyperNerv<T> {
    layout: HypoLayout,
    config: HyperConfig,
    params: ParamStore<T>,
    patch_embed: Dense,
    token_pos: ParamId,
    slots: Option<ParamId>,
    blocks: Vec<TransformerBlock>,
    ln_f: (ParamId, ParamId),
    input: ParamId,
    layers: Vec<HypoHandles>,
    mask_trained: bool,
}

fn layer_norm_params<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> (ParamId, ParamId) {
    let gain = store.add(format!("{name}.gain"), ArrayD::from_elem(IxDyn(&[d]), T::one()));
    let bias = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d])));
    (gain, bias)
}

fn apply_ln<T: Scalar>(g: &mut Graph<T>, bound: &Bound, x: Var, (gain, bias): (ParamId, ParamId)) -> Var {
    let y = g.layer_norm(x, LN_EPS);
    let y = g.mul_last_dim(y, bound.var(gain));
    g.add_last_dim(y, bound.var(bias))
}

fn row_norms<T: Scalar>(w: &ArrayD<T>) -> ArrayD<T> {
    let rows = w.shape()[0];
    let per = w.len() / rows;
    let flat = w.as_slice().expect("contiguous weight");
    let norms = (0..rows).map(|r| flat[r * per..(r + 1) * per].iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
    ArrayD::from_shape_vec(IxDyn(&[rows]), norms).expect("gain shape")
}

impl<T: Scalar> HyperNerv<T> {
    pub fn new(layout: &HypoLayout, config: &HyperConfig, seed: u64) -> Result<Self> {
        layout.validate()?;
        config.validate()?;
        let [h, w] = layout.output_size();
        if h % config.patch != 0 || w % config.patch != 0 {
            return config_err(format!("clip {h}x{w} not divisible by patch size {}", config.patch));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let video_tokens = layout.clip_frames * (h / config.patch) * (w / config.patch);
        let patch_embed = Dense::new(&mut p, &mut rng, "hyper.patch_embed", d, config.patch * config.patch * 3);
        let token_pos = p.add("hyper.token_pos", normal(&mut rng, &[video_tokens, d], TOKEN_INIT_STD));
        let slot_count: usize = layout.layers.iter().map(|l| l.tokens_max).sum();
        let slots = (slot_count > 0).then(|| p.add("hyper.slots", normal(&mut rng, &[slot_count, d], TOKEN_INIT_STD)));
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = format!("hyper.blocks.{i}");
                TransformerBlock {
                    ln1: layer_norm_params(&mut p, &format!("{n}.ln1"), d),
                    q: Dense::new(&mut p, &mut rng, &format!("{n}.q"), d, d),
                    k: Dense::new(&mut p, &mut rng, &format!("{n}.k"), d, d),
                    v: Dense::new(&mut p, &mut rng, &format!("{n}.v"), d, d),
                    o: Dense::new(&mut p, &mut rng, &format!("{n}.o"), d, d),
                    ln2: layer_norm_params(&mut p, &format!("{n}.ln2"), d),
                    ff1: Dense::new(&mut p, &mut rng, &format!("{n}.ff1"), config.ff_dim, d),
                    ff2: Dense::new(&mut p, &mut rng, &format!("{n}.ff2"), d, config.ff_dim),
                }
            })
            .collect();
        let ln_f = layer_norm_params(&mut p, "hyper.norm", d);
        let mut offset = 0;
        let mut token_fcs = Vec::new();
        for (i, l) in layout.layers.iter().enumerate() {
            token_fcs.push(l.is_modulated().then(|| Dense::new(&mut p, &mut rng, &format!("hyper.token_fc.{i}"), l.token_dim, d)));
        }
        let [bh, bw] = layout.base;
        let input = p.add("shared.input", normal(&mut rng, &[layout.clip_frames, bh, bw, layout.pos_dim], 1.0));
        let mut layers = Vec::new();
        for (i, (l, token_fc)) in layout.layers.iter().zip(token_fcs).enumerate() {
            let shape = l.weight_shape();
            let fan_in = l.kernel * l.kernel * l.in_channels;
            let wv = fan_in_uniform(&mut rng, &shape, fan_in);
            let gain = l.is_modulated().then(|| p.add(format!("shared.layers.{i}.gain"), row_norms(&wv)));
            let weight = p.add(format!("shared.layers.{i}.weight"), wv);
            let bias = p.add(format!("shared.layers.{i}.bias"), fan_in_uniform(&mut rng, &[shape[0]], fan_in));
            layers.push(HypoHandles { weight, bias, gain, token_fc, slot_offset: offset });
            offset += l.tokens_max;
        }
        Ok(HyperNerv {
            layout: layout.clone(),
            config: config.clone(),
            params: p,
            patch_embed,
            token_pos,
            slots,
            blocks,
            ln_f,
            input,
            layers,
            mask_trained: false,
        })
    }

    pub fn layout(&self) -> &HypoLayout {
        &self.layout
    }

    pub fn config(&self) -> &HyperConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn hypo_layers(&self) -> &[HypoHandles] {
        &self.layers
    }

    pub fn mask_trained(&self) -> bool {
        self.mask_trained
    }

    pub fn set_mask_trained(&mut self, v: bool) {
        self.mask_trained = v;
    }

    /// Same architecture with `params` (names and shapes must match).
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        let mut out = self.clone();
        out.params.load_from(&params)?;
        Ok(out)
    }

    /// Parameters that live in the decoder and are never transmitted.
    pub fn shared_param_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("shared.")).map(|(_, v)| v.len()).sum()
    }

    pub fn hyper_param_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("hyper.")).map(|(_, v)| v.len()).sum()
    }

    pub fn video_token_count(&self) -> usize {
        let [h, w] = self.layout.output_size();
        self.layout.clip_frames * (h / self.config.patch) * (w / self.config.patch)
    }

    pub fn check_clip(&self, clip: &VideoTensor<T>) -> Result<()> {
        let [h, w] = self.layout.output_size();
        if clip.num_frames() != self.layout.clip_frames || clip.resolution() != (h, w) {
            return shape_err(format!(
                "clip is {}x{}x{}, layout expects {}x{h}x{w}",
                clip.num_frames(),
                clip.height(),
                clip.width(),
                self.layout.clip_frames
            ));
        }
        Ok(())
    }

    /// Per-layer `(tokens_max, token_dim)` predictions; `None` for
    /// unmodulated layers.
    pub fn predict_graph(&self, g: &mut Graph<T>, bound: &Bound, clip: &VideoTensor<T>) -> Result<Vec<Option<Var>>> {
        self.check_clip(clip)?;
        let d = self.config.d_model;
        let idx: Vec<usize> = (0..clip.num_frames()).collect();
        let patches = g.constant(tokenize_clip(&clip.batch(&idx), self.config.patch)?);
        let x = self.patch_embed.apply(g, bound, patches);
        let mut x = g.add(x, bound.var(self.token_pos));
        let nv = self.video_token_count();
        if let Some(slots) = self.slots {
            x = g.concat_rows(x, bound.var(slots));
        }
        let seq = g.shape(x)[0];
        let mut x = g.reshape(x, &[1, seq, d]);
        for b in &self.blocks {
            let h = apply_ln(g, bound, x, b.ln1);
            let (q, k, v) = (b.q.apply(g, bound, h), b.k.apply(g, bound, h), b.v.apply(g, bound, h));
            let a = g.attention(q, k, v, self.config.heads);
            let a = b.o.apply(g, bound, a);
            x = g.add(x, a);
            let h = apply_ln(g, bound, x, b.ln2);
            let f = b.ff1.apply(g, bound, h);
            let f = g.activation(f, Activation::Gelu);
            let f = b.ff2.apply(g, bound, f);
            x = g.add(x, f);
        }
        let x = apply_ln(g, bound, x, self.ln_f);
        Ok(self
            .layout
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(l, hd)| {
                hd.token_fc.map(|fc| {
                    let rows = g.slice_rows(x, nv + hd.slot_offset, l.tokens_max);
                    let t = fc.apply(g, bound, rows);
                    g.reshape(t, &[l.tokens_max, l.token_dim])
                })
            })
            .collect())
    }

    /// Expands stored tokens of one layer to the tiling source.
    fn fill(&self, g: &mut Graph<T>, l: &HypoLayer, stored: Var, masked: bool) -> Result<Var> {
        let rows = g.shape(stored)[0];
        let want = l.stored_tokens(masked);
        if g.shape(stored) != [want, l.token_dim] {
            return shape_err(format!("expected ({want}, {}) tokens, got {:?}", l.token_dim, g.shape(stored)));
        }
        if !masked || l.tokens_min == l.tokens_max || self.layout.mask_fill == MaskFill::Repeat {
            return Ok(stored);
        }
        let zeros = g.constant(ArrayD::zeros(IxDyn(&[l.tokens_max - rows, l.token_dim])));
        Ok(if rows == 0 { zeros } else { g.concat_rows(stored, zeros) })
    }

    /// Renders the clip from stored tokens (`tokens_min` rows per layer when
    /// `masked`, `tokens_max` otherwise).
    pub fn hypo_graph(&self, g: &mut Graph<T>, bound: &Bound, stored: &[Option<Var>], masked: bool) -> Result<HypoVars> {
        if stored.len() != self.layers.len() {
            return shape_err(format!("{} token blocks for {} layers", stored.len(), self.layers.len()));
        }
        let mut x = bound.var(self.input);
        let last = self.layers.len() - 1;
        let mut vars = None;
        for (i, ((l, hd), tok)) in self.layout.layers.iter().zip(&self.layers).zip(stored).enumerate() {
            let shared = bound.var(hd.weight);
            let w = match (hd.gain, tok) {
                (Some(gain), Some(t)) => {
                    let src = self.fill(g, l, *t, masked)?;
                    modulate_graph(g, shared, src, bound.var(gain))
                }
                (None, None) => shared,
                _ => return shape_err(format!("layer {i}: token block presence does not match the layout")),
            };
            let input = x;
            x = g.conv2d(x, w, Some(bound.var(hd.bias)), 1);
            x = g.pixel_shuffle(x, l.upscale[0], l.upscale[1]);
            if i == last {
                let out = final_activation_graph(g, x, self.layout.final_activation);
                vars = Some(HypoVars {
                    head_input: input,
                    head_weight: w,
                    head_bias: bound.var(hd.bias),
                    pre_activation: x,
                    output: out,
                });
            } else {
                x = g.activation(x, self.layout.activation);
            }
        }
        Ok(vars.expect("at least one layer"))
    }

    /// Predicted tokens as arrays.
    pub fn predict_tokens(&self, clip: &VideoTensor<T>) -> Result<Vec<Option<ArrayD<T>>>> {
        let mut g = Graph::new();
        let bound = self.params.bind_const(&mut g);
        let vars = self.predict_graph(&mut g, &bound, clip)?;
        Ok(vars.into_iter().map(|v| v.map(|v| g.value(v).clone())).collect())
    }

    /// `(T, H, W, 3)` frames from stored tokens.
    pub fn render_tokens(&self, stored: &[Option<ArrayD<T>>], masked: bool) -> Result<ArrayD<T>> {
        self.render_vars(stored, masked, |g, v| g.value(v.output).clone())
    }

    /// Runs the hypo forward on constant tokens and extracts values with `f`.
    pub fn render_vars<R>(
        &self,
        stored: &[Option<ArrayD<T>>],
        masked: bool,
        f: impl FnOnce(&Graph<T>, HypoVars) -> R,
    ) -> Result<R> {
        let mut g = Graph::new();
        let bound = self.params.bind_const(&mut g);
        let toks: Vec<Option<Var>> = stored.iter().map(|t| t.as_ref().map(|t| g.constant(t.clone()))).collect();
        let vars = self.hypo_graph(&mut g, &bound, &toks, masked)?;
        Ok(f(&g, vars))
    }

    /// Predicts tokens for `clip`, applies the mask and renders.
    pub fn reconstruct(&self, clip: &VideoTensor<T>, masked: bool) -> Result<VideoTensor<T>> {
        let tokens = apply_mask(&self.predict_tokens(clip)?, &self.layout, masked);
        let frames = self.render_tokens(&tokens, masked)?;
        VideoTensor::from_batch(&frames, clip.frame_rate, clip.name.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> HyperNerv<f64> {
        HyperNerv::new(&HypoLayout::desk(), &HyperConfig::desk(), 1).unwrap()
    }

    #[test]
    fn tokenizer_counts_and_layout() {
        let clip = ArrayD::from_shape_fn(IxDyn(&[8, 256, 256, 3]), |i| (i[1] + i[2]) as f64);
        assert_eq!(tokenize_clip(&clip, 64).unwrap().shape(), &[128, 64 * 64 * 3]);
        assert_eq!(tokenize_clip(&clip, 256).unwrap().shape()[0], 8);
        assert!(tokenize_clip(&clip, 48).is_err());
        let small = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 1]), |i| (i[1] * 4 + i[2]) as f64);
        let t = tokenize_clip(&small, 2).unwrap();
        assert_eq!(t.index_axis(Axis(0), 1).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn modulation_identities() {
        let ones = ArrayD::from_elem(IxDyn(&[2, 1, 1, 4]), 1.0);
        let tok = ArrayD::from_elem(IxDyn(&[2, 2]), 1.0);
        let gain = ArrayD::from_elem(IxDyn(&[2]), 2.0);
        let w = modulate(&ones, &tok, &gain);
        assert!(w.iter().all(|&v| (v - 1.0f64).abs() < 1e-15));
        let zero = modulate(&ones, &ArrayD::zeros(IxDyn(&[2, 2])), &gain);
        assert!(zero.iter().all(|&v| v == 0.0));
        let shared = ArrayD::from_shape_fn(IxDyn(&[2, 1, 1, 4]), |i| (i[0] * 4 + i[3]) as f64 - 3.5);
        let t = ArrayD::from_shape_fn(IxDyn(&[4]), |i| i[0] as f64 + 0.5);
        let scaled = t.mapv(|v| v * 7.0);
        let (a, b) = (modulate(&shared, &t, &gain), modulate(&shared, &scaled, &gain));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn prediction_shapes_follow_layout() {
        let n = net();
        let clip = VideoTensor::<f64>::synthetic(8, 32, 32, 2);
        let toks = n.predict_tokens(&clip).unwrap();
        let shapes: Vec<Option<Vec<usize>>> = toks.iter().map(|t| t.as_ref().map(|t| t.shape().to_vec())).collect();
        assert_eq!(shapes, vec![Some(vec![2, 64]), Some(vec![16, 72]), Some(vec![8, 72]), None]);
        assert_eq!(n.predict_tokens(&clip).unwrap(), toks);
        assert_eq!(n.reconstruct(&clip, false).unwrap().frames().shape(), &[8, 32, 32, 3]);
        assert_eq!(n.shared_param_count(), n.layout().hypo_param_count() + 8 * 2 * 2 * 8 + 3 * 64);
    }

    #[test]
    fn zeroed_tokens_match_masked_render() {
        let n = net();
        let clip = VideoTensor::<f64>::synthetic(8, 32, 32, 3);
        let toks = n.predict_tokens(&clip).unwrap();
        let masked = n.render_tokens(&apply_mask(&toks, n.layout(), true), true).unwrap();
        let zeroed = n.render_tokens(&zero_dropped(&toks, n.layout()), false).unwrap();
        assert_eq!(masked, zeroed);
        assert_ne!(masked, n.render_tokens(&toks, false).unwrap());
    }
}

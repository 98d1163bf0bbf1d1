use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{BlockContext, ConvParams, UpsampleBlock};
use super::config::{FinalActivation, ModelConfig, SkipKind};
use super::stem::{encode_batch, Encoding, Stem};
use crate::autodiff::{Activation, Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::video::{normalized_time, VideoTensor};

/// Final convolution to RGB followed by the output nonlinearity.
#[derive(Clone, Debug)]
pub struct Head {
    conv: ConvParams,
    pub kernel: usize,
    pub in_channels: usize,
    pub final_activation: FinalActivation,
}

/// Applies the output nonlinearity on the graph.
pub fn final_activation_graph<T: Scalar>(g: &mut Graph<T>, pre: Var, kind: FinalActivation) -> Var {
    match kind {
        FinalActivation::Sigmoid => g.activation(pre, Activation::Sigmoid),
        FinalActivation::TanhShift => {
            let t = g.activation(pre, Activation::Tanh);
            let t = g.scale(t, T::of(0.5));
            g.offset(t, T::of(0.5))
        }
        FinalActivation::AddHalf => g.offset(pre, T::of(0.5)),
    }
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(
        in_channels: usize,
        kernel: usize,
        final_activation: FinalActivation,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let conv = ConvParams::new(store, rng, "head", 3, in_channels, kernel, 1);
        Head { conv, kernel, in_channels, final_activation }
    }

    pub fn weight(&self) -> ParamId {
        self.conv.weight
    }

    pub fn bias(&self) -> ParamId {
        self.conv.bias
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let c = *g.shape(x).last().unwrap_or(&0);
        if c != self.in_channels {
            return shape_err(format!("head expects {} channels, got {c}", self.in_channels));
        }
        let pre = self.conv.apply(g, bound, x);
        let out = final_activation_graph(g, pre, self.final_activation);
        Ok((pre, out))
    }
}

/// Graph handles produced by one model forward.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub stem_output: Var,
    pub block_outputs: Vec<Var>,
    pub head_input: Var,
    pub pre_activation: Var,
    pub output: Var,
}

/// A NeRV-family network `I_t = theta(t)` assembled from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct NervModel<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoding: Encoding,
    stem: Stem,
    blocks: Vec<UpsampleBlock>,
    head: Head,
}

impl<T: Scalar> NervModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoding = Encoding::new(&config.encoding, &mut params, &mut rng);
        let stem = Stem::new(&config.stem, &config.encoding, &mut params, &mut rng)?;
        let sizes = config.block_input_sizes();
        let blocks = config
            .blocks
            .iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (b, size))| UpsampleBlock::new(b, &config.skip, size, &mut params, &mut rng, &format!("blocks.{i}")))
            .collect();
        let head = Head::new(config.head_channels(), config.head_kernel, config.final_activation, &mut params, &mut rng);
        Ok(NervModel { config: config.clone(), params, encoding, stem, blocks, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn blocks(&self) -> &[UpsampleBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.config.target_resolution[0], self.config.target_resolution[1])
    }

    /// Zeroes every temporal skip projection.
    pub fn zero_skips(&mut self) {
        for b in &self.blocks {
            b.zero_skip(&mut self.params);
        }
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, bound: &Bound, ts: &[f64]) -> Result<ForwardVars> {
        let enc = self.encoding.forward(g, bound, ts)?;
        let stem_output = self.stem.forward(g, bound, enc, ts)?;
        let t_encoding = match self.config.skip.kind {
            SkipKind::TSkip => Some(g.constant(encode_batch(ts, self.config.skip.t_base, self.config.skip.t_length)?)),
            _ => None,
        };
        let ctx = BlockContext { ts, t_encoding };
        let mut x = stem_output;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, bound, x, &ctx)?;
            block_outputs.push(x);
        }
        let (pre_activation, output) = self.head.forward(g, bound, x)?;
        Ok(ForwardVars { stem_output, block_outputs, head_input: x, pre_activation, output })
    }

    /// Renders frames at the given normalised times as an `(N, H, W, 3)` batch.
    pub fn render(&self, ts: &[f64]) -> Result<ArrayD<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_const(&mut g);
        let out = self.forward_graph(&mut g, &bound, ts)?;
        Ok(g.into_value(out.output))
    }

    /// Renders a whole video of `frames` frames, one frame per forward.
    pub fn render_video(&self, frames: usize, frame_rate: f64) -> Result<VideoTensor<T>> {
        let (h, w) = self.resolution();
        let mut all = ndarray::Array4::<T>::zeros((frames, h, w, 3));
        for i in 0..frames {
            let f = self.render(&[normalized_time(i, frames)])?;
            all.slice_mut(ndarray::s![i, .., .., ..])
                .assign(&f.index_axis(ndarray::Axis(0), 0).into_dimensionality::<ndarray::Ix3>().expect("frame rank"));
        }
        let all = all.mapv(|v| if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) });
        VideoTensor::new(all, frame_rate, self.config.name.clone())
    }

    /// Shallow copy of the architecture carrying different parameters.
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        let mut m = self.clone();
        m.params.load_from(&params)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::config::*;
    use crate::components::presets;

    fn walkthrough() -> ModelConfig {
        let mut b0 = BlockSpec::new(BlockKind::NervBasic, [2, 2], 12, 6);
        b0.activation = Activation::Gelu;
        ModelConfig {
            name: "walkthrough".into(),
            target_resolution: [18, 32],
            exp: 1.0,
            r: 2.0,
            encoding: EncodingSpec::SinusoidalT { base: 1.25, length: 80 },
            stem: StemSpec::SingleFc { out_shape: [9, 16, 12] },
            blocks: vec![b0],
            skip: SkipSpec::default(),
            head_kernel: 3,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    #[test]
    fn walkthrough_shapes() {
        let m = NervModel::<f64>::new(&walkthrough(), 0).unwrap();
        let w = m.params().get(m.params().find("stem.fc0.weight").unwrap());
        assert_eq!(w.shape(), &[1728, 160]);
        let mut g = Graph::new();
        let bound = m.params().bind_const(&mut g);
        let out = m.forward_graph(&mut g, &bound, &[0.3]).unwrap();
        assert_eq!(g.shape(out.stem_output), &[1, 9, 16, 12]);
        assert_eq!(g.shape(out.block_outputs[0]), &[1, 18, 32, 6]);
        assert_eq!(g.shape(out.output), &[1, 18, 32, 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = presets::rnerv_desk([64, 128], 6);
        let m = NervModel::<f32>::new(&cfg, 3).unwrap();
        assert_eq!(m.render(&[0.25]).unwrap(), m.render(&[0.25]).unwrap());
        assert_eq!(m.render(&[0.25]).unwrap().shape(), &[1, 64, 128, 3]);
    }

    #[test]
    fn zero_head_gives_half_grey() {
        for fa in [FinalActivation::Sigmoid, FinalActivation::AddHalf, FinalActivation::TanhShift] {
            let mut cfg = walkthrough();
            cfg.final_activation = fa;
            let mut m = NervModel::<f64>::new(&cfg, 0).unwrap();
            let (w, b) = (m.head().weight(), m.head().bias());
            m.params_mut().get_mut(w).fill(0.0);
            m.params_mut().get_mut(b).fill(0.0);
            assert!(m.render(&[0.5]).unwrap().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn zeroed_t_skip_matches_no_skip() {
        let mut with = presets::rnerv_desk([64, 128], 6);
        with.skip.norm_before_fuse = false;
        let mut without = with.clone();
        without.skip = SkipSpec::default();
        let mut a = NervModel::<f64>::new(&with, 5).unwrap();
        a.zero_skips();
        let b = NervModel::<f64>::new(&without, 5).unwrap();
        let mut copied = b.params().clone();
        for id in copied.ids().collect::<Vec<_>>() {
            let src = a.params().find(copied.name(id)).unwrap();
            *copied.get_mut(id) = a.params().get(src).clone();
        }
        let b = b.with_params(copied).unwrap();
        assert_eq!(a.render(&[0.4]).unwrap(), b.render(&[0.4]).unwrap());
    }
}

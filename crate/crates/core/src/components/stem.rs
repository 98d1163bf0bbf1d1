use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::config::{EncodingSpec, StemSpec};
use super::{grid_tap, sinusoidal_encode};
use crate::autodiff::{Activation, Graph, Var};
use crate::error::{config_err, Result};
use crate::params::{fan_in_uniform, normal, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Standard deviation of freshly initialised feature grids.
pub const GRID_INIT_STD: f64 = 1e-2;

/// Positional encoding of the frame index.
#[derive(Clone, Debug)]
pub enum Encoding {
    Sinusoidal { base: f64, length: usize },
    SinusoidalXy { base: f64, length: usize, xy_length: usize },
    Grid { grid: ParamId },
}

impl Encoding {
    pub fn new<T: Scalar, R: Rng>(spec: &EncodingSpec, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        match *spec {
            EncodingSpec::SinusoidalT { base, length } => Encoding::Sinusoidal { base, length },
            EncodingSpec::SinusoidalXyT { base, length, xy_length } => {
                Encoding::SinusoidalXy { base, length, xy_length }
            }
            EncodingSpec::TemporalGrid { grid_frames, grid_shape } => {
                let [h, w, c] = grid_shape;
                let grid = store.add("encoding.grid", normal(rng, &[grid_frames, h, w, c], GRID_INIT_STD));
                Encoding::Grid { grid }
            }
        }
    }

    /// `(N, 2L)` constant for sinusoids, `(N, h, w, c)` grid slice otherwise.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, ts: &[f64]) -> Result<Var> {
        match *self {
            Encoding::Sinusoidal { base, length } | Encoding::SinusoidalXy { base, length, .. } => {
                Ok(g.constant(encode_batch(ts, base, length)?))
            }
            Encoding::Grid { grid } => {
                let src = bound.var(grid);
                let frames = g.shape(src)[0];
                let taps = ts.iter().map(|&t| grid_tap(t, frames)).collect::<Result<Vec<_>>>()?;
                Ok(g.lerp_rows(src, taps))
            }
        }
    }
}

/// Sinusoidal encodings of several timestamps as a `(N, 2L)` array.
pub fn encode_batch<T: Scalar>(ts: &[f64], base: f64, length: usize) -> Result<ArrayD<T>> {
    let mut data = Vec::with_capacity(ts.len() * 2 * length);
    for &t in ts {
        data.extend(sinusoidal_encode(t, base, length)?.into_iter().map(T::of));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[ts.len(), 2 * length]), data).expect("encoding shape"))
}

/// `(N, h*w, 2L + 4*xy_length)` tokens: the `t` encoding followed by
/// sinusoids of the cell centre `(x, y)`.
fn xy_tokens<T: Scalar>(ts: &[f64], base: f64, length: usize, xy_length: usize, h: usize, w: usize) -> Result<ArrayD<T>> {
    let width = 2 * length + 4 * xy_length;
    let mut data = Vec::with_capacity(ts.len() * h * w * width);
    for &t in ts {
        let te = sinusoidal_encode(t, base, length)?;
        for y in 0..h {
            let ye = sinusoidal_encode((y as f64 + 0.5) / h as f64, base, xy_length)?;
            for x in 0..w {
                let xe = sinusoidal_encode((x as f64 + 0.5) / w as f64, base, xy_length)?;
                data.extend(te.iter().chain(&xe).chain(&ye).map(|&v| T::of(v)));
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[ts.len(), h * w, width]), data).expect("token shape"))
}

/// Fully connected layer handles.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub(crate) fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, out: usize, inp: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &[out, inp], inp));
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[out], inp));
        Dense { weight, bias }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        g.linear(x, bound.var(self.weight), Some(bound.var(self.bias)))
    }
}

/// Maps the encoding to the initial `(fc_h, fc_w, fc_dim)` feature map.
#[derive(Clone, Debug)]
pub enum Stem {
    /// Fully connected layers, GELU after each.
    Dense { layers: Vec<Dense>, in_dim: usize, out_shape: [usize; 3] },
    /// One attention layer over the `fc_h * fc_w` cells.
    Transformer {
        embed: Dense,
        q: Dense,
        k: Dense,
        v: Dense,
        o: Dense,
        ff1: Dense,
        ff2: Dense,
        out: Dense,
        heads: usize,
        base: f64,
        length: usize,
        xy_length: usize,
        out_shape: [usize; 3],
    },
    Identity { out_shape: [usize; 3] },
}

impl Stem {
    pub fn new<T: Scalar, R: Rng>(
        spec: &StemSpec,
        encoding: &EncodingSpec,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let out_shape = spec.out_shape();
        let flat = out_shape.iter().product::<usize>();
        Ok(match spec {
            StemSpec::Mlp { hidden_dims, .. } => {
                let in_dim = encoding.vector_dim();
                let mut layers = Vec::new();
                let mut prev = in_dim;
                for (i, &d) in hidden_dims.iter().chain(std::iter::once(&flat)).enumerate() {
                    layers.push(Dense::new(store, rng, &format!("stem.fc{i}"), d, prev));
                    prev = d;
                }
                Stem::Dense { layers, in_dim, out_shape }
            }
            StemSpec::SingleFc { .. } => {
                let in_dim = encoding.vector_dim();
                Stem::Dense { layers: vec![Dense::new(store, rng, "stem.fc0", flat, in_dim)], in_dim, out_shape }
            }
            StemSpec::TransformerXy { dim, heads, .. } => {
                let EncodingSpec::SinusoidalXyT { base, length, xy_length } = *encoding else {
                    return config_err("transformer_xy stem requires a sinusoidal_xy_t encoding");
                };
                let width = 2 * length + 4 * xy_length;
                let d = *dim;
                Stem::Transformer {
                    embed: Dense::new(store, rng, "stem.embed", d, width),
                    q: Dense::new(store, rng, "stem.q", d, d),
                    k: Dense::new(store, rng, "stem.k", d, d),
                    v: Dense::new(store, rng, "stem.v", d, d),
                    o: Dense::new(store, rng, "stem.o", d, d),
                    ff1: Dense::new(store, rng, "stem.ff1", d, d),
                    ff2: Dense::new(store, rng, "stem.ff2", d, d),
                    out: Dense::new(store, rng, "stem.out", out_shape[2], d),
                    heads: *heads,
                    base,
                    length,
                    xy_length,
                    out_shape,
                }
            }
            StemSpec::Stemless { .. } => Stem::Identity { out_shape },
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        match self {
            Stem::Dense { out_shape, .. } | Stem::Transformer { out_shape, .. } | Stem::Identity { out_shape } => {
                *out_shape
            }
        }
    }

    /// Produces `(N, fc_h, fc_w, fc_dim)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, encoded: Var, ts: &[f64]) -> Result<Var> {
        let [h, w, d] = self.out_shape();
        let n = ts.len();
        match self {
            Stem::Dense { layers, in_dim, .. } => {
                let got = *g.shape(encoded).last().unwrap_or(&0);
                if g.shape(encoded).len() != 2 || got != *in_dim {
                    return config_err(format!("stem expects encoding width {in_dim}, got {:?}", g.shape(encoded)));
                }
                let mut x = encoded;
                for layer in layers {
                    x = layer.apply(g, bound, x);
                    x = g.activation(x, Activation::Gelu);
                }
                Ok(g.reshape(x, &[n, h, w, d]))
            }
            Stem::Transformer { embed, q, k, v, o, ff1, ff2, out, heads, base, length, xy_length, .. } => {
                let tokens = g.constant(xy_tokens(ts, *base, *length, *xy_length, h, w)?);
                let x = embed.apply(g, bound, tokens);
                let (qv, kv, vv) = (q.apply(g, bound, x), k.apply(g, bound, x), v.apply(g, bound, x));
                let a = g.attention(qv, kv, vv, *heads);
                let a = o.apply(g, bound, a);
                let x = g.add(x, a);
                let f = ff1.apply(g, bound, x);
                let f = g.activation(f, Activation::Gelu);
                let f = ff2.apply(g, bound, f);
                let x = g.add(x, f);
                let y = out.apply(g, bound, x);
                Ok(g.reshape(y, &[n, h, w, d]))
            }
            Stem::Identity { .. } => {
                if g.shape(encoded) != [n, h, w, d] {
                    return config_err(format!(
                        "stemless expects a grid slice ({n}, {h}, {w}, {d}), got {:?}",
                        g.shape(encoded)
                    ));
                }
                Ok(encoded)
            }
        }
    }
}

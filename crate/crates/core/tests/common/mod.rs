#![allow(dead_code)]

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use nervlab::autodiff::{Activation, Graph, Var};
use nervlab::components::{
    BlockKind, BlockSpec, EncodingSpec, FinalActivation, FuseKind, ModelConfig, NervModel, NormKind, SkipSpec,
    StemSpec,
};
use nervlab::hypernerv::modulate_graph;
use nervlab::params::Bound;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_INSTANCES: usize = 20;
const FD_SAMPLES_PER_TENSOR: usize = 6;
/// Gradient norms below this are treated as exactly zero.
pub const FD_ZERO_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi))
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < FD_ZERO_FLOOR {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares analytic gradients of `loss` against fourth-order central
/// differences with step [`FD_STEP`] on a random subset of every tensor's
/// entries; returns the worst per-tensor relative error.
pub fn fd_check<F>(params: &[ArrayD<f64>], loss: F, rng: &mut impl Rng) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss(&mut g, &vars);
    let grads = g.backward(out);
    let value = |ps: &[ArrayD<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = loss(&mut g, &vars);
        g.value(out).iter().sum::<f64>()
    };
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let grad = grads.get(*v).cloned().unwrap_or_else(|| ArrayD::zeros(params[i].raw_dim()));
        let n = params[i].len();
        let picks: Vec<usize> = if n <= FD_SAMPLES_PER_TENSOR {
            (0..n).collect()
        } else {
            (0..FD_SAMPLES_PER_TENSOR).map(|_| rng.random_range(0..n)).collect()
        };
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for &j in &picks {
            let orig = params[i].as_slice().expect("standard layout")[j];
            let mut at = |offset: f64| {
                work[i].as_slice_mut().unwrap()[j] = orig + offset * FD_STEP;
                value(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            work[i].as_slice_mut().unwrap()[j] = orig;
            num.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * FD_STEP));
            a.push(grad.as_slice().expect("standard layout")[j]);
        }
        worst = worst.max(relative_error(&a, &num));
    }
    worst
}

/// Gradient check of `sum(model(ts) * proj)` over every parameter tensor.
pub fn model_fd_error(model: &NervModel<f64>, ts: &[f64], rng: &mut impl Rng) -> f64 {
    let [h, w] = model.config().target_resolution;
    let proj = uniform(rng, &[ts.len(), h, w, 3], -1.0, 1.0);
    let tensors: Vec<ArrayD<f64>> = model.params().iter().map(|(_, t)| t.as_standard_layout().to_owned()).collect();
    let template = model.clone();
    fd_check(
        &tensors,
        |g, vars| {
            let bound = Bound(vars.to_vec());
            let fwd = template.forward_graph(g, &bound, ts).expect("forward");
            let p = g.constant(proj.clone());
            let m = g.mul(fwd.output, p);
            g.sum(m)
        },
        rng,
    )
}

/// Gradient check of the hypo weight modulation on random shapes.
pub fn modulation_fd_error(rng: &mut impl Rng) -> f64 {
    let rows = rng.random_range(1..5usize);
    let k = [1usize, 3][rng.random_range(0..2)];
    let cin = rng.random_range(1..4usize);
    let n = rows * k * k * cin;
    let divisors: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
    let unit = divisors[rng.random_range(0..divisors.len())];
    let dims: Vec<usize> = (1..=unit).filter(|d| unit % d == 0).collect();
    let dim = dims[rng.random_range(0..dims.len())];
    let shared = uniform(rng, &[rows, k, k, cin], -1.0, 1.0);
    let tokens = uniform(rng, &[unit / dim, dim], -1.0, 1.0);
    let gain = uniform(rng, &[rows], 0.5, 1.5);
    let proj = uniform(rng, &[rows, k, k, cin], -1.0, 1.0);
    fd_check(
        &[shared, tokens, gain],
        |g, v| {
            let m = modulate_graph(g, v[0], v[1], v[2]);
            let p = g.constant(proj.clone());
            let m = g.mul(m, p);
            g.sum(m)
        },
        rng,
    )
}

/// Component families exercised by the gradient and shape checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    SinusoidalEncoding,
    GridEncoding,
    XyEncoding,
    MlpStem,
    NervBlock,
    FfnervBlock,
    BilinearBlock,
    TemporalSkip,
    LocalGridSkip,
    Head,
}

pub const FAMILIES: [Family; 10] = [
    Family::SinusoidalEncoding,
    Family::GridEncoding,
    Family::XyEncoding,
    Family::MlpStem,
    Family::NervBlock,
    Family::FfnervBlock,
    Family::BilinearBlock,
    Family::TemporalSkip,
    Family::LocalGridSkip,
    Family::Head,
];

fn pick<T: Copy>(rng: &mut impl Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// A small valid config built around one component family.
pub fn random_config(family: Family, rng: &mut impl Rng) -> ModelConfig {
    let fc = [rng.random_range(1..3usize), rng.random_range(1..3usize), rng.random_range(2..5usize)];
    let nblocks = rng.random_range(1..3usize);
    let kind = match family {
        Family::FfnervBlock => BlockKind::FfnervDouble,
        Family::BilinearBlock => BlockKind::BilinearConv,
        Family::NervBlock => BlockKind::NervBasic,
        _ => pick(rng, &[BlockKind::NervBasic, BlockKind::FfnervDouble, BlockKind::BilinearConv]),
    };
    let blocks: Vec<BlockSpec> = (0..nblocks)
        .map(|_| {
            let mut b = BlockSpec::new(kind, [pick(rng, &[1, 2, 3]), pick(rng, &[1, 2, 3])], 0, 0);
            b.kernel_size = pick(rng, &[1, 3]);
            b.activation = pick(rng, &[Activation::Gelu, Activation::Sine]);
            if matches!(family, Family::NervBlock | Family::FfnervBlock | Family::BilinearBlock) && rng.random_bool(0.5) {
                b.norm = NormKind::LayerNorm;
            }
            if kind == BlockKind::FfnervDouble && rng.random_bool(0.3) {
                b.groups = Some(1);
            }
            b
        })
        .collect();
    let sinusoid = EncodingSpec::SinusoidalT { base: rng.random_range(1.1..2.0), length: rng.random_range(1..4) };
    let grid = EncodingSpec::TemporalGrid { grid_frames: rng.random_range(2..5), grid_shape: fc };
    let (encoding, stem) = match family {
        Family::SinusoidalEncoding => (sinusoid, StemSpec::SingleFc { out_shape: fc }),
        Family::GridEncoding => (grid, StemSpec::Stemless { out_shape: fc }),
        Family::XyEncoding => (
            EncodingSpec::SinusoidalXyT {
                base: rng.random_range(1.1..2.0),
                length: rng.random_range(1..3),
                xy_length: rng.random_range(1..3),
            },
            StemSpec::TransformerXy { dim: pick(rng, &[4, 6]), heads: 2, out_shape: fc },
        ),
        Family::MlpStem => (sinusoid, StemSpec::Mlp { hidden_dims: vec![rng.random_range(3..7)], out_shape: fc }),
        _ => {
            if rng.random_bool(0.5) {
                (grid, StemSpec::Stemless { out_shape: fc })
            } else {
                (sinusoid, StemSpec::SingleFc { out_shape: fc })
            }
        }
    };
    let skip = match family {
        Family::TemporalSkip => {
            let mut s = SkipSpec::t_skip(pick(rng, &[FuseKind::Add, FuseKind::AffineModulate]), rng.random_bool(0.5));
            s.t_length = rng.random_range(1..4);
            s
        }
        Family::LocalGridSkip => SkipSpec::local_grid(rng.random_range(2..4), rng.random_range(1..4)),
        _ => SkipSpec::default(),
    };
    let (sh, sw) = blocks.iter().fold((1, 1), |(a, b), s| (a * s.stride[0], b * s.stride[1]));
    let mut cfg = ModelConfig {
        name: format!("{family:?}"),
        target_resolution: [fc[0] * sh, fc[1] * sw],
        exp: rng.random_range(1.0..2.0),
        r: rng.random_range(1.0..1.5),
        encoding,
        stem,
        blocks,
        skip,
        head_kernel: if family == Family::Head { pick(rng, &[1, 3]) } else { 3 },
        final_activation: if family == Family::Head {
            pick(rng, &[FinalActivation::Sigmoid, FinalActivation::TanhShift, FinalActivation::AddHalf])
        } else {
            FinalActivation::Sigmoid
        },
    };
    cfg.replan();
    cfg
}

/// Worst gradient error over [`FD_INSTANCES`] random instances of `family`.
pub fn family_fd_error(family: Family, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..FD_INSTANCES {
        let cfg = random_config(family, &mut r);
        cfg.validate().unwrap_or_else(|e| panic!("{family:?} instance {i}: {e}"));
        let model = NervModel::<f64>::new(&cfg, seed * 1000 + i as u64).expect("model");
        let ts = [r.random_range(0.0..1.0), r.random_range(0.0..1.0)];
        worst = worst.max(model_fd_error(&model, &ts, &mut r));
    }
    worst
}

/// Reference MS-SSIM: direct 2D Gaussian filtering, 2x2 average pooling,
/// negative contrast terms clamped at zero, channels averaged.
pub fn reference_ms_ssim(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let size = 11usize;
    let sigma = 1.5f64;
    let mut win = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - 5.0;
            let dx = x as f64 - 5.0;
            win[[y, x]] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total = win.sum();
    win.mapv_inplace(|v| v / total);
    let filter = |p: &Array2<f64>| {
        let (h, w) = p.dim();
        Array2::from_shape_fn((h - size + 1, w - size + 1), |(y, x)| {
            let mut acc = 0.0;
            for i in 0..size {
                for j in 0..size {
                    acc += win[[i, j]] * p[[y + i, x + j]];
                }
            }
            acc
        })
    };
    let pool = |p: &Array2<f64>| {
        let (h, w) = (p.nrows() / 2, p.ncols() / 2);
        Array2::from_shape_fn((h, w), |(y, x)| {
            (p[[2 * y, 2 * x]] + p[[2 * y + 1, 2 * x]] + p[[2 * y, 2 * x + 1]] + p[[2 * y + 1, 2 * x + 1]]) / 4.0
        })
    };
    let channels = a.dim().2;
    let mut sum = 0.0;
    for ch in 0..channels {
        let mut x = a.index_axis(ndarray::Axis(2), ch).to_owned();
        let mut y = b.index_axis(ndarray::Axis(2), ch).to_owned();
        let mut value = 1.0;
        for (s, wgt) in WEIGHTS.iter().enumerate() {
            let mx = filter(&x);
            let my = filter(&y);
            let sxx = filter(&(&x * &x)) - &mx * &mx;
            let syy = filter(&(&y * &y)) - &my * &my;
            let sxy = filter(&(&x * &y)) - &mx * &my;
            let cs_map = (2.0 * &sxy + c2) / (&sxx + &syy + c2);
            let l_map = (2.0 * &mx * &my + c1) / (&mx * &mx + &my * &my + c1);
            let term = if s == WEIGHTS.len() - 1 { (&l_map * &cs_map).mean().unwrap() } else { cs_map.mean().unwrap() };
            value *= term.max(0.0).powf(*wgt);
            x = pool(&x);
            y = pool(&y);
        }
        sum += value;
    }
    (sum / channels as f64).clamp(0.0, 1.0)
}

/// Direct "same" convolution `(H, W, Cin) * (Cout, k, k, Cin) + bias`.
pub fn reference_conv(input: &Array3<f64>, weight: &ArrayD<f64>, bias: &[f64]) -> Array3<f64> {
    let (h, w, cin) = input.dim();
    let (cout, k) = (weight.shape()[0], weight.shape()[1]);
    let p = (k / 2) as isize;
    Array3::from_shape_fn((h, w, cout), |(y, x, co)| {
        let mut acc = bias[co];
        for ky in 0..k {
            for kx in 0..k {
                let (sy, sx) = (y as isize + ky as isize - p, x as isize + kx as isize - p);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                for ci in 0..cin {
                    acc += weight[[co, ky, kx, ci]] * input[[sy as usize, sx as usize, ci]];
                }
            }
        }
        acc
    })
}

pub const CODEC_INSTANCES: usize = 1000;
pub const UNIFORM_SYMBOLS: usize = 200_000;
pub const UNIFORM_BYTE_TOL: f64 = 0.02;

/// Tensor with a random shape drawn from one of several value distributions.
pub fn random_tensor(rng: &mut impl Rng) -> ArrayD<f64> {
    let rank = rng.random_range(1..5usize);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..9usize)).collect();
    let n: usize = shape.iter().product();
    let scale = 10f64.powf(rng.random_range(-4.0..2.0));
    let kind = rng.random_range(0..4u8);
    let data = (0..n)
        .map(|_| match kind {
            0 => rng.random_range(-scale..scale),
            1 => {
                let sum: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum();
                sum * scale
            }
            2 if rng.random_bool(0.8) => 0.0,
            2 => rng.random_range(-scale..scale),
            _ => scale * rng.random_range(-1.0f64..1.0).powi(3),
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
}

/// Quantizes, entropy-codes and decodes one random tensor; describes the
/// first violated property.
pub fn codec_instance(rng: &mut impl Rng) -> Result<(), String> {
    use nervlab::codec::{dequantize, quantize, CodedTensor};
    let x = random_tensor(rng);
    let bits = rng.random_range(4..=8u8);
    let q = quantize(&x, bits).map_err(|e| e.to_string())?;
    let coded = CodedTensor::encode("t", &q).map_err(|e| e.to_string())?;
    let back = coded.decode(bits).map_err(|e| e.to_string())?;
    if back != q {
        return Err(format!("{bits}-bit tensor {:?} did not decode bit-exactly", x.shape()));
    }
    let rec: ArrayD<f64> = dequantize(&back);
    for (a, b) in x.iter().zip(rec.iter()) {
        if (a - b).abs() > q.scale / 2.0 * (1.0 + 1e-12) {
            return Err(format!("{bits}-bit error {} exceeds half step {}", (a - b).abs(), q.scale / 2.0));
        }
    }
    Ok(())
}

/// Coded bytes per symbol of uniformly random 8-bit symbols.
pub fn uniform_symbol_bytes(seed: u64) -> f64 {
    use nervlab::codec::{entropy_encode, FrequencyTable};
    let mut r = rng(seed);
    let symbols: Vec<i32> = (0..UNIFORM_SYMBOLS).map(|_| r.random_range(-127..=127)).collect();
    let table = FrequencyTable::from_symbols(&symbols);
    entropy_encode(&symbols, &table).unwrap().len() as f64 / UNIFORM_SYMBOLS as f64
}

pub const HYPER_CLIPS: usize = 50;
pub const HYPER_STEPS: usize = 2000;
pub const HYPER_MIN_GAIN_DB: f64 = 3.0;

pub struct DeskHyperRun {
    pub net: nervlab::hypernerv::HyperNerv<f32>,
    pub clips: Vec<nervlab::video::VideoTensor<f32>>,
    pub history: Vec<nervlab::hypernerv::HyperHistoryRow>,
}

/// Desk hyper-network trained with weight token masking on 50 synthetic clips.
pub fn desk_hyper_run() -> DeskHyperRun {
    use nervlab::hypernerv::{hyper_train, HyperConfig, HyperNerv, HyperTrainOptions, HypoLayout};
    let layout = HypoLayout::desk();
    let [h, w] = layout.output_size();
    let clips: Vec<_> = (0..HYPER_CLIPS as u64)
        .map(|s| nervlab::video::VideoTensor::<f32>::synthetic(layout.clip_frames, h, w, 100 + s))
        .collect();
    let mut net = HyperNerv::<f32>::new(&layout, &HyperConfig::desk(), 0).unwrap();
    let opts = HyperTrainOptions { steps: HYPER_STEPS, lr: 1e-4, masking: true, ..Default::default() };
    let history = hyper_train(&mut net, &clips, &opts).unwrap();
    DeskHyperRun { net, clips, history }
}

pub const XINC_MODELS: usize = 50;
pub const XINC_TOL: f64 = 1e-5;

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn first_frame(a: &ArrayD<f64>, index: usize) -> Array3<f64> {
    a.index_axis(ndarray::Axis(0), index).to_owned().into_dimensionality().unwrap()
}

/// Worst deviation of the conv-head map sums of random model `m` from the
/// head pre-activation, a direct convolution, and the activated output.
pub fn xinc_conv_error(m: usize) -> f64 {
    use nervlab::xinc::head_contributions;
    let mut r = rng(1000 + m as u64);
    let cfg = random_config(FAMILIES[m % FAMILIES.len()], &mut r);
    let model = NervModel::<f64>::new(&cfg, m as u64).unwrap();
    let t: f64 = r.random_range(0.0..1.0);
    let maps = head_contributions(&model, t).unwrap();
    let mut g = Graph::new();
    let bound = model.params().bind_const(&mut g);
    let vars = model.forward_graph(&mut g, &bound, &[t]).unwrap();
    let pre = first_frame(g.value(vars.pre_activation), 0);
    let input = first_frame(g.value(vars.head_input), 0);
    let out = first_frame(g.value(vars.output), 0);
    let weight = model.params().get(model.head().weight()).clone();
    let bias: Vec<f64> = model.params().get(model.head().bias()).iter().copied().collect();
    assert_eq!(maps.num_kernels(), input.dim().2 * 3);
    let sum = maps.channel_sum();
    max_abs_diff(&sum, &pre)
        .max(max_abs_diff(&sum, &reference_conv(&input, &weight, &bias)))
        .max(max_abs_diff(&maps.activated(cfg.final_activation), &out))
}

/// Random valid hypo-network layout with mixed square and rectangular strides.
pub fn random_hypo_layout(r: &mut impl Rng) -> nervlab::hypernerv::HypoLayout {
    use nervlab::hypernerv::{HypoLayer, HypoLayout, MaskFill};
    let pos_dim = r.random_range(1..4usize);
    let fc = r.random_range(2..5usize);
    let depth = r.random_range(1..4usize);
    let mut chans = vec![pos_dim];
    chans.extend(std::iter::repeat_n(fc, depth - 1));
    chans.push(3);
    let layers = (0..depth)
        .map(|i| {
            let s = r.random_range(1..4usize);
            let upscale = if r.random_bool(0.5) { [s, s] } else { [s, r.random_range(1..4usize)] };
            let mut l = HypoLayer {
                kernel: if r.random_bool(0.5) { 1 } else { 3 },
                upscale,
                in_channels: chans[i],
                out_channels: chans[i + 1],
                tokens_max: 0,
                tokens_min: 0,
                token_dim: 0,
            };
            if r.random_bool(0.7) {
                let tokens = if l.weight_count() % 2 == 0 { 2 } else { 1 };
                l.tokens_max = tokens;
                l.tokens_min = tokens / 2;
                l.token_dim = l.weight_count() / tokens;
            }
            l
        })
        .collect();
    HypoLayout {
        name: "random".into(),
        clip_frames: r.random_range(1..4usize),
        base: [r.random_range(1..3usize), r.random_range(1..3usize)],
        pos_dim,
        fc_dim: fc,
        layers,
        activation: Activation::Gelu,
        final_activation: FinalActivation::Sigmoid,
        mask_fill: MaskFill::Zero,
    }
}

/// Worst deviation of the shuffle-head map sums of random hypo-network `m`
/// from a direct convolution (before the shuffle) and from the shuffled
/// pre-activation; fails if any kernel leaves its lattice slot.
pub fn xinc_shuffle_error(m: usize) -> Result<f64, String> {
    use nervlab::hypernerv::{HyperConfig, HyperNerv};
    use nervlab::xinc::{hypo_head_contributions, shuffle_contributions};
    let hyper = HyperConfig { patch: 1, d_model: 4, ff_dim: 4, heads: 1, blocks: 1 };
    let mut r = rng(2000 + m as u64);
    let layout = random_hypo_layout(&mut r);
    let net = HyperNerv::<f64>::new(&layout, &hyper, m as u64).map_err(|e| e.to_string())?;
    let masked = layout.supports_masking() && r.random_bool(0.5);
    let tokens: Vec<Option<ArrayD<f64>>> = layout
        .layers
        .iter()
        .map(|l| l.is_modulated().then(|| uniform(&mut r, &[l.stored_tokens(masked), l.token_dim], -1.0, 1.0)))
        .collect();
    let (input, weight, bias, pre) = net
        .render_vars(&tokens, masked, |g, v| {
            let get = |x: Var| g.value(x).clone();
            (get(v.head_input), get(v.head_weight), get(v.head_bias), get(v.pre_activation))
        })
        .map_err(|e| e.to_string())?;
    let frame = r.random_range(0..layout.clip_frames);
    let maps = hypo_head_contributions(&net, &tokens, masked, frame).map_err(|e| e.to_string())?;
    let bias: Vec<f64> = bias.iter().copied().collect();
    let conv = reference_conv(&first_frame(&input, frame), &weight, &bias);
    let shuffled = shuffle_contributions(&maps);
    let err = max_abs_diff(&maps.channel_sum(), &conv).max(max_abs_diff(&shuffled.channel_sum(), &first_frame(&pre, frame)));

    let [sh, sw] = layout.layers.last().unwrap().upscale;
    let (h, w) = maps.resolution();
    for k in 0..shuffled.num_kernels() {
        let (i, j) = shuffled.lattice_slot(k);
        let src = maps.maps.index_axis(ndarray::Axis(0), k);
        let dst = shuffled.maps.index_axis(ndarray::Axis(0), k);
        for y in 0..h {
            for x in 0..w {
                for a in 0..sh {
                    for b in 0..sw {
                        let v = dst[[y * sh + a, x * sw + b]];
                        let want = if (a, b) == (i, j) { src[[y, x]] } else { 0.0 };
                        if v != want {
                            return Err(format!("kernel {k} breaks its lattice slot ({i}, {j}) at ({y}, {x})"));
                        }
                    }
                }
            }
        }
    }
    Ok(err)
}

/// Masking properties of a mask-trained hyper-network on its first clip:
/// half the tokens stored per masked layer, dropped tokens irrelevant to the
/// decode, and bitstreams that decode to the direct hypo forward.
pub fn masking_semantics(run: &DeskHyperRun) -> Result<(), String> {
    use nervlab::hypernerv::{apply_mask, decode_clip, encode_clip, zero_dropped, ClipBitstream};
    let net = &run.net;
    if !net.mask_trained() {
        return Err("network is not mask-trained".into());
    }
    let layout = net.layout().clone();
    let clip = &run.clips[0];
    let tokens = net.predict_tokens(clip).map_err(|e| e.to_string())?;
    let kept = apply_mask(&tokens, &layout, true);
    for (i, ((k, t), l)) in kept.iter().zip(&tokens).zip(&layout.layers).enumerate() {
        if let (Some(k), Some(t)) = (k, t) {
            if l.tokens_min < l.tokens_max && 2 * k.shape()[0] != t.shape()[0] {
                return Err(format!("layer {i} keeps {} of {} tokens", k.shape()[0], t.shape()[0]));
            }
        }
    }
    let masked = net.render_tokens(&kept, true).map_err(|e| e.to_string())?;
    let zeroed = net.render_tokens(&zero_dropped(&tokens, &layout), false).map_err(|e| e.to_string())?;
    if masked != zeroed {
        return Err("zeroing dropped tokens changes the unmasked decode".into());
    }
    let full = encode_clip(net, clip, false, 8).map_err(|e| e.to_string())?;
    let half = encode_clip(net, clip, true, 8).map_err(|e| e.to_string())?;
    if let Some(w) = full.warning.or(half.warning) {
        return Err(format!("unexpected warning: {w}"));
    }
    if 2 * half.bitstream.stored_params() != full.bitstream.stored_params() {
        return Err(format!("masked stream stores {} of {} params", half.bitstream.stored_params(), full.bitstream.stored_params()));
    }
    for enc in [&full.bitstream, &half.bitstream] {
        let bs = ClipBitstream::from_bytes(&enc.to_bytes()).map_err(|e| e.to_string())?;
        let decoded = decode_clip(&bs, net).map_err(|e| e.to_string())?;
        let direct = net.render_tokens(&bs.tokens::<f32>(&layout).map_err(|e| e.to_string())?, bs.masked).map_err(|e| e.to_string())?;
        if decoded.frames().clone().into_dyn() != direct {
            return Err(format!("decode (masked {}) differs from the direct hypo forward", bs.masked));
        }
    }
    Ok(())
}

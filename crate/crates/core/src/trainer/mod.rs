//! Per-video fitting under epoch, wall-clock or FLOPs budgets.

pub mod checkpoint;

use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::budget::estimate_flops;
use crate::components::NervModel;
use crate::error::{config_err, NervError, Result};
use crate::metrics::psnr;
use crate::params::{Adam, ParamStore};
use crate::scalar::Scalar;
use crate::video::{as_batch, VideoTensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint};

/// Forward plus backward is charged as this multiple of a forward pass.
pub const TRAIN_FLOPS_FACTOR: u64 = 3;

/// Linear warmup to `peak_lr` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return config_err(format!("warmup ({warmup_steps} steps) must be shorter than training ({total_steps} steps)"));
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Mse,
    /// `alpha * L1 + (1 - alpha) * (1 - SSIM)`.
    L1Ssim { alpha: f64 },
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Mse
    }
}

impl LossSpec {
    pub const DEFAULT_ALPHA: f64 = 0.7;
}

pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &ArrayD<T>, spec: LossSpec) -> Var {
    match spec {
        LossSpec::Mse => g.mse(pred, target),
        LossSpec::L1Ssim { alpha } => {
            let l1 = g.l1(pred, target);
            let l1 = g.scale(l1, T::of(alpha));
            let s = g.ssim_loss(pred, target);
            let s = g.scale(s, T::of(1.0 - alpha));
            g.add(l1, s)
        }
    }
}

/// Loss value between two `(N, H, W, 3)` arrays.
pub fn loss_value<T: Scalar>(pred: &ArrayD<T>, target: &ArrayD<T>, spec: LossSpec) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = reconstruction_loss(&mut g, p, target, spec);
    g.value(l).iter().next().copied().unwrap_or_else(T::zero).f64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Budget {
    Epochs { amount: usize },
    WallSeconds { amount: f64 },
    Flops { amount: u64 },
    /// Time taken by `epochs` epochs of a reference config; resolved to
    /// seconds by [`calibrate_reference`] before training.
    Reference { config: String, epochs: usize },
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Budget::Epochs { amount } => *amount > 0,
            Budget::WallSeconds { amount } => amount.is_finite() && *amount > 0.0,
            Budget::Flops { amount } => *amount > 0,
            Budget::Reference { epochs, .. } => *epochs > 0,
        };
        if ok {
            Ok(())
        } else {
            config_err(format!("budget must be positive, got {self:?}"))
        }
    }

    /// Parses `name:epochs` or `name×epochs`, e.g. `nerv:300`.
    pub fn parse_reference(text: &str) -> Result<Budget> {
        let (name, n) = text
            .split_once(':')
            .or_else(|| text.split_once('×'))
            .ok_or_else(|| NervError::Config(format!("reference budget `{text}` is not of the form name:epochs")))?;
        let epochs = n
            .trim()
            .parse::<usize>()
            .map_err(|_| NervError::Config(format!("reference budget `{text}`: `{n}` is not an epoch count")))?;
        let b = Budget::Reference { config: name.trim().to_lowercase(), epochs };
        b.validate()?;
        Ok(b)
    }
}

/// Timing sample of a reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub reference: String,
    pub epoch_seconds: Vec<f64>,
    pub seconds_per_epoch: f64,
}

pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Calibration {
    pub fn from_samples(reference: impl Into<String>, epoch_seconds: Vec<f64>) -> Self {
        let seconds_per_epoch = median(&epoch_seconds);
        Calibration { reference: reference.into(), epoch_seconds, seconds_per_epoch }
    }

    /// Converts a reference budget into seconds; other budgets pass through.
    pub fn resolve(&self, budget: &Budget) -> Budget {
        match budget {
            Budget::Reference { epochs, .. } => Budget::WallSeconds { amount: self.seconds_per_epoch * *epochs as f64 },
            other => other.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub peak_lr: f64,
    pub batch_frames: usize,
    pub seed: u64,
    pub loss: LossSpec,
    pub warmup_epochs: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { peak_lr: 5e-3, batch_frames: 1, seed: 0, loss: LossSpec::Mse, warmup_epochs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub psnr: f64,
    pub elapsed: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    /// Seconds spent in optimisation steps (evaluation excluded).
    pub elapsed: f64,
    pub flops_done: u64,
    pub lr: f64,
    /// Duration of the most recent step.
    pub last_step_seconds: f64,
    pub history: Vec<HistoryRow>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub initial_loss: f64,
    pub initial_psnr: f64,
    pub best_psnr: f64,
    pub best_epoch: usize,
    /// Training-loss value of the best parameters on the whole video.
    pub best_loss: f64,
}

fn evaluate<T: Scalar>(model: &NervModel<T>, video: &VideoTensor<T>, loss: LossSpec) -> Result<(f64, f64)> {
    let rendered = model.render_video(video.num_frames(), video.frame_rate)?;
    let mut total = 0.0;
    for i in 0..video.num_frames() {
        total += loss_value(&as_batch(rendered.frame(i)), &as_batch(video.frame(i)), loss);
    }
    Ok((total / video.num_frames() as f64, psnr(&rendered, video)?))
}

/// Fits `model` to `video`, leaving the best-PSNR parameters in `model`.
///
/// The budget is checked after every optimisation step; training stops at
/// the first step that exhausts it. Evaluation runs once before training and
/// after every epoch and is not charged to the wall-clock budget.
pub fn train<T: Scalar>(
    model: &mut NervModel<T>,
    video: &VideoTensor<T>,
    budget: &Budget,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    budget.validate()?;
    if let Budget::Reference { config, .. } = budget {
        return config_err(format!("reference budget `{config}` must be calibrated before training"));
    }
    if model.resolution() != video.resolution() {
        return config_err(format!(
            "model renders {:?} but the video is {:?}",
            model.resolution(),
            video.resolution()
        ));
    }
    if opts.batch_frames == 0 || !(opts.peak_lr > 0.0) {
        return config_err("batch_frames and peak_lr must be positive");
    }
    if let LossSpec::L1Ssim { alpha } = opts.loss {
        let (h, w) = video.resolution();
        if !(0.0..=1.0).contains(&alpha) || h.min(w) < 11 {
            return config_err("l1_ssim needs alpha in [0, 1] and frames of at least 11x11");
        }
    }
    let frames = video.num_frames();
    let batch = opts.batch_frames.min(frames);
    let steps_per_epoch = frames.div_ceil(batch);
    let flops_per_step = TRAIN_FLOPS_FACTOR * estimate_flops(model.config()) * batch as u64;
    let planned = match budget {
        Budget::Epochs { amount } => Some(amount * steps_per_epoch),
        Budget::Flops { amount } => Some((amount.div_ceil(flops_per_step)) as usize),
        _ => None,
    };
    let warmup_for = |total: usize| (opts.warmup_epochs * steps_per_epoch).min(total.saturating_sub(1) / 2);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(model.params());
    let (initial_loss, initial_psnr) = evaluate(model, video, opts.loss)?;
    let mut best: ParamStore<T> = model.params().clone();
    let (mut best_psnr, mut best_loss, mut best_epoch) = (initial_psnr, initial_loss, 0);
    let mut state = TrainState::default();
    state.history.push(HistoryRow { step: 0, epoch: 0, loss: initial_loss, psnr: initial_psnr, elapsed: 0.0, flops: 0 });

    let mut order: Vec<usize> = (0..frames).collect();
    let mut done = false;
    while !done {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let total = planned.unwrap_or_else(|| match budget {
                Budget::WallSeconds { amount } if state.step > 0 => {
                    ((state.step as f64 * amount / state.elapsed.max(1e-9)).round() as usize).max(state.step + 2)
                }
                _ => steps_per_epoch * 1000,
            });
            let total = total.max(2);
            let lr = lr_schedule(state.step, total, warmup_for(total), opts.peak_lr)?;
            let started = Instant::now();
            let ts: Vec<f64> = chunk.iter().map(|&i| video.timestamp(i)).collect();
            let target = video.batch(chunk);
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let fwd = model.forward_graph(&mut g, &bound, &ts)?;
            let loss_var = reconstruction_loss(&mut g, fwd.output, &target, opts.loss);
            let loss = g.value(loss_var).iter().next().copied().unwrap_or_else(T::zero).f64();
            if !loss.is_finite() {
                return Err(NervError::Numeric { step: state.step, lr, reason: format!("loss is {loss}") });
            }
            let mut grads = g.backward(loss_var);
            let grads = bound.collect(model.params(), &mut grads);
            opt.step(model.params_mut(), &grads, lr);
            let dt = started.elapsed().as_secs_f64();
            state.step += 1;
            state.elapsed += dt;
            state.last_step_seconds = dt;
            state.flops_done += flops_per_step;
            state.lr = lr;
            let exhausted = match budget {
                Budget::Epochs { .. } | Budget::Flops { .. } => state.step >= planned.unwrap_or(0),
                Budget::WallSeconds { amount } => state.elapsed >= *amount,
                Budget::Reference { .. } => unreachable!("rejected above"),
            };
            if exhausted {
                done = true;
                break;
            }
        }
        if !done || state.step % steps_per_epoch == 0 {
            state.epoch += 1;
        }
        let (loss, p) = evaluate(model, video, opts.loss)?;
        if !loss.is_finite() {
            return Err(NervError::Numeric { step: state.step, lr: state.lr, reason: format!("evaluation loss is {loss}") });
        }
        state.history.push(HistoryRow {
            step: state.step,
            epoch: state.epoch,
            loss,
            psnr: p,
            elapsed: state.elapsed,
            flops: state.flops_done,
        });
        if p > best_psnr {
            best_psnr = p;
            best_loss = loss;
            best_epoch = state.epoch;
            best.clone_from(model.params());
        }
    }
    model.params_mut().load_from(&best)?;
    Ok(TrainOutcome { state, initial_loss, initial_psnr, best_psnr, best_epoch, best_loss })
}

/// Times `epochs_sample` epochs of a reference model on `video` and
/// returns the per-epoch median.
pub fn calibrate_reference<T: Scalar>(
    reference: &NervModel<T>,
    video: &VideoTensor<T>,
    epochs_sample: usize,
    opts: &TrainOptions,
) -> Result<Calibration> {
    if epochs_sample == 0 {
        return config_err("calibration needs at least one epoch");
    }
    let mut model = reference.clone();
    let mut samples = Vec::with_capacity(epochs_sample);
    let mut previous = 0.0;
    let out = train(&mut model, video, &Budget::Epochs { amount: epochs_sample }, opts)?;
    for row in out.state.history.iter().skip(1).take(epochs_sample) {
        samples.push(row.elapsed - previous);
        previous = row.elapsed;
    }
    Ok(Calibration::from_samples(reference.config().name.clone(), samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::presets;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_schedule(10, 110, 10, 1.0).unwrap(), 1.0);
        assert!(lr_schedule(110, 110, 10, 1.0).unwrap().abs() < 1e-15);
        assert!((lr_schedule(60, 110, 10, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(lr_schedule(0, 110, 10, 1.0).unwrap(), 0.0);
        assert!(lr_schedule(0, 10, 10, 1.0).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let t = ArrayD::from_elem(ndarray::IxDyn(&[1, 12, 12, 3]), 0.5);
        let p = t.mapv(|v| v + 0.1);
        assert!((loss_value(&p, &t, LossSpec::Mse) - 0.01).abs() < 1e-12);
        assert_eq!(loss_value(&t, &t, LossSpec::Mse), 0.0);
        assert!(loss_value(&t, &t, LossSpec::L1Ssim { alpha: 0.7 }).abs() < 1e-12);
        assert!((loss_value(&p, &t, LossSpec::L1Ssim { alpha: 1.0 }) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reference_parsing_and_resolution() {
        let b = Budget::parse_reference("NeRV×300").unwrap();
        assert_eq!(b, Budget::Reference { config: "nerv".into(), epochs: 300 });
        let cal = Calibration::from_samples("nerv", vec![6.0, 6.0, 6.0]);
        assert_eq!(cal.resolve(&b), Budget::WallSeconds { amount: 1800.0 });
        assert!(Budget::parse_reference("nerv").is_err());
        assert!(Budget::Epochs { amount: 0 }.validate().is_err());
    }

    #[test]
    fn short_run_improves_and_is_reproducible() {
        let video = VideoTensor::<f32>::synthetic(4, 32, 32, 1);
        let cfg = presets::rnerv_desk([32, 32], 4);
        let opts = TrainOptions { peak_lr: 1e-2, ..TrainOptions::default() };
        let run = || {
            let mut m = NervModel::<f32>::new(&cfg, 0).unwrap();
            let out = train(&mut m, &video, &Budget::Epochs { amount: 5 }, &opts).unwrap();
            (m, out)
        };
        let (a, oa) = run();
        let (b, _) = run();
        assert_eq!(a.params(), b.params());
        assert!(oa.best_loss <= oa.initial_loss);
        assert_eq!(oa.state.step, 20);
        assert_eq!(oa.state.epoch, 5);
    }
}

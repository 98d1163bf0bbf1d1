use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::network::HyperNerv;
use crate::autodiff::Graph;
use crate::error::{config_err, data_err, NervError, Result};
use crate::metrics::psnr;
use crate::params::Adam;
use crate::scalar::Scalar;
use crate::video::VideoTensor;

#[derive(Clone, Debug)]
pub struct HyperTrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Drop the latter tokens of every layer for a random subset of samples.
    pub masking: bool,
    pub mask_prob: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the start and end.
    pub eval_every: usize,
}

impl Default for HyperTrainOptions {
    fn default() -> Self {
        HyperTrainOptions { steps: 2000, lr: 1e-4, masking: false, mask_prob: 0.5, seed: 0, eval_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HyperHistoryRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub psnr: f64,
    pub psnr_masked: Option<f64>,
    pub elapsed: f64,
}

/// Consecutive non-overlapping clips; a trailing partial clip is dropped.
pub fn split_clips<T: Scalar>(video: &VideoTensor<T>, clip_frames: usize) -> Result<Vec<VideoTensor<T>>> {
    if clip_frames == 0 || video.num_frames() < clip_frames {
        return data_err(format!("video has {} frames, need at least {clip_frames} per clip", video.num_frames()));
    }
    (0..video.num_frames() / clip_frames).map(|i| video.clip(i * clip_frames, clip_frames)).collect()
}

/// Mean PSNR over `clips`, each reconstructed in a single forward pass.
pub fn mean_psnr<T: Scalar>(net: &HyperNerv<T>, clips: &[VideoTensor<T>], masked: bool) -> Result<f64> {
    if clips.is_empty() {
        return data_err("no clips to evaluate");
    }
    let mut total = 0.0;
    for c in clips {
        total += psnr(&net.reconstruct(c, masked)?, c)?;
    }
    Ok(total / clips.len() as f64)
}

/// Trains backbone, token slots, token FCs and shared parameters jointly
/// with Adam at a fixed learning rate and MSE loss.
pub fn hyper_train<T: Scalar>(
    net: &mut HyperNerv<T>,
    clips: &[VideoTensor<T>],
    opts: &HyperTrainOptions,
) -> Result<Vec<HyperHistoryRow>> {
    if clips.is_empty() {
        return data_err("hyper-network training needs at least one clip");
    }
    for c in clips {
        net.check_clip(c)?;
    }
    if opts.masking && !net.layout().supports_masking() {
        return config_err(format!("layout {} has no layer with tokens_min < tokens_max", net.layout().name));
    }
    if !(opts.lr > 0.0) || !(0.0..=1.0).contains(&opts.mask_prob) {
        return config_err("learning rate must be positive and mask_prob within [0, 1]");
    }
    let evaluate = |net: &HyperNerv<T>| -> Result<(f64, Option<f64>)> {
        let full = mean_psnr(net, clips, false)?;
        let masked = if opts.masking { Some(mean_psnr(net, clips, true)?) } else { None };
        Ok((full, masked))
    };
    let start = Instant::now();
    let (p0, m0) = evaluate(net)?;
    let mut history = vec![HyperHistoryRow { step: 0, loss: f64::NAN, psnr: p0, psnr_masked: m0, elapsed: 0.0 }];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(net.params());
    let mut order: Vec<usize> = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 1..=opts.steps {
        if order.is_empty() {
            order = (0..clips.len()).collect();
            order.shuffle(&mut rng);
        }
        let clip = &clips[order.pop().expect("refilled")];
        let masked = opts.masking && rng.random_bool(opts.mask_prob);
        let mut g = Graph::new();
        let bound = net.params().bind(&mut g);
        let full = net.predict_graph(&mut g, &bound, clip)?;
        let stored: Vec<_> = full
            .iter()
            .zip(&net.layout().layers)
            .map(|(t, l)| t.map(|t| g.slice_rows(t, 0, l.stored_tokens(masked))))
            .collect();
        let vars = net.hypo_graph(&mut g, &bound, &stored, masked)?;
        let idx: Vec<usize> = (0..clip.num_frames()).collect();
        let loss_var = g.mse(vars.output, &clip.batch(&idx));
        let loss = g.value(loss_var).first().copied().unwrap_or_else(T::nan).f64();
        if !loss.is_finite() {
            return Err(NervError::Numeric { step, lr: opts.lr, reason: format!("hyper-network loss is {loss}") });
        }
        let mut grads = g.backward(loss_var);
        let grads = bound.collect(net.params(), &mut grads);
        opt.step(net.params_mut(), &grads, opts.lr);
        loss_sum += loss;
        loss_n += 1;
        if step == opts.steps || (opts.eval_every > 0 && step % opts.eval_every == 0) {
            let (p, m) = evaluate(net)?;
            history.push(HyperHistoryRow {
                step,
                loss: loss_sum / loss_n as f64,
                psnr: p,
                psnr_masked: m,
                elapsed: start.elapsed().as_secs_f64(),
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    if opts.masking {
        net.set_mask_trained(true);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernerv::{HyperConfig, HypoLayout};

    #[test]
    fn short_training_improves() {
        let clips: Vec<_> = (0..3).map(|s| VideoTensor::<f32>::synthetic(8, 32, 32, s)).collect();
        let mut net = HyperNerv::<f32>::new(&HypoLayout::desk(), &HyperConfig::desk(), 0).unwrap();
        let opts = HyperTrainOptions { steps: 30, lr: 1e-3, masking: true, ..Default::default() };
        let h = hyper_train(&mut net, &clips, &opts).unwrap();
        assert!(h.last().unwrap().psnr > h[0].psnr);
        assert!(net.mask_trained());
        let long = VideoTensor::<f32>::synthetic(19, 32, 32, 0);
        assert_eq!(split_clips(&long, 8).unwrap().len(), 2);
    }
}

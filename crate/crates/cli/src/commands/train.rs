use serde::Serialize;
use serde_json::json;

use nervlab::budget::{count_params, estimate_flops};
use nervlab::components::{ModelConfig, NervModel};
use nervlab::metrics::{cap_psnr, evaluate};
use nervlab::trainer::{calibrate_reference, encode_checkpoint, train as fit, Budget, Calibration, TrainOptions, TrainOutcome};
use nervlab::video::VideoTensor;

use super::{check_resolution, config_ref, load_config_file, model_config, parse_budget, preset, reference_config, train_options};
use crate::cli::{BenchArgs, TrainArgs};
use crate::device::device;
use crate::error::{config, Result};
use crate::ingest::ingest_frames;
use crate::manifest::{ExperimentManifest, OutputDir};
use crate::plot::{csv_bytes, line_svg, Series};

/// Turns a reference budget into wall-clock seconds by timing the reference
/// config on `video`; other budgets pass through.
fn resolve_budget(
    budget: &Budget,
    video: &VideoTensor<f32>,
    epochs_sample: usize,
    opts: &TrainOptions,
) -> Result<(Budget, Option<Calibration>)> {
    match budget {
        Budget::Reference { config: name, .. } => {
            let cfg = reference_config(name, video)?;
            let reference = NervModel::<f32>::new(&cfg, opts.seed)?;
            let cal = calibrate_reference(&reference, video, epochs_sample, opts)?;
            Ok((cal.resolve(budget), Some(cal)))
        }
        other => Ok((other.clone(), None)),
    }
}

fn budget_json(requested: &Budget, resolved: &Budget, cal: &Option<Calibration>) -> serde_json::Value {
    json!({ "requested": requested, "resolved": resolved, "calibration": cal })
}

fn steps_per_epoch(video: &VideoTensor<f32>, opts: &TrainOptions) -> usize {
    video.num_frames().div_ceil(opts.batch_frames)
}

fn history_svg(title: &str, runs: &[(String, &TrainOutcome)]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .map(|(name, o)| Series { name: name.clone(), points: o.state.history.iter().map(|r| (r.elapsed, cap_psnr(r.psnr))).collect() })
        .collect();
    line_svg(title, "training seconds", "PSNR (dB)", &series)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let video = ingest_frames::<f32>(&args.frames)?;
    let (cfg, source) = model_config(&args.model)?;
    check_resolution(&cfg, &video)?;
    let opts = train_options(&args.optim)?;
    let requested = parse_budget(&args.budget)?;
    let (budget, cal) = resolve_budget(&requested, &video, args.calibration_epochs, &opts)?;

    let mut model = NervModel::<f32>::new(&cfg, opts.seed)?;
    let outcome = fit(&mut model, &video, &budget, &opts)?;

    out.write("checkpoint.nrvc", &encode_checkpoint(&cfg, model.params()))?;
    out.write("config.toml", cfg.to_toml().as_bytes())?;
    out.write("history.csv", &csv_bytes(&outcome.state.history)?)?;
    out.write("training.svg", history_svg(&cfg.name, &[(cfg.name.clone(), &outcome)]).as_bytes())?;

    let mut manifest = ExperimentManifest::new("train", device);
    manifest.config = Some(config_ref(&cfg, &source));
    manifest.seed = Some(opts.seed);
    manifest.budget = Some(budget_json(&requested, &budget, &cal));
    manifest.add_input(&args.frames)?;
    if let Some(p) = &args.model.config {
        manifest.add_input(p)?;
    }
    manifest.summary = json!({
        "params": model.num_params(),
        "flops_per_frame": estimate_flops(&cfg),
        "steps": outcome.state.step,
        "epochs": outcome.state.epoch,
        "train_seconds": outcome.state.elapsed,
        "initial_psnr": cap_psnr(outcome.initial_psnr),
        "best_psnr": cap_psnr(outcome.best_psnr),
        "best_epoch": outcome.best_epoch,
    });
    if matches!(budget, Budget::WallSeconds { .. }) {
        manifest.notes.push("wall-clock budget: the step count depends on machine speed".into());
    }
    out.finish(manifest)?;
    println!(
        "trained {} ({} params) for {} steps / {:.1}s: best PSNR {:.2} dB",
        cfg.name,
        model.num_params(),
        outcome.state.step,
        outcome.state.elapsed,
        cap_psnr(outcome.best_psnr)
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    config: String,
    params: usize,
    flops_per_frame: u64,
    seconds_per_epoch: f64,
    epochs: f64,
    steps: usize,
    seconds: f64,
    psnr: f64,
    ms_ssim: Option<f64>,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let video = ingest_frames::<f32>(&args.frames)?;
    let opts = train_options(&args.optim)?;
    let mut configs: Vec<(ModelConfig, String)> = Vec::new();
    for p in &args.configs {
        configs.push((load_config_file(p)?, p.display().to_string()));
    }
    for name in &args.presets {
        configs.push((preset(name)?, format!("preset:{name}")));
    }
    if configs.is_empty() {
        return config("bench needs at least one --configs file or --presets name");
    }
    for (cfg, _) in &configs {
        check_resolution(cfg, &video)?;
    }
    let requested = parse_budget(&args.budget)?;
    let (budget, cal) = resolve_budget(&requested, &video, args.calibration_epochs, &opts)?;
    if let Some(c) = &cal {
        out.write("calibration.json", serde_json::to_string_pretty(c).expect("calibration serialises").as_bytes())?;
    }

    let spe = steps_per_epoch(&video, &opts) as f64;
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for (i, (cfg, _)) in configs.iter().enumerate() {
        let mut model = NervModel::<f32>::new(cfg, opts.seed)?;
        let o = fit(&mut model, &video, &budget, &opts)?;
        let rendered = model.render_video(video.num_frames(), video.frame_rate)?;
        let report = evaluate(&rendered, &video, false)?;
        let epochs = o.state.step as f64 / spe;
        rows.push(BenchRow {
            config: cfg.name.clone(),
            params: count_params(cfg),
            flops_per_frame: estimate_flops(cfg),
            seconds_per_epoch: if epochs > 0.0 { o.state.elapsed / epochs } else { f64::NAN },
            epochs,
            steps: o.state.step,
            seconds: o.state.elapsed,
            psnr: report.psnr_capped(),
            ms_ssim: report.ms_ssim,
        });
        out.write(&format!("checkpoints/{i:02}_{}.nrvc", cfg.name), &encode_checkpoint(cfg, model.params()))?;
        outcomes.push((format!("{i:02} {}", cfg.name), o));
    }
    out.write("bench.csv", &csv_bytes(&rows)?)?;
    let refs: Vec<(String, &TrainOutcome)> = outcomes.iter().map(|(n, o)| (n.clone(), o)).collect();
    out.write("bench.svg", history_svg("equal-budget training", &refs).as_bytes())?;

    let mut manifest = ExperimentManifest::new("bench", device);
    manifest.seed = Some(opts.seed);
    manifest.budget = Some(budget_json(&requested, &budget, &cal));
    manifest.add_input(&args.frames)?;
    for p in &args.configs {
        manifest.add_input(p)?;
    }
    manifest.summary = json!({
        "configs": configs.iter().map(|(c, s)| json!({ "name": c.name, "source": s, "hash": c.hash() })).collect::<Vec<_>>(),
    });
    if matches!(budget, Budget::WallSeconds { .. }) {
        manifest.notes.push("wall-clock budget: step counts depend on machine speed".into());
    }
    out.finish(manifest)?;
    for r in &rows {
        println!("{:<20} {:>9} params {:>8.3} s/epoch {:>7.2} epochs  PSNR {:.2} dB", r.config, r.params, r.seconds_per_epoch, r.epochs, r.psnr);
    }
    Ok(())
}

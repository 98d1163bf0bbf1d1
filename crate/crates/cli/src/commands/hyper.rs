use std::path::Path;

use serde::Serialize;
use serde_json::json;

use nervlab::hypernerv::{
    decode_clip, decode_hypernet, encode_clip, encode_hypernet, hyper_train as fit, split_clips, ClipBitstream,
    HyperConfig, HyperNerv, HyperTrainOptions, HypoLayout,
};
use nervlab::metrics::{cap_psnr, psnr};
use nervlab::video::VideoTensor;

use super::read_file;
use crate::cli::{HyperDecodeArgs, HyperEncodeArgs, HyperTrainArgs, Switch};
use crate::device::device;
use crate::error::{config, CliError, Result};
use crate::ingest::{frame_name, frame_png, ingest_frames};
use crate::manifest::{ExperimentManifest, OutputDir};
use crate::plot::{csv_bytes, line_svg, Series};

pub const LAYOUT_NAMES: &str = "hypo-desk, hypo-fc16, hypo-fc20, hypo-mask-large, hypo-mask-small";

/// A named layout, or a JSON layout file.
fn layout(name: &str) -> Result<HypoLayout> {
    if let Some(l) = HypoLayout::by_name(name) {
        return Ok(l);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return config(format!("unknown layout `{name}`; known layouts: {LAYOUT_NAMES}, or a JSON file"));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    let l: HypoLayout = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    l.validate()?;
    Ok(l)
}

fn backbone(name: &str) -> Result<HyperConfig> {
    match name.to_lowercase().as_str() {
        "desk" => Ok(HyperConfig::desk()),
        "full" => Ok(HyperConfig::full()),
        _ => config(format!("unknown backbone `{name}`; use desk or full")),
    }
}

pub fn load_hypernet(path: &Path) -> Result<HyperNerv<f32>> {
    decode_hypernet::<f32>(&read_file(path)?).map_err(|e| match e {
        nervlab::NervError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

pub fn load_clip(path: &Path) -> Result<ClipBitstream> {
    ClipBitstream::from_bytes(&read_file(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Clips of `video` sized for `net`, and the number of trailing frames dropped.
fn clips_for(net: &HyperNerv<f32>, video: &VideoTensor<f32>) -> Result<(Vec<VideoTensor<f32>>, usize)> {
    let [h, w] = net.layout().output_size();
    if video.resolution() != (h, w) {
        let (vh, vw) = video.resolution();
        return config(format!("layout `{}` renders {h}x{w} but the frames are {vh}x{vw}", net.layout().name));
    }
    let n = net.layout().clip_frames;
    let clips = split_clips(video, n)?;
    Ok((clips, video.num_frames() % n))
}

pub fn hyper_train(args: HyperTrainArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let layout = layout(&args.layout)?;
    let cfg = backbone(&args.backbone)?;
    let mut net = HyperNerv::<f32>::new(&layout, &cfg, args.seed)?;
    let mut clips = Vec::new();
    let mut notes = Vec::new();
    for dir in &args.frames {
        let video = ingest_frames::<f32>(dir)?;
        let (c, dropped) = clips_for(&net, &video)?;
        if dropped > 0 {
            notes.push(format!("{}: dropped {dropped} trailing frames that do not fill a clip", dir.display()));
        }
        clips.extend(c);
    }
    let opts = HyperTrainOptions {
        steps: args.steps,
        lr: args.lr,
        masking: args.masking,
        mask_prob: args.mask_prob,
        seed: args.seed,
        eval_every: args.eval_every,
    };
    let history = fit(&mut net, &clips, &opts)?;

    out.write("hypernet.nrvn", &encode_hypernet(&net))?;
    out.write("history.csv", &csv_bytes(&history)?)?;
    let mut series = vec![Series {
        name: "full tokens".into(),
        points: history.iter().map(|r| (r.step as f64, cap_psnr(r.psnr))).collect(),
    }];
    if args.masking {
        series.push(Series {
            name: "masked tokens".into(),
            points: history.iter().filter_map(|r| r.psnr_masked.map(|p| (r.step as f64, cap_psnr(p)))).collect(),
        });
    }
    out.write("training.svg", line_svg("hyper-network training", "step", "mean clip PSNR (dB)", &series).as_bytes())?;

    let mut manifest = ExperimentManifest::new("hyper-train", device);
    manifest.seed = Some(args.seed);
    for dir in &args.frames {
        manifest.add_input(dir)?;
    }
    let first = history.first().expect("history has a start row");
    let last = history.last().expect("history has an end row");
    manifest.summary = json!({
        "layout": layout.name,
        "layout_hash": layout.hash(),
        "backbone": cfg,
        "clips": clips.len(),
        "hyper_params": net.hyper_param_count(),
        "shared_params": net.shared_param_count(),
        "mask_trained": net.mask_trained(),
        "steps": last.step,
        "seconds": last.elapsed,
        "initial_psnr": cap_psnr(first.psnr),
        "final_psnr": cap_psnr(last.psnr),
        "final_psnr_masked": last.psnr_masked.map(cap_psnr),
    });
    manifest.notes = notes;
    out.finish(manifest)?;
    println!(
        "trained on {} clips for {} steps: PSNR {:.2} -> {:.2} dB",
        clips.len(),
        last.step,
        cap_psnr(first.psnr),
        cap_psnr(last.psnr)
    );
    Ok(())
}

#[derive(Serialize)]
struct ClipRow {
    clip: usize,
    first_frame: usize,
    masked: bool,
    stored_params: usize,
    payload_bytes: usize,
    total_bytes: usize,
    raw_bpp: f64,
    coded_bpp: f64,
    psnr: f64,
}

pub fn hyper_encode(args: HyperEncodeArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let net = load_hypernet(&args.hypernet)?;
    let video = ingest_frames::<f32>(&args.frames)?;
    let (clips, dropped) = clips_for(&net, &video)?;
    let mask_on = args.mask == Switch::On;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let enc = encode_clip(&net, clip, mask_on, args.bits)?;
        if let Some(w) = enc.warning {
            if !notes.contains(&w) {
                eprintln!("warning: {w}");
                notes.push(w);
            }
        }
        let bs = enc.bitstream;
        let (t, h, w) = (clip.num_frames(), clip.height(), clip.width());
        let decoded = decode_clip(&bs, &net)?;
        rows.push(ClipRow {
            clip: i,
            first_frame: i * t,
            masked: bs.masked,
            stored_params: bs.stored_params(),
            payload_bytes: bs.payload_bytes(),
            total_bytes: bs.total_bytes(),
            raw_bpp: bs.raw_bpp(t, h, w)?,
            coded_bpp: bs.coded_bpp(t, h, w)?,
            psnr: cap_psnr(psnr(&decoded, clip)?),
        });
        out.write(&format!("clips/clip_{i:05}.nrvh"), &bs.to_bytes())?;
    }
    out.write("encode.csv", &csv_bytes(&rows)?)?;
    if dropped > 0 {
        notes.push(format!("dropped {dropped} trailing frames that do not fill a clip"));
    }

    let n = rows.len().max(1) as f64;
    let mut manifest = ExperimentManifest::new("hyper-encode", device);
    manifest.add_input(&args.hypernet)?;
    manifest.add_input(&args.frames)?;
    manifest.summary = json!({
        "layout": net.layout().name,
        "clips": rows.len(),
        "masked": mask_on,
        "bits": args.bits,
        "mean_psnr": rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        "mean_coded_bpp": rows.iter().map(|r| r.coded_bpp).sum::<f64>() / n,
        "mean_raw_bpp": rows.iter().map(|r| r.raw_bpp).sum::<f64>() / n,
    });
    manifest.notes = notes;
    out.finish(manifest)?;
    println!("encoded {} clips ({} masking)", rows.len(), if mask_on { "with" } else { "without" });
    Ok(())
}

pub fn hyper_decode(args: HyperDecodeArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let net = load_hypernet(&args.hypernet)?;
    let mut frame = 0;
    for path in &args.bitstreams {
        let bs = load_clip(path)?;
        let video = decode_clip(&bs, &net).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for i in 0..video.num_frames() {
            out.write(&format!("frames/{}", frame_name(frame)), &frame_png(video.frame(i))?)?;
            frame += 1;
        }
    }

    let mut manifest = ExperimentManifest::new("hyper-decode", device);
    manifest.add_input(&args.hypernet)?;
    for p in &args.bitstreams {
        manifest.add_input(p)?;
    }
    manifest.summary = json!({ "clips": args.bitstreams.len(), "frames": frame });
    out.finish(manifest)?;
    println!("decoded {frame} frames from {} clips", args.bitstreams.len());
    Ok(())
}

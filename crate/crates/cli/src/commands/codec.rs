use std::path::Path;

use serde::Serialize;
use serde_json::json;

use nervlab::codec::{bpp, compress_model, decompress_model, raw_bpp, rd_curve, Bitstream, RdPoint};
use nervlab::components::NervModel;
use nervlab::metrics::{cap_psnr, evaluate, psnr_with_mode, PsnrMode};
use nervlab::trainer::encode_checkpoint;

use super::{check_resolution, config_ref, load_checkpoint, read_file};
use crate::cli::{CompressArgs, DecompressArgs, EvalArgs, MetricArg, PsnrModeArg, RdArgs};
use crate::device::device;
use crate::error::{data, CliError, Result};
use crate::ingest::{frame_name, frame_png, ingest_frames, FRAME_RATE};
use crate::manifest::{ExperimentManifest, OutputDir};
use crate::plot::{csv_bytes, line_svg, Series};

fn load_bitstream(path: &Path) -> Result<Bitstream> {
    Bitstream::from_bytes(&read_file(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn compress(args: CompressArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let bs = compress_model(&model, args.bits)?;
    out.write("model.nrvb", &bs.to_bytes())?;

    let mut manifest = ExperimentManifest::new("compress", device);
    manifest.config = Some(config_ref(model.config(), &args.checkpoint.display().to_string()));
    manifest.add_input(&args.checkpoint)?;
    let raw_bytes = (bs.num_params() * args.bits as usize).div_ceil(8);
    manifest.summary = json!({
        "params": bs.num_params(),
        "bits": args.bits,
        "raw_bytes": raw_bytes,
        "payload_bytes": bs.payload_bytes(),
        "total_bytes": bs.total_bytes(),
    });
    out.finish(manifest)?;
    println!(
        "{} params at {} bits: {} bytes coded ({} bytes raw)",
        bs.num_params(),
        args.bits,
        bs.total_bytes(),
        raw_bytes
    );
    Ok(())
}

pub fn decompress(args: DecompressArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let bs = load_bitstream(&args.bitstream)?;
    let model = decompress_model::<f32>(&bs)?;
    out.write("checkpoint.nrvc", &encode_checkpoint(model.config(), model.params()))?;
    if let Some(n) = args.render {
        let video = model.render_video(n, FRAME_RATE)?;
        for i in 0..n {
            out.write(&format!("frames/{}", frame_name(i)), &frame_png(video.frame(i))?)?;
        }
    }

    let mut manifest = ExperimentManifest::new("decompress", device);
    manifest.config = Some(config_ref(model.config(), &args.bitstream.display().to_string()));
    manifest.add_input(&args.bitstream)?;
    manifest.summary = json!({ "params": model.num_params(), "rendered_frames": args.render.unwrap_or(0) });
    out.finish(manifest)?;
    println!("rebuilt {} ({} params)", model.config().name, model.num_params());
    Ok(())
}

#[derive(Serialize)]
struct FrameLine {
    frame: usize,
    psnr: f64,
    ms_ssim: Option<f64>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let video = ingest_frames::<f32>(&args.frames)?;
    let (model, source, bitstream): (NervModel<f32>, &Path, Option<Bitstream>) = match (&args.checkpoint, &args.bitstream) {
        (Some(p), _) => (load_checkpoint(p)?, p, None),
        (None, Some(p)) => {
            let bs = load_bitstream(p)?;
            (decompress_model::<f32>(&bs)?, p, Some(bs))
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    check_resolution(model.config(), &video)?;
    let rendered = model.render_video(video.num_frames(), video.frame_rate)?;
    let report = evaluate(&rendered, &video, args.per_frame)?;
    let mode = match args.psnr_mode {
        PsnrModeArg::MeanMse => PsnrMode::MeanMse,
        PsnrModeArg::MeanFramePsnr => PsnrMode::MeanFramePsnr,
    };
    let psnr = cap_psnr(psnr_with_mode(&rendered, &video, mode)?);
    let (t, h, w) = (video.num_frames(), video.height(), video.width());
    let rate = match &bitstream {
        Some(bs) => Some(bpp(bs.total_bits(), t, h, w)?),
        None => None,
    };

    let mut lines = Vec::new();
    for (i, f) in report.per_frame.iter().flatten().enumerate() {
        let line = FrameLine { frame: i, psnr: cap_psnr(f.psnr), ms_ssim: f.ms_ssim };
        lines.push(serde_json::to_string(&line).expect("frame line serialises"));
    }
    let summary = json!({
        "frames": t,
        "psnr": psnr,
        "psnr_mode": mode,
        "ms_ssim": report.ms_ssim,
        "bpp": rate,
        "params": model.num_params(),
    });
    lines.push(json!({ "summary": summary }).to_string());
    out.write("eval.jsonl", (lines.join("\n") + "\n").as_bytes())?;

    let mut manifest = ExperimentManifest::new("eval", device);
    manifest.config = Some(config_ref(model.config(), &source.display().to_string()));
    manifest.add_input(&args.frames)?;
    manifest.add_input(source)?;
    if report.ms_ssim.is_none() {
        manifest.notes.push("frames too small for MS-SSIM; reported as null".into());
    }
    manifest.summary = summary;
    out.finish(manifest)?;
    match report.ms_ssim {
        Some(m) => println!("PSNR {psnr:.2} dB, MS-SSIM {m:.4}"),
        None => println!("PSNR {psnr:.2} dB"),
    }
    Ok(())
}

#[derive(Serialize)]
struct RdRow {
    checkpoint: String,
    config: String,
    params: usize,
    bits: u8,
    total_bytes: usize,
    bpp: f64,
    raw_bpp: f64,
    psnr: f64,
    ms_ssim: Option<f64>,
}

pub fn rd(args: RdArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let video = ingest_frames::<f32>(&args.frames)?;
    let (t, h, w) = (video.num_frames(), video.height(), video.width());
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for path in &args.checkpoints {
        let model = load_checkpoint(path)?;
        check_resolution(model.config(), &video)?;
        for &bits in &args.bits {
            let bs = compress_model(&model, bits)?;
            let decoded = decompress_model::<f32>(&bs)?;
            let rendered = decoded.render_video(t, video.frame_rate)?;
            let report = evaluate(&rendered, &video, false)?;
            let quality = match args.metric {
                MetricArg::Psnr => report.psnr_capped(),
                MetricArg::Msssim => match report.ms_ssim {
                    Some(m) => m,
                    None => return data(format!("frames of {h}x{w} are too small for MS-SSIM; use --metric psnr")),
                },
            };
            let rate = bpp(bs.total_bits(), t, h, w)?;
            let label = format!("{} ({} params)", model.config().name, bs.num_params());
            points.push(RdPoint::new(rate, quality, label, bits));
            rows.push(RdRow {
                checkpoint: path.display().to_string(),
                config: model.config().name.clone(),
                params: bs.num_params(),
                bits,
                total_bytes: bs.total_bytes(),
                bpp: rate,
                raw_bpp: raw_bpp(bs.num_params(), bits, t, h, w)?,
                psnr: report.psnr_capped(),
                ms_ssim: report.ms_ssim,
            });
        }
    }
    let curve = rd_curve(&points);
    out.write("rd_points.csv", &csv_bytes(&rows)?)?;
    out.write("rd_curve.csv", &csv_bytes(&curve)?)?;
    let y_label = match args.metric {
        MetricArg::Psnr => "PSNR (dB)",
        MetricArg::Msssim => "MS-SSIM",
    };
    let mut labels: Vec<String> = points.iter().map(|p| p.preset.clone()).collect();
    labels.dedup();
    let mut series: Vec<Series> = labels
        .iter()
        .map(|l| Series {
            name: l.clone(),
            points: points.iter().filter(|p| &p.preset == l).map(|p| (p.bpp, p.quality)).collect(),
        })
        .collect();
    series.push(Series { name: "envelope".into(), points: curve.iter().map(|p| (p.bpp, p.quality)).collect() });
    out.write("rd.svg", line_svg("rate-distortion", "bits per pixel", y_label, &series).as_bytes())?;

    let mut manifest = ExperimentManifest::new("rd", device);
    manifest.add_input(&args.frames)?;
    for p in &args.checkpoints {
        manifest.add_input(p)?;
    }
    manifest.summary = json!({ "points": rows.len(), "curve": curve });
    out.finish(manifest)?;
    for p in &curve {
        println!("{:>8.4} bpp  {:>8.3}  {} @ {} bits", p.bpp, p.quality, p.preset, p.bits);
    }
    Ok(())
}

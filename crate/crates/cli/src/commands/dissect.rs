use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;

use nervlab::components::FinalActivation;
use nervlab::video::normalized_time;
use nervlab::xinc::{head_contributions, hypo_head_contributions, motion_fluctuation, shuffle_contributions, sort_by_magnitude, ContributionMaps};

use super::{config_ref, load_checkpoint, parse_range};
use super::hyper::{load_clip, load_hypernet};
use crate::cli::DissectArgs;
use crate::device::device;
use crate::error::{config, Result};
use crate::ingest::{frame_png, map_png};
use crate::manifest::{ExperimentManifest, OutputDir};
use crate::plot::csv_bytes;

/// Head contribution maps of one frame.
struct FrameMaps {
    frame: usize,
    /// Clip holding the frame; always 0 for checkpoints.
    clip: usize,
    maps: ContributionMaps,
}

struct Dissection {
    frames: Vec<FrameMaps>,
    activation: FinalActivation,
    source: String,
}

fn dissection(args: &DissectArgs, manifest: &mut ExperimentManifest) -> Result<Dissection> {
    if args.layer != "head" {
        return config(format!("layer `{}` is not supported; only `head` can be dissected", args.layer));
    }
    let (a, b) = parse_range(&args.frames)?;
    if let Some(path) = &args.checkpoint {
        let model = load_checkpoint(path)?;
        let total = args.video_frames.unwrap_or(b);
        if b > total {
            return config(format!("frame range {a}..{b} exceeds the {total}-frame video"));
        }
        manifest.config = Some(config_ref(model.config(), &path.display().to_string()));
        manifest.add_input(path)?;
        let mut frames = Vec::new();
        for i in a..b {
            frames.push(FrameMaps { frame: i, clip: 0, maps: head_contributions(&model, normalized_time(i, total))? });
        }
        let activation = model.head().final_activation;
        return Ok(Dissection { frames, activation, source: "checkpoint".into() });
    }
    let path = args.hypernet.as_ref().expect("clap requires a model source");
    let net = load_hypernet(path)?;
    manifest.add_input(path)?;
    let n = net.layout().clip_frames;
    if b > n * args.bitstreams.len() {
        return config(format!("frame range {a}..{b} exceeds the {} frames of {} clips", n * args.bitstreams.len(), args.bitstreams.len()));
    }
    let mut tokens = BTreeMap::new();
    let mut frames = Vec::new();
    for i in a..b {
        let clip = i / n;
        if !tokens.contains_key(&clip) {
            let p = &args.bitstreams[clip];
            let bs = load_clip(p)?;
            manifest.add_input(p)?;
            tokens.insert(clip, (bs.tokens::<f32>(net.layout())?, bs.masked));
        }
        let (t, masked) = &tokens[&clip];
        let maps = shuffle_contributions(&hypo_head_contributions(&net, t, *masked, i % n)?);
        frames.push(FrameMaps { frame: i, clip, maps });
    }
    Ok(Dissection { frames, activation: net.layout().final_activation, source: "hypernet".into() })
}

fn max_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Serialize)]
struct KernelRow {
    frame: usize,
    rank: usize,
    kernel: usize,
    c_in: usize,
    c_out: usize,
    output_channel: usize,
    lattice_y: usize,
    lattice_x: usize,
    magnitude: f64,
    image: Option<String>,
}

pub fn dissect(args: DissectArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let mut manifest = ExperimentManifest::new("dissect", device);
    let d = dissection(&args, &mut manifest)?;
    let mut rows = Vec::new();
    for f in &d.frames {
        let dir = format!("frame_{:05}", f.frame);
        let m = &f.maps;
        let scale = max_abs(m.maps.iter());
        let mags = m.magnitudes();
        let keep = args.top.unwrap_or(m.num_kernels());
        for (rank, &k) in sort_by_magnitude(m).iter().enumerate() {
            let (ci, co) = m.kernel_index[k];
            let (ly, lx) = m.lattice_slot(k);
            let image = (rank < keep).then(|| format!("{dir}/rank_{rank:04}_k{k}_ci{ci}_co{co}.png"));
            if let Some(name) = &image {
                out.write(name, &map_png(&m.maps.index_axis(Axis(0), k).to_owned(), scale)?)?;
            }
            rows.push(KernelRow {
                frame: f.frame,
                rank,
                kernel: k,
                c_in: ci,
                c_out: co,
                output_channel: m.output_channel(k),
                lattice_y: ly,
                lattice_x: lx,
                magnitude: mags[k],
                image,
            });
        }
        let total = m.total();
        out.write(&format!("{dir}/total.png"), &map_png(&total, max_abs(total.iter()))?)?;
        out.write(&format!("{dir}/activated.png"), &frame_png(m.activated(d.activation).view())?)?;
    }
    out.write("contributions.csv", &csv_bytes(&rows)?)?;
    let first = &d.frames[0].maps;
    manifest.summary = json!({
        "source": d.source,
        "layer": "head",
        "frames": d.frames.iter().map(|f| f.frame).collect::<Vec<_>>(),
        "kernels": first.num_kernels(),
        "resolution": first.resolution(),
        "stride": first.stride,
        "shuffled": first.shuffled,
    });
    out.finish(manifest)?;
    println!("dissected {} frames, {} kernels each", d.frames.len(), first.num_kernels());
    Ok(())
}

#[derive(Serialize)]
struct MotionRow {
    from: usize,
    to: usize,
    within_clip: bool,
    mean: f64,
    max: f64,
}

pub fn dissect_motion(args: DissectArgs) -> Result<()> {
    let device = device()?;
    let mut out = OutputDir::prepare(&args.out.out, args.out.force)?;
    let mut manifest = ExperimentManifest::new("dissect-motion", device);
    let d = dissection(&args, &mut manifest)?;
    if d.frames.len() < 2 {
        return config("motion needs a range of at least two frames");
    }
    let mut fluct: Vec<(usize, usize, bool, Array2<f64>)> = Vec::new();
    for pair in d.frames.windows(2) {
        let m = motion_fluctuation(&pair[0].maps, &pair[1].maps)?;
        fluct.push((pair[0].frame, pair[1].frame, pair[0].clip == pair[1].clip, m));
    }
    let scale = max_abs(fluct.iter().flat_map(|f| f.3.iter()));
    let mut rows = Vec::new();
    for (from, to, within_clip, m) in &fluct {
        out.write(&format!("motion/motion_{from:05}_{to:05}.png"), &map_png(m, scale)?)?;
        rows.push(MotionRow {
            from: *from,
            to: *to,
            within_clip: *within_clip,
            mean: m.mean().unwrap_or(0.0),
            max: max_abs(m.iter()),
        });
    }
    out.write("motion.csv", &csv_bytes(&rows)?)?;
    if rows.iter().any(|r| !r.within_clip) {
        manifest.notes.push("some pairs cross a clip boundary; their tokens come from different clips".into());
    }
    manifest.summary = json!({ "source": d.source, "pairs": rows.len(), "max_fluctuation": scale });
    out.finish(manifest)?;
    println!("wrote {} motion maps", rows.len());
    Ok(())
}

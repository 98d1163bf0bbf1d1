pub mod codec;
pub mod dissect;
pub mod hyper;
pub mod train;

use std::path::Path;

use nervlab::budget::solve_width;
use nervlab::components::{presets, ModelConfig, NervModel};
use nervlab::trainer::{decode_checkpoint, Budget, LossSpec, TrainOptions};
use nervlab::video::VideoTensor;

use crate::cli::{ModelArgs, OptimArgs};
use crate::error::{config, CliError, Result};
use crate::manifest::ConfigRef;

pub const PRESET_NAMES: &str = "nerv, ffnerv, enerv, nerv-ks15, rnerv-small, rnerv-large, rnerv-desk";

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_config_file(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    ModelConfig::from_toml_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    presets::by_name(name).ok_or_else(|| CliError::Config(format!("unknown preset `{name}`; known presets: {PRESET_NAMES}")))
}

/// Config selected by `--config`/`--preset`, resized as requested.
pub fn model_config(args: &ModelArgs) -> Result<(ModelConfig, String)> {
    let (mut cfg, source) = match (&args.config, &args.preset) {
        (Some(p), _) => (load_config_file(p)?, p.display().to_string()),
        (None, Some(name)) => (preset(name)?, format!("preset:{name}")),
        (None, None) => return config("pass --config FILE or --preset NAME"),
    };
    if let Some(d) = args.fc_dim {
        cfg = cfg.with_fc_dim(d);
        cfg.validate()?;
    }
    if let Some(target) = args.target_params {
        cfg = solve_width(target, &cfg, args.tolerance)?;
    }
    Ok((cfg, source))
}

pub fn config_ref(cfg: &ModelConfig, source: &str) -> ConfigRef {
    ConfigRef { source: source.to_string(), hash: cfg.hash() }
}

pub fn check_resolution(cfg: &ModelConfig, video: &VideoTensor<f32>) -> Result<()> {
    let (h, w) = video.resolution();
    if cfg.target_resolution != [h, w] {
        return config(format!(
            "config `{}` renders {}x{} but the frames are {h}x{w}; pick a matching config or preset",
            cfg.name, cfg.target_resolution[0], cfg.target_resolution[1]
        ));
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NervModel<f32>> {
    decode_checkpoint::<f32>(&read_file(path)?).map_err(|e| match e {
        nervlab::NervError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

pub fn parse_loss(text: &str) -> Result<LossSpec> {
    let lower = text.trim().to_lowercase();
    match lower.split_once(':') {
        None if lower == "mse" => Ok(LossSpec::Mse),
        None if lower == "l1-ssim" => Ok(LossSpec::L1Ssim { alpha: 0.7 }),
        Some(("l1-ssim", a)) => match a.parse::<f64>() {
            Ok(alpha) if (0.0..=1.0).contains(&alpha) => Ok(LossSpec::L1Ssim { alpha }),
            _ => config(format!("loss `{text}`: alpha must be a number in [0, 1]")),
        },
        _ => config(format!("unknown loss `{text}`; use mse, l1-ssim or l1-ssim:<alpha>")),
    }
}

pub fn train_options(args: &OptimArgs) -> Result<TrainOptions> {
    Ok(TrainOptions {
        peak_lr: args.lr,
        batch_frames: args.batch_frames,
        seed: args.seed,
        loss: parse_loss(&args.loss)?,
        warmup_epochs: args.warmup_epochs,
    })
}

/// `epochs:N`, `seconds:S`, `flops:N`, or a reference `name:epochs` where
/// `name` is a preset or a config file.
pub fn parse_budget(text: &str) -> Result<Budget> {
    let bad = |what: &str| CliError::Config(format!("budget `{text}`: {what}"));
    let budget = match text.trim().split_once(':') {
        Some(("epochs", n)) => Budget::Epochs { amount: n.trim().parse().map_err(|_| bad("epochs must be an integer"))? },
        Some(("seconds", s)) => Budget::WallSeconds { amount: s.trim().parse().map_err(|_| bad("seconds must be a number"))? },
        Some(("flops", n)) => {
            let v: f64 = n.trim().parse().map_err(|_| bad("flops must be a number"))?;
            if !(v.is_finite() && v >= 1.0) {
                return Err(bad("flops must be at least 1"));
            }
            Budget::Flops { amount: v as u64 }
        }
        _ => match text.trim().rsplit_once(':') {
            Some((path, n)) if Path::new(path).is_file() => Budget::Reference {
                config: path.to_string(),
                epochs: n.trim().parse().map_err(|_| bad("reference epochs must be an integer"))?,
            },
            _ => Budget::parse_reference(text)?,
        },
    };
    budget.validate()?;
    Ok(budget)
}

/// Config a reference budget names: a config file if the name is a path,
/// otherwise a preset.
pub fn reference_config(name: &str, video: &VideoTensor<f32>) -> Result<ModelConfig> {
    let path = Path::new(name);
    let cfg = if path.is_file() { load_config_file(path)? } else { preset(name)? };
    check_resolution(&cfg, video).map_err(|e| CliError::Config(format!("reference budget: {e}")))?;
    Ok(cfg)
}

/// Parses `a..b` (end exclusive) or a single index `a`.
pub fn parse_range(text: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Config(format!("frame range `{text}` is not of the form a..b"));
    let (a, b) = match text.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let a: usize = text.trim().parse().map_err(|_| bad())?;
            (a, a + 1)
        }
    };
    if a >= b {
        return config(format!("frame range `{text}` is empty"));
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_parse() {
        assert_eq!(parse_budget("epochs:300").unwrap(), Budget::Epochs { amount: 300 });
        assert_eq!(parse_budget("seconds:1.5").unwrap(), Budget::WallSeconds { amount: 1.5 });
        assert_eq!(parse_budget("flops:1e9").unwrap(), Budget::Flops { amount: 1_000_000_000 });
        assert_eq!(parse_budget("NeRV:300").unwrap(), Budget::Reference { config: "nerv".into(), epochs: 300 });
        for bad in ["epochs:x", "seconds:-1", "epochs:0", "nerv", "flops:0"] {
            assert!(parse_budget(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn losses_and_ranges_parse() {
        assert_eq!(parse_loss("MSE").unwrap(), LossSpec::Mse);
        assert_eq!(parse_loss("l1-ssim:0.5").unwrap(), LossSpec::L1Ssim { alpha: 0.5 });
        assert!(parse_loss("l1-ssim:2").is_err());
        assert_eq!(parse_range("2..5").unwrap(), (2, 5));
        assert_eq!(parse_range("3").unwrap(), (3, 4));
        assert!(parse_range("5..5").is_err());
        assert!(parse_range("a..b").is_err());
    }

    #[test]
    fn unknown_preset_lists_the_known_ones() {
        let msg = preset("nope").unwrap_err().to_string();
        assert!(msg.contains("rnerv-desk"));
    }
}

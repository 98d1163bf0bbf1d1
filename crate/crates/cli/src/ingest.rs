//! Frame directories: PNG ingestion and emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use ndarray::{Array2, Array4, ArrayView3};
use nervlab::video::VideoTensor;
use nervlab::Scalar;

use crate::error::{data, Result};

pub const FRAME_RATE: f64 = 25.0;

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files of `dir` in lexicographic file-name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return data(format!("frame directory {} does not exist", dir.display()));
    }
    let mut paths: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && is_png(p)).collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return data(format!("no PNG frames in {}", dir.display()));
    }
    Ok(paths)
}

/// Splits `frame_0012` into `("frame_", 12, 4)`.
fn numbered(stem: &str) -> Option<(&str, u64, usize)> {
    let digits = stem.len() - stem.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let (prefix, num) = stem.split_at(stem.len() - digits);
    Some((prefix, num.parse().ok()?, digits))
}

/// Paths absent from a numbered sequence such as `f_001.png, f_003.png`.
pub fn missing_frames(paths: &[PathBuf]) -> Vec<PathBuf> {
    let parsed: Vec<_> = paths.iter().filter_map(|p| p.file_stem()?.to_str().and_then(numbered)).collect();
    if parsed.len() != paths.len() || parsed.is_empty() {
        return Vec::new();
    }
    let (prefix, _, width) = parsed[0];
    if parsed.iter().any(|&(p, _, w)| p != prefix || w != width) {
        return Vec::new();
    }
    let dir = paths[0].parent().unwrap_or(Path::new(""));
    let ext = paths[0].extension().and_then(|e| e.to_str()).unwrap_or("png");
    let present: std::collections::BTreeSet<u64> = parsed.iter().map(|&(_, n, _)| n).collect();
    let (lo, hi) = (*present.first().unwrap(), *present.last().unwrap());
    (lo..=hi)
        .filter(|n| !present.contains(n))
        .map(|n| dir.join(format!("{prefix}{n:0width$}.{ext}")))
        .collect()
}

/// Loads every PNG of `dir` as one video with values in `[0, 1]`.
pub fn ingest_frames<T: Scalar>(dir: &Path) -> Result<VideoTensor<T>> {
    let paths = frame_paths(dir)?;
    let missing = missing_frames(&paths);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return data(format!("missing frames in {}: {}", dir.display(), list.join(", ")));
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p).map_err(|e| crate::error::CliError::Data(format!("{}: {e}", p.display())))?;
        images.push(img.to_rgb8());
    }
    let mut by_size: BTreeMap<(u32, u32), Vec<&PathBuf>> = BTreeMap::new();
    for (p, img) in paths.iter().zip(&images) {
        by_size.entry(img.dimensions()).or_default().push(p);
    }
    if by_size.len() > 1 {
        let first = images[0].dimensions();
        let groups: Vec<String> = by_size
            .iter()
            .map(|((w, h), ps)| {
                let names: Vec<String> = ps.iter().map(|p| p.display().to_string()).collect();
                format!("{w}x{h}: {}", names.join(", "))
            })
            .collect();
        return data(format!(
            "frames in {} have mixed sizes (first frame is {}x{}); {}",
            dir.display(),
            first.0,
            first.1,
            groups.join("; ")
        ));
    }
    let (w, h) = images[0].dimensions();
    let mut frames = Array4::<T>::zeros((images.len(), h as usize, w as usize, 3));
    for (t, img) in images.iter().enumerate() {
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                frames[[t, y as usize, x as usize, c]] = T::of(px[c] as f64 / 255.0);
            }
        }
    }
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("frames").to_string();
    Ok(VideoTensor::new(frames, FRAME_RATE, name)?)
}

/// One `(H, W, 3)` frame as PNG bytes, values clamped to `[0, 1]`.
pub fn frame_png<T: Scalar>(frame: ArrayView3<'_, T>) -> Result<Vec<u8>> {
    let (h, w, _) = frame.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (frame[[y as usize, x as usize, c]].f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    encode_png(&img)
}

/// A signed map on a diverging scale normalised by `max_abs`.
pub fn map_png(map: &Array2<f64>, max_abs: f64) -> Result<Vec<u8>> {
    let (h, w) = map.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(nervlab::xinc::diverging_rgb(map[[y as usize, x as usize]], max_abs))
    });
    encode_png(&img)
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// File name of frame `i` in emitted frame directories.
pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, w: u32, h: u32, value: u8) {
        RgbImage::from_pixel(w, h, image::Rgb([value, 0, 255])).save(dir.join(name)).unwrap();
    }

    #[test]
    fn frames_load_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "b.png", 4, 2, 10);
        write(dir.path(), "a.png", 4, 2, 255);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let v = ingest_frames::<f64>(dir.path()).unwrap();
        assert_eq!(v.frames().dim(), (2, 2, 4, 3));
        assert_eq!(v.frames()[[0, 0, 0, 0]], 1.0);
        assert_eq!(v.frames()[[1, 0, 0, 0]], 10.0 / 255.0);
        assert_eq!(v.frames()[[1, 1, 3, 2]], 1.0);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_frames::<f32>(dir.path()).unwrap_err().to_string().contains("no PNG frames"));
        assert!(ingest_frames::<f32>(&dir.path().join("absent")).is_err());
    }

    #[test]
    fn mixed_sizes_name_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "f0.png", 4, 2, 0);
        write(dir.path(), "f1.png", 6, 3, 0);
        let msg = ingest_frames::<f32>(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("4x2") && msg.contains("6x3") && msg.contains("f1.png"), "{msg}");
    }

    #[test]
    fn gaps_in_numbering_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        for i in [1, 2, 5] {
            write(dir.path(), &format!("frame_{i:03}.png"), 2, 2, 0);
        }
        let msg = ingest_frames::<f32>(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("frame_003.png") && msg.contains("frame_004.png"), "{msg}");
    }

    #[test]
    fn png_round_trip_is_exact_at_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let v = VideoTensor::<f64>::synthetic(2, 5, 7, 1);
        let q = v.frames().mapv(|x| (x * 255.0).round() / 255.0);
        for i in 0..2 {
            std::fs::write(dir.path().join(frame_name(i)), frame_png(q.index_axis(ndarray::Axis(0), i)).unwrap()).unwrap();
        }
        let back = ingest_frames::<f64>(dir.path()).unwrap();
        assert!(back.frames().iter().zip(q.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

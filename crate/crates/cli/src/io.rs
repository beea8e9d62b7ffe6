//! Image files. Masks are stored with cell = 255 and background = 0,
//! probability maps as 16-bit `round(p · 65535)`, instance labels as 16-bit
//! values.

use std::fs;
use std::path::{Path, PathBuf};

use aenet_core::imaging::{Image, Mask, NormalizationStats, BACKGROUND, CELL};
use aenet_core::inference::{EnsembleConfig, ProbabilityMap};
use aenet_core::watershed::LabeledMask;
use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::training::NormalizationMode;

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "tif", "tiff", "PNG"];

const BOUNDARY_COLOUR: [u8; 3] = [0, 255, 0];

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// First existing `dir/stem.ext` over the supported extensions.
pub fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Stems of the image files in `dir`, sorted.
pub fn list_images(dir: &Path) -> CliResult<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems.dedup();
    Ok(stems)
}

fn open(path: &Path) -> CliResult<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(|e| CliError::io(path, e))
}

fn save<P, C>(path: &Path, buf: &ImageBuffer<P, C>) -> CliResult<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| CliError::io(path, e))
}

pub fn read_rgb(path: &Path) -> CliResult<Image<u8>> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::new(h as usize, w as usize, 3, rgb.into_raw())?)
}

pub fn write_rgb(path: &Path, image: &Image<u8>) -> CliResult<()> {
    if image.channels() != 3 {
        return Err(CliError::Data(format!(
            "{}: expected an RGB image",
            path.display()
        )));
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.data(),
    )
    .expect("buffer matches dimensions");
    save(path, &buf)
}

pub fn read_mask(path: &Path) -> CliResult<Mask> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    let labels = g
        .into_raw()
        .into_iter()
        .map(|v| if v >= 128 { CELL } else { BACKGROUND })
        .collect();
    Ok(Mask::new(h as usize, w as usize, labels)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> CliResult<()> {
    let data: Vec<u8> = mask
        .labels()
        .iter()
        .map(|&l| if l == CELL { 255 } else { 0 })
        .collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("buffer matches dimensions");
    save(path, &buf)
}

/// Settings recorded next to every probability map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilitySidecar {
    pub passes: usize,
    pub normalization: NormalizationMode,
    pub ensemble: EnsembleConfig,
}

pub fn sidecar_path(map: &Path) -> PathBuf {
    map.with_extension("txt")
}

pub fn write_probability(
    path: &Path,
    prob: &ProbabilityMap,
    sidecar: &ProbabilitySidecar,
) -> CliResult<()> {
    if prob.channels() != 1 {
        return Err(CliError::Data(
            "probability map must have one channel".into(),
        ));
    }
    let data: Vec<u16> = prob
        .data()
        .iter()
        .map(|&p| (f64::from(p.clamp(0.0, 1.0)) * 65535.0).round() as u16)
        .collect();
    let buf =
        ImageBuffer::<Luma<u16>, _>::from_raw(prob.width() as u32, prob.height() as u32, data)
            .expect("buffer matches dimensions");
    save(path, &buf)?;
    let text = toml::to_string(sidecar).expect("sidecar serializes");
    write_text(&sidecar_path(path), &text)
}

pub fn read_probability(path: &Path) -> CliResult<ProbabilityMap> {
    let g = open(path)?.to_luma16();
    let (w, h) = g.dimensions();
    let data = g
        .into_raw()
        .into_iter()
        .map(|v| (f64::from(v) / 65535.0) as f32)
        .collect();
    Ok(Image::new(h as usize, w as usize, 1, data)?)
}

pub fn write_labels(path: &Path, labels: &LabeledMask) -> CliResult<()> {
    let data = labels
        .data()
        .iter()
        .map(|&l| {
            u16::try_from(l).map_err(|_| CliError::Data(format!("label {l} does not fit 16 bits")))
        })
        .collect::<CliResult<Vec<u16>>>()?;
    let buf =
        ImageBuffer::<Luma<u16>, _>::from_raw(labels.width() as u32, labels.height() as u32, data)
            .expect("buffer matches dimensions");
    save(path, &buf)
}

pub fn read_labels(path: &Path) -> CliResult<LabeledMask> {
    let g = open(path)?.to_luma16();
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(u32::from).collect();
    Ok(Image::new(h as usize, w as usize, 1, data)?)
}

/// Instance pixels that touch a different label (4-neighbourhood), painted
/// over the image.
pub fn boundary_overlay(image: &Image<u8>, labels: &LabeledMask) -> CliResult<Image<u8>> {
    let (h, w) = (labels.height(), labels.width());
    if (image.height(), image.width()) != (h, w) || image.channels() != 3 {
        return Err(CliError::Data(
            "overlay needs an RGB image of the label size".into(),
        ));
    }
    let mut out = image.clone();
    let l = labels.data();
    for y in 0..h {
        for x in 0..w {
            let v = l[y * w + x];
            if v == 0 {
                continue;
            }
            let edge = (y == 0 || l[(y - 1) * w + x] != v)
                || (y + 1 == h || l[(y + 1) * w + x] != v)
                || (x == 0 || l[y * w + x - 1] != v)
                || (x + 1 == w || l[y * w + x + 1] != v);
            if edge {
                for (c, &v) in BOUNDARY_COLOUR.iter().enumerate() {
                    out.set(y, x, c, v);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    note: String,
    #[serde(flatten)]
    stats: NormalizationStats,
}

pub fn write_stats(path: &Path, stats: &NormalizationStats) -> CliResult<()> {
    let note = format!(
        "per-channel mean and population standard deviation of the training images, \
         pixel values scaled by {}",
        stats.scale.factor()
    );
    let text = toml::to_string(&StatsFile {
        note,
        stats: *stats,
    })
    .expect("stats serialize");
    write_text(path, &text)
}

pub fn read_stats(path: &Path) -> CliResult<NormalizationStats> {
    let f: StatsFile = toml::from_str(&read_text(path)?).map_err(|e| CliError::io(path, e))?;
    f.stats.validate()?;
    Ok(f.stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let im = Image::from_fn(5, 7, 3, |y, x, c| (y * 40 + x * 3 + c) as u8).unwrap();
        write_rgb(&dir.path().join("a.png"), &im).unwrap();
        assert_eq!(read_rgb(&dir.path().join("a.png")).unwrap(), im);

        let m = Mask::from_fn(5, 7, |y, x| u8::from((x + y) % 3 == 0)).unwrap();
        write_mask(&dir.path().join("m.png"), &m).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.png")).unwrap(), m);

        let p = Image::from_fn(5, 7, 1, |y, x, _| (y * 7 + x) as f32 / 34.0).unwrap();
        let side = ProbabilitySidecar {
            passes: 14,
            normalization: NormalizationMode::Individual,
            ensemble: EnsembleConfig::default(),
        };
        write_probability(&dir.path().join("p.png"), &p, &side).unwrap();
        let back = read_probability(&dir.path().join("p.png")).unwrap();
        for (a, b) in p.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        let text = read_text(&dir.path().join("p.txt")).unwrap();
        assert_eq!(toml::from_str::<ProbabilitySidecar>(&text).unwrap(), side);

        let labels =
            Image::from_fn(5, 7, 1, |y, _, _| if y < 2 { 0 } else { 300 + y as u32 }).unwrap();
        write_labels(&dir.path().join("l.png"), &labels).unwrap();
        assert_eq!(read_labels(&dir.path().join("l.png")).unwrap(), labels);

        let stats = NormalizationStats {
            mean: [0.1, 0.2, 0.3],
            std: [0.4, 0.5, 0.6],
            ..NormalizationStats::identity(Default::default())
        };
        write_stats(&dir.path().join("s.toml"), &stats).unwrap();
        assert_eq!(read_stats(&dir.path().join("s.toml")).unwrap(), stats);
    }

    #[test]
    fn overlay_marks_instance_edges_only() {
        let im = Image::filled(4, 4, 3, 9u8).unwrap();
        let labels = Image::from_fn(4, 4, 1, |y, x, _| {
            u32::from((1..3).contains(&y) && (1..3).contains(&x))
        })
        .unwrap();
        let out = boundary_overlay(&im, &labels).unwrap();
        assert_eq!(out.pixel(1, 1), &BOUNDARY_COLOUR);
        assert_eq!(out.pixel(0, 0), &[9, 9, 9]);
    }
}

//! Images, masks, annotation rasterization, augmentation and color
//! normalization.
//!
//! Images are stored interleaved (`H×W×C`). Masks use the label convention
//! `0 = cell`, `1 = background`, which is also the class index the network is
//! trained against.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const CELL: u8 = 0;
pub const BACKGROUND: u8 = 1;

/// Zoom factors of the second augmentation stage.
pub const ZOOM_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

/// Training crop side.
pub const CROP_SIDE: usize = 224;

/// Replaces a zero standard deviation.
pub const STD_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image<T = u8> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: T) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Output pixel `(y, x)` copies input pixel `src(y, x)`.
    fn remap(
        &self,
        height: usize,
        width: usize,
        src: impl Fn(usize, usize) -> (usize, usize),
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                data.extend_from_slice(self.pixel(sy, sx));
            }
        }
        Self {
            height,
            width,
            channels: self.channels,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.remap(self.height, w, |y, x| (y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        self.remap(h, self.width, |y, x| (h - 1 - y, x))
    }

    /// Quarter turn counter-clockwise.
    pub fn rot90(&self) -> Self {
        let w = self.width;
        self.remap(w, self.height, |y, x| (x, w - 1 - y))
    }

    pub fn rot180(&self) -> Self {
        let (h, w) = (self.height, self.width);
        self.remap(h, w, |y, x| (h - 1 - y, w - 1 - x))
    }

    pub fn rot270(&self) -> Self {
        let h = self.height;
        self.remap(self.width, h, |y, x| (h - 1 - x, y))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(self.remap(height, width, |y, x| (top + y, left + x)))
    }

    /// Extends the image to `height × width` by mirroring on the bottom and
    /// right. Any padding amount is allowed; the mirror repeats periodically.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::invalid("reflect padding cannot shrink an image"));
        }
        let (h, w) = (self.height, self.width);
        Ok(self.remap(height, width, |y, x| {
            (reflect_index(y, h), reflect_index(x, w))
        }))
    }

    /// Nearest-neighbour resampling with pixel-centre alignment.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be at least 1x1"));
        }
        let (h, w) = (self.height, self.width);
        Ok(self.remap(height, width, |y, x| {
            (nearest_source(y, height, h), nearest_source(x, width, w))
        }))
    }
}

/// Mirror index for position `i` of an axis of length `n`, without repeating
/// the edge sample (`… 2 1 0 1 2 …`).
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn nearest_source(dst: usize, out: usize, input: usize) -> usize {
    (((2 * dst + 1) * input) / (2 * out)).min(input - 1)
}

impl Image<u8> {
    /// Channel-planar `[1, C, H, W]` tensor of the raw values scaled by `k`.
    pub fn to_tensor(&self, k: f64) -> Tensor<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn([1, c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            f64::from(self.data[p * c + ch]) * k
        })
    }

    /// Bilinear resampling (pixel-centre alignment), rounded back to 8 bits.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        let t = ops::bilinear_resize(&self.to_tensor(1.0), height, width)?;
        let c = self.channels;
        let plane = height * width;
        let mut data = vec![0u8; plane * c];
        for (i, v) in t.data().iter().enumerate() {
            let ch = i / plane;
            let p = i % plane;
            data[p * c + ch] = libm::round(*v).clamp(0.0, 255.0) as u8;
        }
        Self::new(height, width, c, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Breast,
    Liver,
    Kidney,
    Prostate,
    Bladder,
    Colon,
    Stomach,
}

impl Organ {
    pub const ALL: [Organ; 7] = [
        Organ::Breast,
        Organ::Liver,
        Organ::Kidney,
        Organ::Prostate,
        Organ::Bladder,
        Organ::Colon,
        Organ::Stomach,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Organ::Breast => "breast",
            Organ::Liver => "liver",
            Organ::Kidney => "kidney",
            Organ::Prostate => "prostate",
            Organ::Bladder => "bladder",
            Organ::Colon => "colon",
            Organ::Stomach => "stomach",
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Organ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Organ::ALL
            .into_iter()
            .find(|o| o.name() == lower)
            .ok_or_else(|| Error::invalid(format!("unknown organ {s:?}")))
    }
}

/// An 8-bit RGB tile with its identifier and organ of origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PathologyImage {
    pub id: String,
    pub organ: Organ,
    pub pixels: Image<u8>,
}

/// Closed polygon in pixel coordinates (`x` to the right, `y` down, pixel
/// `(r, c)` covering `[c, c+1) × [r, r+1)`).
pub type Polygon = Vec<(f64, f64)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub polygons: Vec<Polygon>,
}

/// Binary label mask: [`CELL`] or [`BACKGROUND`] per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask(Image<u8>);

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.iter().any(|&v| v > BACKGROUND) {
            return Err(Error::invalid(
                "mask labels must be 0 (cell) or 1 (background)",
            ));
        }
        Ok(Self(Image::new(height, width, 1, labels)?))
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.0.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.0.data[y * self.0.width + x]
    }

    #[inline]
    pub fn is_cell(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == CELL
    }

    pub fn cell_count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == CELL).count()
    }

    pub fn complement(&self) -> Self {
        Self(Image {
            data: self.0.data.iter().map(|&v| 1 - v).collect(),
            ..self.0.clone()
        })
    }

    pub fn as_image(&self) -> &Image<u8> {
        &self.0
    }

    /// Wraps a one-channel image whose values are already labels.
    pub fn from_image(image: Image<u8>) -> Result<Self> {
        if image.channels != 1 {
            return Err(Error::invalid("a mask has exactly one channel"));
        }
        Self::new(image.height, image.width, image.data)
    }

    fn map_image(&self, f: impl FnOnce(&Image<u8>) -> Image<u8>) -> Self {
        Self(f(&self.0))
    }
}

/// Pixels whose centre lies inside any polygon (even-odd rule per polygon)
/// become cell. Vertices are clamped to the image rectangle first.
pub fn rasterize(annotations: &AnnotationSet, height: usize, width: usize) -> Result<Mask> {
    let mut labels = vec![BACKGROUND; height * width];
    let mut crossings = Vec::new();
    for polygon in &annotations.polygons {
        if polygon.len() < 3 {
            continue;
        }
        let pts: Vec<(f64, f64)> = polygon
            .iter()
            .map(|&(x, y)| (x.clamp(0.0, width as f64), y.clamp(0.0, height as f64)))
            .collect();
        for row in 0..height {
            let cy = row as f64 + 0.5;
            crossings.clear();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= cy) != (y1 <= cy) {
                    crossings.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for span in crossings.chunks_exact(2) {
                // centres c + 0.5 with span[0] < c + 0.5 < span[1]
                let first = libm::floor(span[0] - 0.5) as i64 + 1;
                let last = libm::ceil(span[1] - 0.5) as i64 - 1;
                let first = first.max(0) as usize;
                let last = last.min(width as i64 - 1);
                if last < first as i64 {
                    continue;
                }
                for x in first..=last as usize {
                    labels[row * width + x] = CELL;
                }
            }
        }
    }
    Mask::new(height, width, labels)
}

/// Image with its aligned label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image<u8>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(image: Image<u8>, mask: Mask) -> Result<Self> {
        if (image.height, image.width) != (mask.height(), mask.width()) {
            return Err(Error::shape(
                "sample",
                format!(
                    "image {}x{} vs mask {}x{}",
                    image.height,
                    image.width,
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        Ok(Self { image, mask })
    }

    pub fn transformed(&self, g: Geometric) -> Self {
        self.map(|im| g.apply(im))
    }

    fn map(&self, f: impl Fn(&Image<u8>) -> Image<u8>) -> Self {
        Self {
            image: f(&self.image),
            mask: self.mask.map_image(&f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometric {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rot90,
    Rot180,
    Rot270,
}

impl Geometric {
    pub const ALL: [Geometric; 6] = [
        Geometric::Identity,
        Geometric::FlipHorizontal,
        Geometric::FlipVertical,
        Geometric::Rot90,
        Geometric::Rot180,
        Geometric::Rot270,
    ];

    pub fn apply<T: Copy>(self, image: &Image<T>) -> Image<T> {
        match self {
            Geometric::Identity => image.clone(),
            Geometric::FlipHorizontal => image.flip_horizontal(),
            Geometric::FlipVertical => image.flip_vertical(),
            Geometric::Rot90 => image.rot90(),
            Geometric::Rot180 => image.rot180(),
            Geometric::Rot270 => image.rot270(),
        }
    }
}

/// First stage: every sample expanded to its six flip/rotation variants, in
/// [`Geometric::ALL`] order.
pub fn augment_geometric(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .flat_map(|s| {
            Geometric::ALL
                .into_iter()
                .map(move |g| s.map(|im| g.apply(im)))
        })
        .collect()
}

/// Zoom of a sample: bilinear for the image, nearest for the mask. Output
/// sides are `round(scale · side)`, at least 1.
pub fn zoom(sample: &Sample, scale: f64) -> Result<Sample> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!(
            "zoom scale must be positive, got {scale}"
        )));
    }
    let h = scaled_side(sample.image.height, scale);
    let w = scaled_side(sample.image.width, scale);
    Ok(Sample {
        image: sample.image.resize_bilinear(h, w)?,
        mask: Mask(sample.mask.0.resize_nearest(h, w)?),
    })
}

pub fn scaled_side(side: usize, scale: f64) -> usize {
    (libm::round(side as f64 * scale) as usize).max(1)
}

/// Second stage: each sample zoomed at each of `scales`.
pub fn augment_zoom(samples: &[Sample], scales: &[f64]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len() * scales.len());
    for s in samples {
        for &k in scales {
            out.push(zoom(s, k)?);
        }
    }
    Ok(out)
}

/// Both augmentation stages with the default zoom scales.
pub fn augment(samples: &[Sample]) -> Result<Vec<Sample>> {
    augment_zoom(&augment_geometric(samples), &ZOOM_SCALES)
}

/// Aligned `side × side` crop at a uniformly drawn offset. Inputs smaller than
/// `side` are reflect-padded on the bottom/right first.
pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, side: usize, rng: &mut R) -> Result<Sample> {
    if side == 0 {
        return Err(Error::invalid("crop side must be positive"));
    }
    let padded;
    let s = if sample.image.height < side || sample.image.width < side {
        let h = sample.image.height.max(side);
        let w = sample.image.width.max(side);
        padded = Sample {
            image: sample.image.pad_reflect(h, w)?,
            mask: Mask(sample.mask.0.pad_reflect(h, w)?),
        };
        &padded
    } else {
        sample
    };
    let (top, left) = crop_origin(s.image.height, s.image.width, side, rng)?;
    Ok(Sample {
        image: s.image.crop(top, left, side, side)?,
        mask: Mask(s.mask.0.crop(top, left, side, side)?),
    })
}

/// Uniform `(top, left)` of a `side × side` window inside `height × width`.
pub fn crop_origin<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    side: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if side == 0 || side > height || side > width {
        return Err(Error::invalid(format!(
            "no {side}x{side} window in {height}x{width}"
        )));
    }
    Ok((
        rng.random_range(0..=height - side),
        rng.random_range(0..=width - side),
    ))
}

/// Value range the statistics are expressed in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelScale {
    /// 8-bit values divided by 255.
    #[default]
    Unit,
    /// 8-bit values as is.
    Raw,
}

impl PixelScale {
    pub fn factor(self) -> f64 {
        match self {
            PixelScale::Unit => 1.0 / 255.0,
            PixelScale::Raw => 1.0,
        }
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub scale: PixelScale,
}

impl NormalizationStats {
    pub fn identity(scale: PixelScale) -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mean.iter().all(|m| m.is_finite())
            && self.std.iter().all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "normalization stats need finite means and positive deviations",
            ))
        }
    }
}

/// Exact integer moments, so the result does not depend on image order.
#[derive(Default)]
struct Moments {
    n: u128,
    sum: [u128; 3],
    sum_sq: [u128; 3],
}

impl Moments {
    fn add(&mut self, image: &Image<u8>) -> Result<()> {
        if image.channels != 3 {
            return Err(Error::invalid(format!(
                "expected RGB, got {} channels",
                image.channels
            )));
        }
        for px in image.data.chunks_exact(3) {
            for c in 0..3 {
                let v = u128::from(px[c]);
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.n += (image.height * image.width) as u128;
        Ok(())
    }

    fn stats(&self, scale: PixelScale) -> NormalizationStats {
        let n = self.n as f64;
        let k = scale.factor();
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = self.sum[c] as f64 / n * k;
            // n·Σx² − (Σx)² is exact in integers
            let spread = self.n * self.sum_sq[c] - self.sum[c] * self.sum[c];
            let sd = libm::sqrt(spread as f64) / n * k;
            std[c] = if sd == 0.0 { STD_EPS } else { sd };
        }
        NormalizationStats { mean, std, scale }
    }
}

pub fn compute_stats(images: &[Image<u8>], scale: PixelScale) -> Result<NormalizationStats> {
    if images.is_empty() {
        return Err(Error::Empty("compute_stats"));
    }
    let mut m = Moments::default();
    for image in images {
        m.add(image)?;
    }
    Ok(m.stats(scale))
}

/// `(x − μ) / σ` per channel as a `[1, 3, H, W]` tensor.
pub fn normalize_global(image: &Image<u8>, stats: &NormalizationStats) -> Result<Tensor<f32>> {
    stats.validate()?;
    if image.channels != 3 {
        return Err(Error::invalid(format!(
            "expected RGB, got {} channels",
            image.channels
        )));
    }
    let plane = image.height * image.width;
    let k = stats.scale.factor();
    Ok(Tensor::from_fn([1, 3, image.height, image.width], |i| {
        let c = i / plane;
        let v = f64::from(image.data[(i % plane) * 3 + c]) * k;
        ((v - stats.mean[c]) / stats.std[c]) as f32
    }))
}

/// Standardizes each channel with the image's own statistics.
pub fn normalize_individual(image: &Image<u8>) -> Result<Tensor<f32>> {
    let stats = compute_stats(core::slice::from_ref(image), PixelScale::Unit)?;
    normalize_global(image, &stats)
}

/// Per-item, per-channel standardization of a `[N, C, H, W]` tensor.
pub fn standardize(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let mut out = t.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        let n = plane.len() as f64;
        let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = plane
            .iter()
            .map(|&v| {
                let d = f64::from(v) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let sd = libm::sqrt(var);
        let sd = if sd == 0.0 { STD_EPS } else { sd };
        for v in plane.iter_mut() {
            *v = ((f64::from(*v) - mean) / sd) as f32;
        }
    }
    Ok(out)
}

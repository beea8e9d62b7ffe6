//! Patch-based inference with multi-scale and horizontal-flip ensembling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask, BACKGROUND, CELL};
use crate::model::{Aenet, OUTPUT_STRIDE};
use crate::ops;
use crate::tensor::Tensor;

/// One-channel map of cell probabilities.
pub type ProbabilityMap = Image<f32>;

pub const PATCH_SIDE: usize = 200;
pub const ENSEMBLE_SCALES: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

/// Non-overlapping grid of square patches covering an image padded on the
/// bottom/right to a multiple of the patch side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilingPlan {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TilingPlan {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "cannot tile {height}x{width} with patch side {patch}"
            )));
        }
        Ok(Self {
            patch,
            height,
            width,
            rows: height.div_ceil(patch),
            cols: width.div_ceil(patch),
        })
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.patch
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(top, left)` of every patch in row-major order.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push((r * self.patch, c * self.patch));
            }
        }
        out
    }
}

pub fn tile<T: Copy>(image: &Image<T>, plan: &TilingPlan) -> Result<Vec<Image<T>>> {
    if (image.height(), image.width()) != (plan.height, plan.width) {
        return Err(Error::shape(
            "tile",
            format!(
                "plan for {}x{}, image {}x{}",
                plan.height,
                plan.width,
                image.height(),
                image.width()
            ),
        ));
    }
    let padded = image.pad_reflect(plan.padded_height(), plan.padded_width())?;
    plan.origins()
        .into_iter()
        .map(|(top, left)| padded.crop(top, left, plan.patch, plan.patch))
        .collect()
}

/// Inverse of [`tile`]: reassembles the grid and drops the padding.
pub fn stitch<T: Copy + Default>(patches: &[Image<T>], plan: &TilingPlan) -> Result<Image<T>> {
    if patches.len() != plan.len() {
        return Err(Error::invalid(format!(
            "stitch expects {} patches, got {}",
            plan.len(),
            patches.len()
        )));
    }
    let channels = patches[0].channels();
    for p in patches {
        if (p.height(), p.width(), p.channels()) != (plan.patch, plan.patch, channels) {
            return Err(Error::shape(
                "stitch",
                format!("patch {}x{}x{}", p.height(), p.width(), p.channels()),
            ));
        }
    }
    let (h, w, s) = (plan.height, plan.width, plan.patch);
    let mut data = vec![T::default(); h * w * channels];
    for y in 0..h {
        for x in 0..w {
            let p = &patches[(y / s) * plan.cols + x / s];
            let dst = (y * w + x) * channels;
            data[dst..dst + channels].copy_from_slice(p.pixel(y % s, x % s));
        }
    }
    Image::new(h, w, channels, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub threshold: f32,
    pub patch: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            scales: ENSEMBLE_SCALES.to_vec(),
            flip: true,
            threshold: 0.5,
            patch: PATCH_SIDE,
        }
    }
}

impl EnsembleConfig {
    /// One scale, no flip.
    pub fn single_scale() -> Self {
        Self {
            scales: vec![1.0],
            flip: false,
            ..Self::default()
        }
    }

    pub fn passes(&self) -> usize {
        self.scales.len() * if self.flip { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(
                "ensemble scales must be a non-empty list of positive values",
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if self.patch == 0 {
            return Err(Error::invalid("patch side must be positive"));
        }
        Ok(())
    }
}

/// A network that maps a `[1, C, h, w]` input to a `[1, 1, h, w]` map of cell
/// probabilities, for sides that are multiples of [`PatchModel::multiple`].
pub trait PatchModel {
    fn multiple(&self) -> usize {
        OUTPUT_STRIDE
    }

    fn predict_patch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchModel for Aenet<f32> {
    fn predict_patch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(input)
    }
}

impl<M: PatchModel + ?Sized> PatchModel for &M {
    fn multiple(&self) -> usize {
        (**self).multiple()
    }

    fn predict_patch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        (**self).predict_patch(input)
    }
}

/// `[1, C, H, W]` to an interleaved image.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<Image<f32>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 {
        return Err(Error::shape("tensor_to_image", format!("batch of {n}")));
    }
    let d = t.data();
    Image::from_fn(h, w, c, |y, x, ch| d[(ch * h + y) * w + x])
}

/// Interleaved image to `[1, C, H, W]`.
pub fn image_to_tensor(im: &Image<f32>) -> Tensor<f32> {
    let (h, w, c) = (im.height(), im.width(), im.channels());
    Tensor::from_fn([1, c, h, w], |i| {
        let ch = i / (h * w);
        let p = i % (h * w);
        im.get(p / w, p % w, ch)
    })
}

/// Runs one patch, reflect-padded up to the model's side multiple and cropped
/// back.
fn predict_one<M: PatchModel + ?Sized>(model: &M, patch: &Image<f32>) -> Result<Image<f32>> {
    let m = model.multiple().max(1);
    let (h, w) = (patch.height(), patch.width());
    let padded = patch.pad_reflect(h.next_multiple_of(m), w.next_multiple_of(m))?;
    let prob = model.predict_patch(&image_to_tensor(&padded))?;
    let (n, c, ph, pw) = prob.dims4()?;
    if (n, c, ph, pw) != (1, 1, padded.height(), padded.width()) {
        return Err(Error::shape(
            "predict_patch",
            format!("returned {:?}", prob.shape()),
        ));
    }
    tensor_to_image(&prob)?.crop(0, 0, h, w)
}

/// Tiles a `[1, C, H, W]` input, predicts every patch and stitches the
/// probabilities.
pub fn tiled_predict<M: PatchModel + ?Sized>(
    model: &M,
    input: &Tensor<f32>,
    patch: usize,
) -> Result<ProbabilityMap> {
    let image = tensor_to_image(input)?;
    let plan = TilingPlan::new(image.height(), image.width(), patch)?;
    let probs = tile(&image, &plan)?
        .iter()
        .map(|p| predict_one(model, p))
        .collect::<Result<Vec<_>>>()?;
    stitch(&probs, &plan)
}

/// Mean cell-probability over every scale (and its horizontal mirror when
/// enabled), each pass resized back to the input size. Returns the map and
/// the number of forward passes.
pub fn multiscale_infer<M: PatchModel + ?Sized>(
    input: &Tensor<f32>,
    model: &M,
    cfg: &EnsembleConfig,
) -> Result<(ProbabilityMap, usize)> {
    cfg.validate()?;
    let (_, _, h, w) = input.dims4()?;
    let mut sum = vec![0.0f64; h * w];
    let mut passes = 0;
    for &scale in &cfg.scales {
        let sh = crate::imaging::scaled_side(h, scale);
        let sw = crate::imaging::scaled_side(w, scale);
        let scaled = ops::bilinear_resize(input, sh, sw)?;
        let flips: &[bool] = if cfg.flip { &[false, true] } else { &[false] };
        for &flip in flips {
            let x = if flip {
                ops::flip_horizontal(&scaled)?
            } else {
                scaled.clone()
            };
            let mut p = image_to_tensor(&tiled_predict(model, &x, cfg.patch)?);
            if flip {
                p = ops::flip_horizontal(&p)?;
            }
            let p = ops::bilinear_resize(&p, h, w)?;
            for (s, v) in sum.iter_mut().zip(p.data()) {
                *s += f64::from(*v);
            }
            passes += 1;
        }
    }
    let n = passes as f64;
    let mean = sum.into_iter().map(|s| (s / n) as f32).collect();
    Ok((Image::new(h, w, 1, mean)?, passes))
}

/// `p ≥ threshold` is cell.
pub fn binarize(prob: &ProbabilityMap, threshold: f32) -> Result<Mask> {
    if prob.channels() != 1 {
        return Err(Error::invalid("probability map must have one channel"));
    }
    let labels = prob
        .data()
        .iter()
        .map(|&p| if p >= threshold { CELL } else { BACKGROUND })
        .collect();
    Mask::new(prob.height(), prob.width(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f32);

    impl PatchModel for Constant {
        fn predict_patch(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
            let (_, _, h, w) = input.dims4()?;
            assert!(h % 16 == 0 && w % 16 == 0);
            Ok(Tensor::full([1, 1, h, w], self.0))
        }
    }

    #[test]
    fn grid_arithmetic() {
        let p = TilingPlan::new(1000, 1000, 200).unwrap();
        assert_eq!((p.rows, p.cols, p.len()), (5, 5, 25));
        let p = TilingPlan::new(750, 750, 200).unwrap();
        assert_eq!(
            (p.padded_height(), p.padded_width(), p.len()),
            (800, 800, 16)
        );
        assert!(TilingPlan::new(10, 10, 0).is_err());
    }

    #[test]
    fn exact_fit_is_one_patch() {
        let im = Image::from_fn(8, 8, 3, |y, x, c| (y * 31 + x * 7 + c) as f32).unwrap();
        let plan = TilingPlan::new(8, 8, 8).unwrap();
        let t = tile(&im, &plan).unwrap();
        assert_eq!(t, vec![im]);
    }

    #[test]
    fn stitch_rejects_wrong_count() {
        let plan = TilingPlan::new(10, 10, 5).unwrap();
        let p = Image::filled(5, 5, 1, 0.5f32).unwrap();
        assert!(stitch(&[p.clone(), p.clone(), p], &plan).is_err());
    }

    #[test]
    fn default_ensemble_runs_fourteen_passes() {
        let input = Tensor::full([1, 3, 40, 24], 0.3);
        let cfg = EnsembleConfig {
            patch: 16,
            ..EnsembleConfig::default()
        };
        let (map, passes) = multiscale_infer(&input, &Constant(0.25), &cfg).unwrap();
        assert_eq!(passes, 14);
        assert_eq!((map.height(), map.width()), (40, 24));
        assert!(map.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn binarize_boundaries() {
        let prob = Image::new(1, 4, 1, vec![0.0, 0.49, 0.5, 1.0]).unwrap();
        assert_eq!(binarize(&prob, 0.5).unwrap().labels(), &[1, 1, 0, 0]);
    }
}

//! The optimisation loop: epoch shuffles, random crops, normalization,
//! scheduled Adam steps and per-epoch validation.
//!
//! All randomness is derived from `(seed, epoch)` for the shuffle and
//! `(seed, step)` for the crops, so a run restarted from a checkpoint at any
//! step continues exactly as the uninterrupted run would have.

use std::borrow::Cow;

use aenet_core::imaging::{
    normalize_global, normalize_individual, random_crop, zoom, Geometric, NormalizationStats,
    Sample,
};
use aenet_core::inference::{binarize, multiscale_infer, EnsembleConfig, ProbabilityMap};
use aenet_core::metrics::{aggregate, confusion, Aggregation, ConfusionCounts};
use aenet_core::model::{lr_schedule, train_step, Adam, Aenet, TrainConfig};
use aenet_core::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const SHUFFLE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// Training-set statistics.
    #[default]
    Global,
    /// Each image standardized with its own statistics.
    Individual,
}

pub fn normalize(
    image: &aenet_core::imaging::Image<u8>,
    mode: NormalizationMode,
    stats: &NormalizationStats,
) -> Result<Tensor<f32>> {
    match mode {
        NormalizationMode::Global => normalize_global(image, stats),
        NormalizationMode::Individual => normalize_individual(image),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSettings {
    pub optim: TrainConfig,
    pub crop: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub normalization: NormalizationMode,
    pub patch: usize,
    pub threshold: f32,
}

/// Model, optimizer and position in the run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Aenet<f32>,
    pub optimizer: Adam<f32>,
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Aenet<f32>, optim: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: Adam::new(optim),
            epoch: 0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_dice: Option<f64>,
}

/// Indexed training samples, possibly generated on demand.
pub trait SamplePool {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize) -> Result<Cow<'_, Sample>>;
}

impl SamplePool for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<Cow<'_, Sample>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// One augmented variant: base image, flip/rotation, zoom factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub base: usize,
    pub transform: Geometric,
    pub scale: f64,
}

/// The augmented pool, materialized one sample at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPool {
    pub base: Vec<Sample>,
    pub entries: Vec<PoolEntry>,
}

impl AugmentedPool {
    /// Every base sample under every transform and scale, in the order of
    /// the eager augmentation.
    pub fn full(base: Vec<Sample>, scales: &[f64]) -> Self {
        let entries = (0..base.len())
            .flat_map(|b| {
                Geometric::ALL.into_iter().flat_map(move |transform| {
                    scales.iter().map(move |&scale| PoolEntry {
                        base: b,
                        transform,
                        scale,
                    })
                })
            })
            .collect();
        Self { base, entries }
    }

    pub fn identity(base: Vec<Sample>) -> Self {
        let entries = (0..base.len())
            .map(|b| PoolEntry {
                base: b,
                transform: Geometric::Identity,
                scale: 1.0,
            })
            .collect();
        Self { base, entries }
    }
}

impl SamplePool for AugmentedPool {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn sample(&self, index: usize) -> Result<Cow<'_, Sample>> {
        let e = self.entries[index];
        let base = self.base.get(e.base).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "pool entry {index} refers to missing image {}",
                e.base
            ))
        })?;
        if e.transform == Geometric::Identity && e.scale == 1.0 {
            return Ok(Cow::Borrowed(base));
        }
        Ok(Cow::Owned(zoom(&base.transformed(e.transform), e.scale)?))
    }
}

pub fn steps_per_epoch(pool: usize, batch: usize) -> u64 {
    pool.div_ceil(batch) as u64
}

fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Batch number `k` of `epoch`: the images, stacked and normalized, and their
/// labels flattened in the same order.
pub fn make_batch(
    pool: &dyn SamplePool,
    settings: &LoopSettings,
    stats: &NormalizationStats,
    epoch: usize,
    k: u64,
    step: u64,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let order = epoch_order(settings.seed, epoch, pool.len());
    let bs = settings.optim.batch_size;
    let start = k as usize * bs;
    let picked = &order[start..(start + bs).min(order.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(step);
    let mut inputs = Vec::with_capacity(picked.len());
    let mut labels = Vec::new();
    for &i in picked {
        let crop = random_crop(pool.sample(i)?.as_ref(), settings.crop, &mut rng)?;
        inputs.push(normalize(&crop.image, settings.normalization, stats)?);
        labels.extend_from_slice(crop.mask.labels());
    }
    Ok((Tensor::stack_batch(&inputs)?, labels))
}

/// Single-scale prediction of a whole image.
pub fn predict_image(
    model: &Aenet<f32>,
    sample: &aenet_core::imaging::Image<u8>,
    mode: NormalizationMode,
    stats: &NormalizationStats,
    ensemble: &EnsembleConfig,
) -> Result<(ProbabilityMap, usize)> {
    let x = normalize(sample, mode, stats)?;
    multiscale_infer(&x, model, ensemble)
}

/// Micro-averaged conventional dice of single-scale predictions.
pub fn evaluate_dice(
    model: &Aenet<f32>,
    samples: &[Sample],
    settings: &LoopSettings,
    stats: &NormalizationStats,
) -> Result<f64> {
    let ensemble = EnsembleConfig {
        patch: settings.patch,
        threshold: settings.threshold,
        ..EnsembleConfig::single_scale()
    };
    let counts = samples
        .iter()
        .map(|s| {
            let (prob, _) =
                predict_image(model, &s.image, settings.normalization, stats, &ensemble)?;
            confusion(&binarize(&prob, settings.threshold)?, &s.mask)
        })
        .collect::<Result<Vec<ConfusionCounts>>>()?;
    Ok(aggregate(&counts, Aggregation::Micro)?.dice)
}

/// Hooks called by [`run`]. Returning an error aborts the run.
pub trait Observer {
    fn step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn epoch(&mut self, _record: &EpochRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Trains from `state` until `max_epochs` or `max_steps`. Validation runs at
/// the end of every epoch when `val` is non-empty.
pub fn run(
    state: &mut TrainState,
    pool: &dyn SamplePool,
    val: &[Sample],
    stats: &NormalizationStats,
    settings: &LoopSettings,
    observer: &mut dyn Observer,
) -> Result<()> {
    settings.optim.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("training pool"));
    }
    let per_epoch = steps_per_epoch(pool.len(), settings.optim.batch_size);
    let total = per_epoch * settings.optim.max_epochs as u64;
    let limit = settings.max_steps.unwrap_or(total).min(total);
    while state.step < limit {
        let epoch = (state.step / per_epoch) as usize;
        state.epoch = epoch;
        let mut losses = Vec::new();
        let mut lr = 0.0;
        while state.step < limit && (state.step / per_epoch) as usize == epoch {
            let k = state.step % per_epoch;
            let (x, labels) = make_batch(pool, settings, stats, epoch, k, state.step)?;
            lr = lr_schedule(epoch, state.step, total, &settings.optim);
            let loss = train_step(
                &mut state.model,
                &mut state.optimizer,
                &x,
                &labels,
                lr,
                &settings.optim,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    epoch,
                    batch: k,
                    step: state.step,
                },
                other => other,
            })?;
            observer.step(&StepRecord {
                epoch,
                step: state.step,
                lr,
                loss,
            })?;
            losses.push(loss);
            state.step += 1;
        }
        let val_dice = if val.is_empty() {
            None
        } else {
            Some(evaluate_dice(&state.model, val, settings, stats)?)
        };
        let record = EpochRecord {
            epoch,
            steps: losses.len() as u64,
            lr,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_dice,
        };
        if state.step % per_epoch == 0 {
            state.epoch = epoch + 1;
        }
        observer.epoch(&record, state)?;
    }
    Ok(())
}

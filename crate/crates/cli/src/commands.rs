//! The command implementations behind the binary. Every command reads its
//! inputs from disk, writes per-image files plus a run log, and is
//! deterministic for a fixed configuration.
//!
//! Run directory layout (`data.output`):
//!
//! ```text
//! prepared/  images/ masks/ manifest.toml stats.toml pool.csv prep_log.txt
//! train/     epochs.csv steps.csv epoch_NNNN.ckpt last.ckpt best.ckpt
//! infer/<name>/  prob/ masks/ labels/ overlay/ infer_log.txt
//! eval/      per_image.csv summary.txt
//! ablate/    models/<toggles>/ modules_<split>.csv normalization_<split>.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use aenet_core::imaging::{
    compute_stats, rasterize, Geometric, Image, Mask, NormalizationStats, Sample, ZOOM_SCALES,
};
use aenet_core::inference::{binarize, multiscale_infer, EnsembleConfig, ProbabilityMap};
use aenet_core::metrics::{
    aggregate, confusion, scores, Aggregation, ConfusionCounts, MetricReport,
};
use aenet_core::model::{Aenet, Toggles};
use aenet_core::watershed::{postprocess, LabeledMask, WatershedConfig};
use serde::{Deserialize, Serialize};

use crate::annotations::parse_annotations;
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io;
use crate::manifest::{Entry, Split, SplitManifest};
use crate::synth::{synth_sample, SynthConfig};
use crate::training::{
    self, AugmentedPool, EpochRecord, NormalizationMode, Observer, PoolEntry, StepRecord,
    TrainState,
};

/// Smallest image side accepted for inference.
pub const MIN_SIDE: usize = 16;

pub fn prepared_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data.output.join("prepared")
}

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data.output.join("train")
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> CliResult<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> CliResult<R> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<CliResult<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers.min(items.len()))
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break done;
                        }
                        done.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every item visited"))
        .collect()
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub config: SynthConfig,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Writes `images/`, `masks/` and `manifest.toml` under `root`. Train,
/// validation and test images come from disjoint generator streams.
pub fn synth(root: &Path, seed: u64, opts: &SynthOptions) -> CliResult<SplitManifest> {
    let mut manifest = SplitManifest::default();
    let mut index = 0u64;
    for (split, count, prefix) in [
        (Split::Train, opts.train, "train"),
        (Split::Validation, opts.validation, "val"),
        (Split::SameOrgan, opts.test, "test"),
    ] {
        let list = match split {
            Split::Train => &mut manifest.train,
            Split::Validation => &mut manifest.validation,
            _ => &mut manifest.same_organ,
        };
        for k in 0..count {
            let id = format!("{prefix}-{k:04}");
            let s = synth_sample(&opts.config, seed, index);
            index += 1;
            io::write_rgb(&root.join("images").join(format!("{id}.png")), &s.image)?;
            io::write_mask(&root.join("masks").join(format!("{id}.png")), &s.mask)?;
            list.push(Entry::new(id, None));
        }
    }
    io::write_text(&root.join("manifest.toml"), &manifest.to_toml())?;
    Ok(manifest)
}

// ---------------------------------------------------------------- prep

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepSummary {
    pub images: usize,
    pub train: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolRow {
    index: usize,
    id: String,
    transform: Geometric,
    scale: f64,
}

enum LabelSource {
    Xml(PathBuf),
    Mask(PathBuf),
}

pub fn prep(cfg: &RunConfig) -> CliResult<PrepSummary> {
    let root = &cfg.data.root;
    let manifest = SplitManifest::parse(&io::read_text(&cfg.manifest_path())?)?;
    if cfg.data.public_split {
        manifest.validate_public_split()?;
    }
    let ids: Vec<&Entry> = manifest.entries().map(|(_, e)| e).collect();
    if manifest.train.is_empty() {
        return Err(CliError::Data("manifest has no training images".into()));
    }

    let mut missing = Vec::new();
    let mut jobs = Vec::new();
    for e in &ids {
        let image = io::find_image(&root.join("images"), &e.id);
        let xml = root.join("annotations").join(format!("{}.xml", e.id));
        let label = if xml.is_file() {
            Some(LabelSource::Xml(xml))
        } else {
            io::find_image(&root.join("masks"), &e.id).map(LabelSource::Mask)
        };
        match (image, label) {
            (Some(i), Some(l)) => jobs.push((e.id.clone(), i, l)),
            (i, l) => {
                if i.is_none() {
                    missing.push(root.join("images").join(format!("{}.png", e.id)));
                }
                if l.is_none() {
                    missing.push(root.join("annotations").join(format!("{}.xml", e.id)));
                }
            }
        }
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::Data(format!(
            "missing input files:\n  {}",
            list.join("\n  ")
        )));
    }

    let out = prepared_dir(cfg);
    let results = parallel_map(&jobs, cfg.workers, |(id, image_path, label)| {
        let image = io::read_rgb(image_path)?;
        let (mask, warnings) = match label {
            LabelSource::Xml(p) => {
                let parsed = parse_annotations(&io::read_text(p)?)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                let w = parsed
                    .warnings
                    .iter()
                    .map(|w| format!("{id}: {w}"))
                    .collect();
                (rasterize(&parsed.set, image.height(), image.width())?, w)
            }
            LabelSource::Mask(p) => (io::read_mask(p)?, Vec::new()),
        };
        if (mask.height(), mask.width()) != (image.height(), image.width()) {
            return Err(CliError::Data(format!(
                "{id}: mask size differs from image size"
            )));
        }
        io::write_rgb(&out.join("images").join(format!("{id}.png")), &image)?;
        io::write_mask(&out.join("masks").join(format!("{id}.png")), &mask)?;
        Ok((image, warnings))
    })?;

    let by_id: BTreeMap<&str, &Image<u8>> = jobs
        .iter()
        .zip(&results)
        .map(|(j, r)| (j.0.as_str(), &r.0))
        .collect();
    let train_images: Vec<Image<u8>> = manifest
        .train
        .iter()
        .map(|e| by_id[e.id.as_str()].clone())
        .collect();
    let stats = compute_stats(&train_images, cfg.data.pixel_scale)?;
    io::write_stats(&out.join("stats.toml"), &stats)?;

    let scales: &[f64] = if cfg.data.augment {
        &ZOOM_SCALES
    } else {
        &[1.0]
    };
    let transforms: &[Geometric] = if cfg.data.augment {
        &Geometric::ALL
    } else {
        &[Geometric::Identity]
    };
    let mut pool = csv::Writer::from_writer(Vec::new());
    let mut index = 0;
    for e in &manifest.train {
        for &transform in transforms {
            for &scale in scales {
                pool.serialize(PoolRow {
                    index,
                    id: e.id.clone(),
                    transform,
                    scale,
                })
                .map_err(|err| CliError::Data(err.to_string()))?;
                index += 1;
            }
        }
    }
    let pool = pool
        .into_inner()
        .map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(out.join("pool.csv"), pool).map_err(|e| CliError::io(&out, e))?;
    io::write_text(&out.join("manifest.toml"), &manifest.to_toml())?;

    let warnings: Vec<String> = results.into_iter().flat_map(|r| r.1).collect();
    let summary = PrepSummary {
        images: ids.len(),
        train: manifest.train.len(),
        stage1: manifest.train.len() * transforms.len(),
        stage2: index,
        warnings,
    };
    let mut log = String::new();
    writeln!(log, "images {}", summary.images).unwrap();
    for split in Split::ALL {
        writeln!(log, "{split} {}", manifest.split(split).len()).unwrap();
    }
    writeln!(log, "stage1_augmented {}", summary.stage1).unwrap();
    writeln!(log, "stage2_augmented {}", summary.stage2).unwrap();
    for w in &summary.warnings {
        writeln!(log, "warning {w}").unwrap();
    }
    io::write_text(&out.join("prep_log.txt"), &log)?;
    log::info!(
        "prepared {} images, {} training entries after augmentation",
        summary.images,
        summary.stage2
    );
    Ok(summary)
}

/// A prepared dataset read back from disk.
pub struct Prepared {
    pub dir: PathBuf,
    pub manifest: SplitManifest,
    pub stats: NormalizationStats,
}

impl Prepared {
    pub fn open(dir: &Path) -> CliResult<Self> {
        if !dir.join("manifest.toml").is_file() {
            return Err(CliError::Usage(format!(
                "{} is not a prepared dataset; run prep first",
                dir.display()
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: SplitManifest::parse(&io::read_text(&dir.join("manifest.toml"))?)?,
            stats: io::read_stats(&dir.join("stats.toml"))?,
        })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.dir.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.dir.join("masks").join(format!("{id}.png"))
    }

    pub fn sample(&self, id: &str) -> CliResult<Sample> {
        Ok(Sample::new(
            io::read_rgb(&self.image_path(id))?,
            io::read_mask(&self.mask_path(id))?,
        )?)
    }

    pub fn samples(&self, split: Split) -> CliResult<Vec<(String, Sample)>> {
        self.manifest
            .split(split)
            .iter()
            .map(|e| Ok((e.id.clone(), self.sample(&e.id)?)))
            .collect()
    }

    pub fn pool(&self) -> CliResult<AugmentedPool> {
        let base: Vec<Sample> = self
            .samples(Split::Train)?
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let index: BTreeMap<&str, usize> = self
            .manifest
            .train
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        let path = self.dir.join("pool.csv");
        let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        let mut entries = Vec::new();
        for row in reader.deserialize::<PoolRow>() {
            let row = row.map_err(|e| CliError::io(&path, e))?;
            let base = *index.get(row.id.as_str()).ok_or_else(|| {
                CliError::Data(format!("pool.csv: `{}` is not a training image", row.id))
            })?;
            entries.push(PoolEntry {
                base,
                transform: row.transform,
                scale: row.scale,
            });
        }
        Ok(AugmentedPool { base, entries })
    }
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_val_dice: Option<f64>,
}

struct Logger {
    dir: PathBuf,
    epochs: csv::Writer<fs::File>,
    steps: csv::Writer<fs::File>,
    settings: training::LoopSettings,
    stats: NormalizationStats,
    best: Option<f64>,
    records: Vec<EpochRecord>,
}

fn csv_appender(path: &Path, append: bool) -> CliResult<csv::Writer<fs::File>> {
    let fresh = !append || !path.is_file();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file))
}

fn csv_err(e: impl std::fmt::Display) -> aenet_core::Error {
    aenet_core::Error::InvalidArgument(format!("writing training log: {e}"))
}

impl Logger {
    fn save(&self, name: &str, state: &TrainState) -> CliResult<()> {
        let ck = Checkpoint {
            state: state.clone(),
            settings: self.settings.clone(),
            stats: self.stats,
            best_val_dice: self.best,
        };
        checkpoint::save(&self.dir.join(name), &ck)
    }
}

impl Observer for Logger {
    fn step(&mut self, r: &StepRecord) -> aenet_core::Result<()> {
        self.steps.serialize(r).map_err(csv_err)
    }

    fn epoch(&mut self, r: &EpochRecord, state: &TrainState) -> aenet_core::Result<()> {
        self.epochs.serialize(r).map_err(csv_err)?;
        self.epochs.flush().map_err(csv_err)?;
        self.steps.flush().map_err(csv_err)?;
        log::info!(
            "epoch {} steps {} lr {} loss {:.5} val dice {}",
            r.epoch,
            r.steps,
            r.lr,
            r.mean_loss,
            r.val_dice.map_or("-".to_string(), |d| format!("{d:.4}"))
        );
        let improved = matches!((r.val_dice, self.best), (Some(d), None) if d.is_finite())
            || matches!((r.val_dice, self.best), (Some(d), Some(b)) if d > b);
        if improved {
            self.best = r.val_dice;
        }
        let save = |name: &str| {
            self.save(name, state)
                .map_err(|e| aenet_core::Error::InvalidArgument(e.to_string()))
        };
        save(&format!("epoch_{:04}.ckpt", r.epoch))?;
        save("last.ckpt")?;
        if improved {
            save("best.ckpt")?;
        }
        self.records.push(r.clone());
        Ok(())
    }
}

/// Trains on the prepared dataset under `cfg`, writing logs and checkpoints
/// to `out`. With `resume`, continues from that checkpoint and appends to the
/// logs.
pub fn train_into(
    cfg: &RunConfig,
    prepared: &Prepared,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult<TrainSummary> {
    let settings = cfg.loop_settings();
    let (mut state, best) = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.state.model.config != cfg.model_config() {
                return Err(CliError::Usage(format!(
                    "{} was trained with a different model configuration",
                    p.display()
                )));
            }
            (ck.state, ck.best_val_dice)
        }
        None => {
            let model = Aenet::<f32>::init(cfg.model_config(), cfg.seed)?;
            (TrainState::new(model, &settings.optim), None)
        }
    };
    let pool = prepared.pool()?;
    let val: Vec<Sample> = match cfg.train.validation {
        Some(split) => prepared
            .samples(split)?
            .into_iter()
            .map(|(_, s)| s)
            .collect(),
        None => Vec::new(),
    };
    if let (Some(split), true) = (cfg.train.validation, val.is_empty()) {
        log::warn!("split {split} is empty; training without validation");
    }
    io::create_dir(out)?;
    let mut logger = Logger {
        dir: out.to_path_buf(),
        epochs: csv_appender(&out.join("epochs.csv"), resume.is_some())?,
        steps: csv_appender(&out.join("steps.csv"), resume.is_some())?,
        settings: settings.clone(),
        stats: prepared.stats,
        best,
        records: Vec::new(),
    };
    let start = state.step;
    training::run(
        &mut state,
        &pool,
        &val,
        &prepared.stats,
        &settings,
        &mut logger,
    )
    .map_err(|e| match e {
        aenet_core::Error::InvalidArgument(m) if m.starts_with("writing") => CliError::Data(m),
        other => other.into(),
    })?;
    Ok(TrainSummary {
        steps: state.step - start,
        epochs: logger.records,
        best_val_dice: logger.best,
    })
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<TrainSummary> {
    let prepared = Prepared::open(&prepared_dir(cfg))?;
    train_into(cfg, &prepared, &train_dir(cfg), resume)
}

/// `best.ckpt` when validation ran, otherwise `last.ckpt`.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    let best = train_dir(cfg).join("best.ckpt");
    if best.is_file() {
        best
    } else {
        train_dir(cfg).join("last.ckpt")
    }
}

// ---------------------------------------------------------------- infer

pub struct Segmentation {
    pub probability: ProbabilityMap,
    pub mask: Mask,
    pub labels: Option<LabeledMask>,
    pub passes: usize,
}

/// Normalization, ensemble inference and, when `watershed` is set, the
/// post-processing of one image.
pub fn segment(
    model: &Aenet<f32>,
    image: &Image<u8>,
    stats: &NormalizationStats,
    normalization: NormalizationMode,
    ensemble: &EnsembleConfig,
    watershed: Option<&WatershedConfig>,
) -> CliResult<Segmentation> {
    if image.height() < MIN_SIDE || image.width() < MIN_SIDE {
        return Err(CliError::Data(format!(
            "image is {}x{}; sides below {MIN_SIDE} are not supported",
            image.height(),
            image.width()
        )));
    }
    let x = training::normalize(image, normalization, stats)?;
    let (probability, passes) = multiscale_infer(&x, model, ensemble)?;
    let (mask, labels) = match watershed {
        Some(ws) => {
            let (m, l) = postprocess(&probability, ws)?;
            (m, Some(l))
        }
        None => (binarize(&probability, ensemble.threshold)?, None),
    };
    Ok(Segmentation {
        probability,
        mask,
        labels,
        passes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Split(Split),
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferRecord {
    pub id: String,
    pub passes: usize,
    pub instances: Option<usize>,
}

pub fn infer(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    source: &ImageSource,
    out: &Path,
) -> CliResult<Vec<InferRecord>> {
    let ck = checkpoint::load(checkpoint_path)?;
    if ck.state.model.config.toggles != cfg.modules.network() {
        log::warn!(
            "module toggles come from the checkpoint; the configured cam/sam/ffb keys are ignored"
        );
    }
    let jobs: Vec<(String, PathBuf)> = match source {
        ImageSource::Split(split) => {
            let prepared = Prepared::open(&prepared_dir(cfg))?;
            let ids: Vec<String> = prepared
                .manifest
                .split(*split)
                .iter()
                .map(|e| e.id.clone())
                .collect();
            ids.into_iter()
                .map(|id| {
                    let p = prepared.image_path(&id);
                    (id, p)
                })
                .collect()
        }
        ImageSource::Dir(dir) => io::list_images(dir)?
            .into_iter()
            .map(|id| {
                let p = io::find_image(dir, &id).expect("listed image exists");
                (id, p)
            })
            .collect(),
    };
    if jobs.is_empty() {
        return Err(CliError::Usage("no images to segment".into()));
    }
    let ensemble = cfg.inference.ensemble();
    let ws = cfg.watershed_config();
    let ws = cfg.modules.watershed.then_some(&ws);
    let sidecar = io::ProbabilitySidecar {
        passes: ensemble.passes(),
        normalization: cfg.inference.normalization,
        ensemble: ensemble.clone(),
    };
    let model = &ck.state.model;
    let records = parallel_map(&jobs, cfg.workers, |(id, path)| {
        let image = io::read_rgb(path)?;
        let seg = segment(
            model,
            &image,
            &ck.stats,
            cfg.inference.normalization,
            &ensemble,
            ws,
        )
        .map_err(|e| match e {
            CliError::Data(m) => CliError::Data(format!("{id}: {m}")),
            other => other,
        })?;
        log::info!("{id}: {} passes", seg.passes);
        let file = format!("{id}.png");
        io::write_probability(&out.join("prob").join(&file), &seg.probability, &sidecar)?;
        io::write_mask(&out.join("masks").join(&file), &seg.mask)?;
        let instances = match &seg.labels {
            Some(labels) => {
                io::write_labels(&out.join("labels").join(&file), labels)?;
                io::write_rgb(
                    &out.join("overlay").join(&file),
                    &io::boundary_overlay(&image, labels)?,
                )?;
                Some(
                    labels
                        .data()
                        .iter()
                        .copied()
                        .collect::<BTreeSet<u32>>()
                        .len()
                        - usize::from(labels.data().contains(&0)),
                )
            }
            None => None,
        };
        Ok(InferRecord {
            id: id.clone(),
            passes: seg.passes,
            instances,
        })
    })?;
    let mut log = String::new();
    for r in &records {
        let inst = r.instances.map_or("-".to_string(), |n| n.to_string());
        writeln!(log, "{} passes={} instances={inst}", r.id, r.passes).unwrap();
    }
    io::write_text(&out.join("infer_log.txt"), &log)?;
    Ok(records)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub aggregation: Aggregation,
    /// Ground truth may hold identifiers without a prediction.
    pub subset: bool,
    pub min_f1: Option<f64>,
    pub min_dice: Option<f64>,
    pub min_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_image: Vec<(String, ConfusionCounts, MetricReport)>,
    pub aggregate: MetricReport,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    id: &'a str,
    tp: u64,
    tn: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    accuracy: f64,
    recall: f64,
    precision: f64,
    f1: f64,
    miou: f64,
    dice: f64,
    dice_paper: f64,
    degenerate: bool,
}

impl<'a> EvalRow<'a> {
    fn new(id: &'a str, c: &ConfusionCounts, r: &MetricReport) -> Self {
        Self {
            id,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            accuracy: r.accuracy,
            recall: r.recall,
            precision: r.precision,
            f1: r.f1,
            miou: r.miou,
            dice: r.dice,
            dice_paper: r.dice_paper,
            degenerate: r.degenerate,
        }
    }
}

fn aggregation_name(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Micro => "micro",
        Aggregation::Macro => "macro",
    }
}

/// Scores every predicted mask against the ground-truth mask of the same
/// name. Files are written before thresholds are checked.
pub fn eval(pred: &Path, gt: &Path, out: &Path, opts: &EvalOptions) -> CliResult<EvalSummary> {
    let list = |d: &Path| -> CliResult<Vec<String>> {
        if !d.is_dir() {
            return Err(CliError::Usage(format!(
                "{} is not a directory",
                d.display()
            )));
        }
        let ids = io::list_images(d)?;
        if ids.is_empty() {
            return Err(CliError::Usage(format!(
                "{} contains no images",
                d.display()
            )));
        }
        Ok(ids)
    };
    let (p_ids, g_ids) = (list(pred)?, list(gt)?);
    let p_set: BTreeSet<&String> = p_ids.iter().collect();
    let g_set: BTreeSet<&String> = g_ids.iter().collect();
    let only_pred: Vec<&str> = p_set.difference(&g_set).map(|s| s.as_str()).collect();
    let mut only_gt: Vec<&str> = g_set.difference(&p_set).map(|s| s.as_str()).collect();
    if opts.subset {
        only_gt.clear();
    }
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(CliError::Data(format!(
            "unmatched identifiers; predictions only: [{}]; ground truth only: [{}]",
            only_pred.join(", "),
            only_gt.join(", ")
        )));
    }

    let mut per_image = Vec::new();
    for id in &p_ids {
        let p = io::read_mask(&io::find_image(pred, id).expect("listed"))?;
        let g = io::read_mask(&io::find_image(gt, id).expect("listed"))?;
        let c = confusion(&p, &g).map_err(|e| CliError::Data(format!("{id}: {e}")))?;
        per_image.push((id.clone(), c, scores(&c)?));
    }
    let counts: Vec<ConfusionCounts> = per_image.iter().map(|r| r.1).collect();
    let total: ConfusionCounts = counts.iter().copied().sum();
    let agg = aggregate(&counts, opts.aggregation)?;

    io::create_dir(out)?;
    let path = out.join("per_image.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    for (id, c, r) in &per_image {
        w.serialize(EvalRow::new(id, c, r))
            .map_err(|e| CliError::io(&path, e))?;
    }
    let label = format!("aggregate_{}", aggregation_name(opts.aggregation));
    w.serialize(EvalRow::new(&label, &total, &agg))
        .map_err(|e| CliError::io(&path, e))?;
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let mut text = String::new();
    writeln!(text, "images = {}", per_image.len()).unwrap();
    writeln!(
        text,
        "aggregation = \"{}\"",
        aggregation_name(opts.aggregation)
    )
    .unwrap();
    for (name, v) in MetricReport::FIELDS.iter().zip(agg.values()) {
        writeln!(text, "{name} = {v}").unwrap();
    }
    writeln!(text, "degenerate = {}", agg.degenerate).unwrap();
    io::write_text(&out.join("summary.txt"), &text)?;

    let mut unmet = Vec::new();
    for (name, want, got) in [
        ("f1", opts.min_f1, agg.f1),
        ("dice", opts.min_dice, agg.dice),
        ("miou", opts.min_miou, agg.miou),
    ] {
        if let Some(want) = want.filter(|&w| !(got >= w)) {
            unmet.push(format!("{name} {got:.6} < {want}"));
        }
    }
    if !unmet.is_empty() {
        return Err(CliError::Numeric(format!(
            "score thresholds not met: {}",
            unmet.join(", ")
        )));
    }
    Ok(EvalSummary {
        per_image,
        aggregate: agg,
    })
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// CAM/SAM/FFB/WS rows.
    Modules,
    /// ICN/MS rows.
    Normalization,
}

/// Module rows in the order of the module ablation tables.
pub const MODULE_ROWS: [[bool; 4]; 5] = [
    [false, false, false, false],
    [true, false, false, false],
    [true, true, false, false],
    [true, true, true, false],
    [true, true, true, true],
];

/// (individual normalization, multi-scale) rows.
pub const NORMALIZATION_ROWS: [[bool; 2]; 4] =
    [[false, false], [false, true], [true, false], [true, true]];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub switches: Vec<bool>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub grid: Grid,
    pub split: Split,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn headers(&self) -> (&'static [&'static str], &'static [&'static str]) {
        match self.grid {
            Grid::Modules => (&["cam", "sam", "ffb", "ws"], &["f1", "dice", "miou"]),
            Grid::Normalization => (&["icn", "ms"], &["recall", "precision", "f1", "dice"]),
        }
    }

    fn metric(r: &MetricReport, name: &str) -> f64 {
        match name {
            "f1" => r.f1,
            "dice" => r.dice,
            "miou" => r.miou,
            "recall" => r.recall,
            "precision" => r.precision,
            _ => unreachable!("known column"),
        }
    }

    pub fn to_csv(&self) -> String {
        let (switches, metrics) = self.headers();
        let mut s = format!("{},{}\n", switches.join(","), metrics.join(","));
        for row in &self.rows {
            let mut cells: Vec<String> = row
                .switches
                .iter()
                .map(|&b| u8::from(b).to_string())
                .collect();
            cells.extend(
                metrics
                    .iter()
                    .map(|m| format!("{:.6}", Self::metric(&row.report, m))),
            );
            writeln!(s, "{}", cells.join(",")).unwrap();
        }
        s
    }

    /// Fixed-width table with check marks.
    pub fn render(&self) -> String {
        let (switches, metrics) = self.headers();
        let mut s = String::new();
        for h in switches.iter().chain(metrics) {
            write!(s, "{:>10}", h.to_uppercase()).unwrap();
        }
        s.push('\n');
        for row in &self.rows {
            for &b in &row.switches {
                write!(s, "{:>10}", if b { "x" } else { "" }).unwrap();
            }
            for m in metrics {
                write!(s, "{:>10.3}", Self::metric(&row.report, m)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn model_key(t: Toggles) -> String {
    format!(
        "cam{}_sam{}_ffb{}",
        u8::from(t.cam),
        u8::from(t.sam),
        u8::from(t.ffb)
    )
}

/// The final checkpoint for `toggles`, trained under the run budget unless it
/// already exists.
fn ablation_model(cfg: &RunConfig, prepared: &Prepared, toggles: Toggles) -> CliResult<Checkpoint> {
    let dir = cfg
        .data
        .output
        .join("ablate")
        .join("models")
        .join(model_key(toggles));
    let last = dir.join("last.ckpt");
    if !last.is_file() {
        let mut row_cfg = cfg.clone();
        row_cfg.modules.cam = toggles.cam;
        row_cfg.modules.sam = toggles.sam;
        row_cfg.modules.ffb = toggles.ffb;
        log::info!("training {}", model_key(toggles));
        train_into(&row_cfg, prepared, &dir, None)?;
    }
    checkpoint::load(&last)
}

fn score_split(
    cfg: &RunConfig,
    ck: &Checkpoint,
    samples: &[(String, Sample)],
    normalization: NormalizationMode,
    ensemble: &EnsembleConfig,
    watershed: bool,
) -> CliResult<MetricReport> {
    let ws = cfg.watershed_config();
    let ws = watershed.then_some(&ws);
    let counts = parallel_map(samples, cfg.workers, |(id, s)| {
        let seg = segment(
            &ck.state.model,
            &s.image,
            &ck.stats,
            normalization,
            ensemble,
            ws,
        )
        .map_err(|e| CliError::Data(format!("{id}: {e}")))?;
        Ok(confusion(&seg.mask, &s.mask)?)
    })?;
    Ok(aggregate(&counts, Aggregation::Micro)?)
}

/// Runs the requested grids on `split` and writes one CSV per grid.
pub fn ablate(cfg: &RunConfig, grids: &[Grid], split: Split) -> CliResult<Vec<AblationTable>> {
    let prepared = Prepared::open(&prepared_dir(cfg))?;
    let samples = prepared.samples(split)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split {split} is empty")));
    }
    let out = cfg.data.output.join("ablate");
    let mut tables = Vec::new();
    for &grid in grids {
        let rows = match grid {
            Grid::Modules => {
                let mut rows = Vec::new();
                let ensemble = cfg.inference.ensemble();
                for sw in MODULE_ROWS {
                    let ck = ablation_model(
                        cfg,
                        &prepared,
                        Toggles {
                            cam: sw[0],
                            sam: sw[1],
                            ffb: sw[2],
                        },
                    )?;
                    let report = score_split(
                        cfg,
                        &ck,
                        &samples,
                        cfg.inference.normalization,
                        &ensemble,
                        sw[3],
                    )?;
                    rows.push(AblationRow {
                        switches: sw.to_vec(),
                        report,
                    });
                }
                rows
            }
            Grid::Normalization => {
                let ck = ablation_model(cfg, &prepared, cfg.modules.network())?;
                let mut rows = Vec::new();
                for sw in NORMALIZATION_ROWS {
                    let inference = crate::config::InferenceSection {
                        multiscale: sw[1],
                        flip: sw[1],
                        ..cfg.inference.clone()
                    };
                    let mode = if sw[0] {
                        NormalizationMode::Individual
                    } else {
                        NormalizationMode::Global
                    };
                    let report = score_split(
                        cfg,
                        &ck,
                        &samples,
                        mode,
                        &inference.ensemble(),
                        cfg.modules.watershed,
                    )?;
                    rows.push(AblationRow {
                        switches: sw.to_vec(),
                        report,
                    });
                }
                rows
            }
        };
        let table = AblationTable { grid, split, rows };
        let name = match grid {
            Grid::Modules => "modules",
            Grid::Normalization => "normalization",
        };
        io::write_text(&out.join(format!("{name}_{split}.csv")), &table.to_csv())?;
        tables.push(table);
    }
    Ok(tables)
}

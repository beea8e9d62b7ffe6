//! Run configuration: a TOML file with one section per stage. Every module
//! toggle of the ablation tables is a single key.

use std::path::{Path, PathBuf};

use aenet_core::imaging::{NormalizationStats, PixelScale, CROP_SIDE};
use aenet_core::inference::{EnsembleConfig, ENSEMBLE_SCALES, PATCH_SIDE};
use aenet_core::model::{ModelConfig, Toggles, TrainConfig};
use aenet_core::watershed::WatershedConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::Split;
use crate::training::{LoopSettings, NormalizationMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Images processed concurrently by `prep` and `infer`.
    pub workers: usize,
    pub data: DataConfig,
    pub model: ModelSection,
    pub modules: ModuleToggles,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub watershed: WatershedSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
            model: ModelSection::default(),
            modules: ModuleToggles::default(),
            train: TrainSection::default(),
            inference: InferenceSection::default(),
            watershed: WatershedSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset with `images/`, `annotations/` (or `masks/`) and the manifest.
    pub root: PathBuf,
    /// Relative to `root` unless absolute.
    pub manifest: PathBuf,
    /// Run directory; every command writes below it.
    pub output: PathBuf,
    /// Require the 16/8/6 split of the public dataset.
    pub public_split: bool,
    pub augment: bool,
    pub pixel_scale: PixelScale,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            manifest: PathBuf::from("manifest.toml"),
            output: PathBuf::from("run"),
            public_split: false,
            augment: true,
            pixel_scale: PixelScale::Unit,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    #[default]
    Full,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleToggles {
    pub cam: bool,
    pub sam: bool,
    pub ffb: bool,
    pub watershed: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self {
            cam: true,
            sam: true,
            ffb: true,
            watershed: true,
        }
    }
}

impl ModuleToggles {
    pub fn network(&self) -> Toggles {
        Toggles {
            sam: self.sam,
            cam: self.cam,
            ffb: self.ffb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub max_steps: Option<u64>,
    pub halve_epoch: usize,
    pub poly_epoch: usize,
    pub poly_power: f64,
    pub class_weights: [f64; 2],
    pub normalization: NormalizationMode,
    /// Split scored after every epoch; `none` disables validation.
    #[serde(with = "split_or_none")]
    pub validation: Option<Split>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.initial_lr,
            epochs: t.max_epochs,
            batch: t.batch_size,
            crop: CROP_SIDE,
            max_steps: None,
            halve_epoch: t.halve_epoch,
            poly_epoch: t.poly_epoch,
            poly_power: t.poly_power,
            class_weights: t.class_weights,
            normalization: NormalizationMode::Global,
            validation: Some(Split::Validation),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub normalization: NormalizationMode,
    pub multiscale: bool,
    pub flip: bool,
    pub patch: usize,
    pub threshold: f32,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            normalization: NormalizationMode::Global,
            multiscale: true,
            flip: true,
            patch: PATCH_SIDE,
            threshold: 0.5,
        }
    }
}

impl InferenceSection {
    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            scales: if self.multiscale {
                ENSEMBLE_SCALES.to_vec()
            } else {
                vec![1.0]
            },
            flip: self.flip,
            threshold: self.threshold,
            patch: self.patch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatershedSection {
    pub marker_fraction: f64,
    pub background_margin: f64,
    pub min_size: usize,
}

impl Default for WatershedSection {
    fn default() -> Self {
        let w = WatershedConfig::default();
        Self {
            marker_fraction: w.marker_fraction,
            background_margin: w.background_margin,
            min_size: w.min_size,
        }
    }
}

impl RunConfig {
    /// Parses `text`, then applies `section.key=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if self.train.crop == 0 || self.inference.patch == 0 {
            return bad("crop and patch sides must be positive");
        }
        self.optim()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.inference
            .ensemble()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.watershed_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data.root.join(&self.data.manifest)
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.model.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Full => ModelConfig::default(),
        };
        base.with_toggles(self.modules.network())
    }

    pub fn optim(&self) -> TrainConfig {
        TrainConfig {
            initial_lr: self.train.lr,
            max_epochs: self.train.epochs,
            batch_size: self.train.batch,
            halve_epoch: self.train.halve_epoch,
            poly_epoch: self.train.poly_epoch,
            poly_power: self.train.poly_power,
            class_weights: self.train.class_weights,
            ..TrainConfig::default()
        }
    }

    pub fn loop_settings(&self) -> LoopSettings {
        LoopSettings {
            optim: self.optim(),
            crop: self.train.crop,
            max_steps: self.train.max_steps,
            seed: self.seed,
            normalization: self.train.normalization,
            patch: self.inference.patch,
            threshold: self.inference.threshold,
        }
    }

    pub fn watershed_config(&self) -> WatershedConfig {
        WatershedConfig {
            threshold: self.inference.threshold,
            marker_fraction: self.watershed.marker_fraction,
            background_margin: self.watershed.background_margin,
            min_size: self.watershed.min_size,
        }
    }

    pub fn identity_stats(&self) -> NormalizationStats {
        NormalizationStats::identity(self.data.pixel_scale)
    }
}

mod split_or_none {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    use crate::manifest::Split;

    pub fn serialize<S: Serializer>(v: &Option<Split>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(split) => split.serialize(s),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Split>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "none" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(de::Error::custom)
        }
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let raw = raw.trim();
    // bare words are strings; everything else is parsed as a TOML value
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one item");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_published_setup() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg.optim(), TrainConfig::default());
        assert_eq!(cfg.inference.ensemble().passes(), 14);
        assert_eq!(cfg.model_config(), ModelConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = RunConfig::from_toml(
            "[modules]\ncam = false\n",
            &[
                "modules.watershed=false".into(),
                "model.preset=toy".into(),
                "train.max_steps=5".into(),
                "train.validation=none".into(),
            ],
        )
        .unwrap();
        assert!(!cfg.modules.cam && !cfg.modules.watershed && cfg.modules.sam);
        assert_eq!(cfg.model.preset, Preset::Toy);
        assert_eq!(cfg.train.max_steps, Some(5));
        assert_eq!(cfg.train.validation, None);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = RunConfig::from_toml("[modules]\ncma = true\n", &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}

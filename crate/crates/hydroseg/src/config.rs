//! Experiment configuration: one TOML document, dotted-key overrides, and the
//! environment variables that redirect output and set parallelism.

use std::path::{Path, PathBuf};

use hydroseg_core::augment::AugmentSpec;
use hydroseg_core::losses::LossWeights;
use hydroseg_core::model::UNetConfig;
use hydroseg_core::optim::{OptimizerSpec, ScheduleSpec};
use hydroseg_core::otsu::OtsuConfig;
use hydroseg_core::raster::{ScalingSpec, SynthSpec};
use hydroseg_core::trainer::{SupervisedConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const OUTPUT_DIR_ENV: &str = "HYDROSEG_OUTPUT_DIR";
pub const JOBS_ENV: &str = "HYDROSEG_JOBS";

/// A radar raster with an optional ground-truth mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSource {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Acquisition date as `YYYY-MM-DD`, used by the month filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    /// Scenes cut into the train/validation pool.
    pub train_scenes: usize,
    /// Separately generated scenes whose tiles form the test set.
    pub test_scenes: usize,
    pub seed: u64,
    pub scene: SynthSpec,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { train_scenes: 4, test_scenes: 2, seed: 0, scene: SynthSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Rasters {
        #[serde(default)]
        scenes: Vec<SceneSource>,
        /// Held-out scenes. When empty the test set is whatever the split
        /// fractions leave over.
        #[serde(default)]
        test_scenes: Vec<SceneSource>,
        #[serde(default)]
        scaling: ScalingSpec,
        /// Scenes acquired in these months (1-12) are skipped.
        #[serde(default)]
        exclude_months: Vec<u32>,
    },
    /// A tile directory written by the `tile` command.
    Manifest { path: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticData::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.8, validation: 0.2, seed: 0 }
    }
}

/// Which tiles the class assignment is fitted on for final evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSet {
    #[default]
    Test,
    Validation,
}

impl FitSet {
    pub fn name(self) -> &'static str {
        match self {
            FitSet::Test => "test",
            FitSet::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub tile_size: usize,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: UNetConfig,
    pub n_class: usize,
    pub loss: LossWeights,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleSpec,
    pub augment: AugmentSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub ensemble_size: usize,
    /// Member seeds. When shorter than `ensemble_size`, the missing seeds
    /// continue from the last one (or from 0).
    pub seeds: Vec<u64>,
    pub supervised_fraction: f64,
    pub assignment_fit: FitSet,
    pub otsu: OtsuConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            output_dir: PathBuf::from("runs"),
            tile_size: 512,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            model: train.model,
            n_class: train.n_class,
            loss: train.weights,
            optimizer: train.optimizer,
            schedule: train.schedule,
            augment: train.augment,
            epochs: train.epochs,
            batch_size: train.batch_size,
            eval_batch_size: train.eval_batch_size,
            ensemble_size: 5,
            seeds: Vec::new(),
            supervised_fraction: 1.0,
            assignment_fit: FitSet::Test,
            otsu: OtsuConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective configuration next to a run's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.model.check_tile_side(self.tile_size)?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.otsu.validate()?;
        if self.n_class < 2 {
            return bad(format!("n_class must be >= 2, got {}", self.n_class));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be >= 1".into());
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be >= 1".into());
        }
        if !(self.supervised_fraction > 0.0 && self.supervised_fraction <= 1.0) {
            return bad(format!("supervised_fraction must lie in (0, 1], got {}", self.supervised_fraction));
        }
        if let DataConfig::Rasters { exclude_months, .. } = &self.data {
            if let Some(m) = exclude_months.iter().find(|m| !(1..=12).contains(*m)) {
                return bad(format!("exclude_months contains {m}"));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the document;
    /// values are parsed as TOML and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Honours the output-directory environment variable.
    pub fn with_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn member_seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> = self.seeds.iter().copied().take(self.ensemble_size).collect();
        while seeds.len() < self.ensemble_size {
            seeds.push(seeds.last().map_or(0, |s| s + 1));
        }
        seeds
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model: self.model,
            n_class: self.n_class,
            weights: self.loss,
            optimizer: self.optimizer,
            schedule: self.schedule,
            augment: self.augment,
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            seed,
        }
    }

    pub fn supervised_config(&self, seed: u64) -> SupervisedConfig {
        SupervisedConfig {
            model: self.model,
            optimizer: self.optimizer,
            schedule: self.schedule,
            fraction: self.supervised_fraction,
            epochs: self.epochs,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            seed,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// Number of parallel worker processes: the environment, else 1.
pub fn jobs_from_env() -> usize {
    std::env::var(JOBS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

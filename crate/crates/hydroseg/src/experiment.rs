//! Run orchestration: single models, the supervised and Otsu baselines,
//! ensembles, repeated experiments and ablations. Every run directory gets a
//! config snapshot, a metric log and JSON records of its results.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use hydroseg_core::metrics::{aggregate_runs, evaluate_dataset, EvalReport, RunStats, IOU_EPSILON};
use hydroseg_core::model::{count_parameters, UNetEncoder};
use hydroseg_core::otsu::{otsu_segment, OtsuThreshold};
use hydroseg_core::postprocess::{apply_assignment, fit_assignment, majority_vote, ClassAssignment, GroundClass};
use hydroseg_core::raster::{assemble, tiled_extent, Tile};
use hydroseg_core::trainer::{
    predict_supervised, train_epoch, train_supervised, EvalRecord, LogRecord, SegmentationModel, TrainState,
};
use hydroseg_core::{BinaryMask, Grid};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, LoadedModel, ModelKind};
use crate::config::{ExperimentConfig, FitSet, OUTPUT_DIR_ENV};
use crate::data::{masks, Dataset};
use crate::error::{format_err, io_err, Error, Result};
use crate::geotiff;
use crate::logs::MetricLog;
use crate::report::{mean_var, TextTable, EVAL_FILE, LOG_FILE};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
pub const ASSIGNMENT_FILE: &str = "assignment.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Encoder size of the reference architecture, shown next to ours.
pub const REFERENCE_ENCODER_PARAMETERS: usize = 13_310;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub checkpoint_id: String,
    pub fitting_set: String,
    pub dataset: String,
    pub mapping: Vec<GroundClass>,
    pub per_class_iou: Vec<[f64; 2]>,
}

impl AssignmentRecord {
    pub fn assignment(&self) -> ClassAssignment {
        ClassAssignment { mapping: self.mapping.clone(), per_class_iou: self.per_class_iou.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: ModelKind,
    pub seed: u64,
    pub checkpoint_id: String,
    pub dataset: String,
    pub epochs: usize,
    pub encoder_parameters: usize,
    pub final_val_iou: Option<f64>,
    pub final_occupied_classes: Option<f64>,
    pub fitting_set: Option<String>,
    pub test: Option<EvalReport>,
    pub elapsed_seconds: f64,
}

impl RunSummary {
    pub fn test_iou(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.dataset_iou)
    }
}

/// A finished run with its binary test predictions in test-tile order.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub predictions: Option<Vec<BinaryMask>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn encoder_parameters(cfg: &ExperimentConfig) -> Result<usize> {
    Ok(count_parameters(&UNetEncoder::<f32>::new(cfg.model, 0)?))
}

fn pixels(tiles: &[Tile]) -> Vec<Grid<f32>> {
    tiles.iter().map(|t| t.pixels.clone()).collect()
}

/// Binary test predictions of a self-supervised model with the assignment
/// fitted on `fit`; `None` when the fitting tiles carry no masks.
pub struct Evaluation {
    pub assignment: ClassAssignment,
    pub predictions: Vec<BinaryMask>,
    pub report: Option<EvalReport>,
}

pub fn evaluate_model(model: &SegmentationModel, data: &Dataset, fit: FitSet, batch_size: usize) -> Result<Option<Evaluation>> {
    let fit_tiles = data.fit_tiles(fit);
    let Ok(fit_masks) = masks(&fit_tiles, fit.name()) else { return Ok(None) };
    if fit_tiles.is_empty() {
        return Ok(None);
    }
    let fit_classes = model.predict_classes(&pixels(&fit_tiles), batch_size)?;
    let assignment = fit_assignment(&fit_classes, &fit_masks, model.n_class(), IOU_EPSILON)?;
    let test_classes = match fit {
        FitSet::Test => fit_classes,
        FitSet::Validation => model.predict_classes(&pixels(&data.test), batch_size)?,
    };
    let predictions = test_classes.iter().map(|c| apply_assignment(c, &assignment)).collect::<Result<Vec<_>, _>>()?;
    let report = score(&predictions, &data.test, batch_size)?;
    Ok(Some(Evaluation { assignment, predictions, report }))
}

fn score(predictions: &[BinaryMask], test: &[Tile], batch_size: usize) -> Result<Option<EvalReport>> {
    if test.is_empty() {
        return Ok(None);
    }
    match masks(test, "test") {
        Ok(gt) => Ok(Some(evaluate_dataset(predictions, &gt, batch_size, IOU_EPSILON)?)),
        Err(_) => Ok(None),
    }
}

/// Config for one run: a single seed and its own output directory.
pub fn single_run_config(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> ExperimentConfig {
    ExperimentConfig { output_dir: dir.to_path_buf(), seeds: vec![seed], ensemble_size: 1, ..cfg.clone() }
}

/// Trains one self-supervised model into `cfg.output_dir` using the first
/// member seed, logging held-out IOU after every epoch.
pub fn train_run(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunResult> {
    let start = Instant::now();
    let seed = cfg.member_seeds()[0];
    let dir = cfg.output_dir.clone();
    single_run_config(cfg, seed, &dir).write_snapshot(&dir)?;
    let mut log = MetricLog::create(&dir.join(LOG_FILE))?;
    let mut state = TrainState::new(cfg.train_config(seed))?;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let record = train_epoch(&mut state, &data.tiles, &data.split, &mut |r| log.append(r))?;
        if let Some(ev) = evaluate_model(&state.model, data, cfg.assignment_fit, cfg.eval_batch_size)? {
            if let Some(rep) = &ev.report {
                log.append(&LogRecord::Evaluation(EvalRecord {
                    epoch,
                    set: "test".into(),
                    fitting_set: cfg.assignment_fit.name().into(),
                    dataset_iou: rep.dataset_iou,
                    global_iou: rep.global_iou,
                }));
            }
        }
        last = Some(record);
    }
    log.finish()?;

    let checkpoint_id = checkpoint::save_segmentation(&dir.join(CHECKPOINT_FILE), &state.model, seed, state.epochs_done)?;
    if let Some(best) = &state.best {
        checkpoint::save_segmentation(&dir.join(BEST_CHECKPOINT_FILE), &best.model, seed, best.epoch + 1)?;
    }
    let evaluation = evaluate_model(&state.model, data, cfg.assignment_fit, cfg.eval_batch_size)?;
    if let Some(ev) = &evaluation {
        write_json(
            &dir.join(ASSIGNMENT_FILE),
            &AssignmentRecord {
                checkpoint_id: checkpoint_id.clone(),
                fitting_set: cfg.assignment_fit.name().into(),
                dataset: data.id.clone(),
                mapping: ev.assignment.mapping.clone(),
                per_class_iou: ev.assignment.per_class_iou.clone(),
            },
        )?;
        if let Some(rep) = &ev.report {
            write_json(&dir.join(EVAL_FILE), rep)?;
        }
    }
    let summary = RunSummary {
        kind: ModelKind::SelfSupervised,
        seed,
        checkpoint_id,
        dataset: data.id.clone(),
        epochs: state.epochs_done,
        encoder_parameters: encoder_parameters(cfg)?,
        final_val_iou: last.as_ref().and_then(|r| r.val_iou),
        final_occupied_classes: last.as_ref().map(|r| r.mean_occupied_classes),
        fitting_set: evaluation.as_ref().map(|_| cfg.assignment_fit.name().to_string()),
        test: evaluation.as_ref().and_then(|e| e.report.clone()),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(RunResult { summary, predictions: evaluation.map(|e| e.predictions) })
}

/// Reloads a finished run's predictions from its checkpoint and assignment.
pub fn load_run(dir: &Path, data: &Dataset, batch_size: usize) -> Result<RunResult> {
    let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
    let ck = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let predictions = match &ck.model {
        LoadedModel::SelfSupervised(model) => {
            let path = dir.join(ASSIGNMENT_FILE);
            if path.exists() {
                let rec: AssignmentRecord = read_json(&path)?;
                if rec.checkpoint_id != ck.id {
                    return Err(format_err(&path, "assignment belongs to a different checkpoint"));
                }
                let classes = model.predict_classes(&pixels(&data.test), batch_size)?;
                let a = rec.assignment();
                Some(classes.iter().map(|c| apply_assignment(c, &a)).collect::<Result<Vec<_>, _>>()?)
            } else {
                None
            }
        }
        LoadedModel::Supervised(model) => Some(predict_supervised(model, &pixels(&data.test), batch_size)?),
    };
    Ok(RunResult { summary, predictions })
}

/// Dice-trained baseline on `supervised_fraction` of the training tiles.
pub fn supervised_run(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunResult> {
    let start = Instant::now();
    let seed = cfg.member_seeds()[0];
    let dir = cfg.output_dir.clone();
    single_run_config(cfg, seed, &dir).write_snapshot(&dir)?;
    let mut log = MetricLog::create(&dir.join(LOG_FILE))?;
    let outcome = train_supervised(&data.tiles, &data.split, &cfg.supervised_config(seed), &mut |r| log.append(r))?;
    log.finish()?;
    let checkpoint_id = checkpoint::save_supervised(&dir.join(CHECKPOINT_FILE), &outcome.model, seed, outcome.epochs.len())?;
    let predictions = if data.test.is_empty() {
        Vec::new()
    } else {
        predict_supervised(&outcome.model, &pixels(&data.test), cfg.eval_batch_size)?
    };
    let report = score(&predictions, &data.test, cfg.eval_batch_size)?;
    if let Some(rep) = &report {
        write_json(&dir.join(EVAL_FILE), rep)?;
    }
    let summary = RunSummary {
        kind: ModelKind::Supervised,
        seed,
        checkpoint_id,
        dataset: data.id.clone(),
        epochs: outcome.epochs.len(),
        encoder_parameters: encoder_parameters(cfg)?,
        final_val_iou: outcome.epochs.last().and_then(|e| e.val_iou),
        final_occupied_classes: None,
        fitting_set: None,
        test: report,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(RunResult { summary, predictions: Some(predictions) })
}

#[derive(Debug, Clone)]
pub struct OtsuOutcome {
    /// Per test tile, cropped from whole-scene segmentations when the scene
    /// is known.
    pub predictions: Vec<BinaryMask>,
    pub thresholds: Vec<(String, OtsuThreshold)>,
    pub report: Option<EvalReport>,
}

/// Otsu baseline over the test tiles. Whole scenes are segmented once and
/// cropped; tiles without a known scene are segmented on their own.
pub fn otsu_run(cfg: &ExperimentConfig, data: &Dataset, use_pre: bool, use_post: bool) -> Result<OtsuOutcome> {
    let mut by_scene: HashMap<String, BinaryMask> = HashMap::new();
    let mut thresholds = Vec::new();
    let mut predictions = Vec::with_capacity(data.test.len());
    for tile in &data.test {
        let mask = match data.scene(&tile.scene_id) {
            Some(entry) => {
                if !by_scene.contains_key(&tile.scene_id) {
                    let seg = otsu_segment(&entry.scene.pixels, &cfg.otsu, use_pre, use_post)?;
                    thresholds.push((tile.scene_id.clone(), seg.threshold));
                    by_scene.insert(tile.scene_id.clone(), seg.mask);
                }
                by_scene[&tile.scene_id].crop(tile.origin, tile.side(), tile.side())?
            }
            None => {
                let seg = otsu_segment(&tile.pixels, &cfg.otsu, use_pre, use_post)?;
                thresholds.push((tile.id(), seg.threshold));
                seg.mask
            }
        };
        predictions.push(mask);
    }
    let report = score(&predictions, &data.test, cfg.eval_batch_size)?;
    Ok(OtsuOutcome { predictions, thresholds, report })
}

/// Writes binary test predictions: one mosaic per held-out scene and one
/// raster per remaining tile.
pub fn write_prediction_rasters(dir: &Path, data: &Dataset, predictions: &[BinaryMask]) -> Result<Vec<PathBuf>> {
    type Parts = Vec<((usize, usize), BinaryMask)>;
    let mut groups: Vec<(String, Parts)> = Vec::new();
    let mut loose = Vec::new();
    for (tile, mask) in data.test.iter().zip(predictions) {
        match data.scene(&tile.scene_id).filter(|e| e.held_out) {
            Some(_) => match groups.iter_mut().find(|(id, _)| *id == tile.scene_id) {
                Some((_, parts)) => parts.push((tile.origin, mask.clone())),
                None => groups.push((tile.scene_id.clone(), vec![(tile.origin, mask.clone())])),
            },
            None => loose.push((tile, mask)),
        }
    }
    let mut written = Vec::new();
    for (id, parts) in groups {
        let entry = data.scene(&id).expect("grouped by known scene");
        let (rows, cols) = entry.scene.shape();
        let side = parts[0].1.rows();
        let mosaic = assemble(tiled_extent(rows, cols, side), &parts)?;
        let path = dir.join(format!("{}.tif", sanitize(&id)));
        geotiff::write_u8(&path, &mosaic, &entry.geo)?;
        written.push(path);
    }
    for (tile, mask) in loose {
        let geo = data.scene(&tile.scene_id).map(|e| e.geo.offset(tile.origin.0, tile.origin.1)).unwrap_or_default();
        let path = dir.join(format!("{}_r{}_c{}.tif", sanitize(&tile.scene_id), tile.origin.0, tile.origin.1));
        geotiff::write_u8(&path, mask, &geo)?;
        written.push(path);
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// How member runs are executed.
#[derive(Debug, Clone)]
pub enum Runner {
    InProcess,
    /// Each run is `exe train --config <run dir>/config.toml` in its own
    /// process, at most `jobs` at a time.
    Subprocess { exe: PathBuf, jobs: usize },
}

/// Runs each config (a single-seed config with its own output directory) and
/// returns results in input order.
pub fn run_all(configs: &[ExperimentConfig], data: &Dataset, runner: &Runner) -> Result<Vec<RunResult>> {
    match runner {
        Runner::InProcess => configs.iter().map(|c| train_run(c, data)).collect(),
        Runner::Subprocess { exe, jobs } => {
            let mut running: VecDeque<(Child, &ExperimentConfig)> = VecDeque::new();
            let mut failures = Vec::new();
            let wait = |child: Child, cfg: &ExperimentConfig, failures: &mut Vec<String>| -> Result<()> {
                let out = child.wait_with_output().map_err(io_err(&cfg.output_dir))?;
                if !out.status.success() {
                    failures.push(format!("{} ({}), see stderr.log", cfg.output_dir.display(), out.status));
                }
                Ok(())
            };
            for cfg in configs {
                if running.len() >= (*jobs).max(1) {
                    let (child, c) = running.pop_front().unwrap();
                    wait(child, c, &mut failures)?;
                }
                if !failures.is_empty() {
                    break;
                }
                let path = cfg.write_snapshot(&cfg.output_dir)?;
                let stderr_path = cfg.output_dir.join("stderr.log");
                let stderr = std::fs::File::create(&stderr_path).map_err(io_err(&stderr_path))?;
                let child = Command::new(exe)
                    .arg("train")
                    .arg("--config")
                    .arg(&path)
                    .env_remove(OUTPUT_DIR_ENV)
                    .stdout(Stdio::null())
                    .stderr(stderr)
                    .spawn()
                    .map_err(io_err(exe))?;
                running.push_back((child, cfg));
            }
            while let Some((child, c)) = running.pop_front() {
                wait(child, c, &mut failures)?;
            }
            if !failures.is_empty() {
                return Err(Error::Run(format!("member runs failed: {}", failures.join("; "))));
            }
            configs.iter().map(|c| load_run(&c.output_dir, data, c.eval_batch_size)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub dataset: String,
    pub fitting_set: String,
    pub members: Vec<RunSummary>,
    pub member_iou: Vec<f64>,
    pub member_stats: Option<RunStats>,
    pub median_member_iou: Option<f64>,
    pub ensemble: Option<EvalReport>,
}

impl EnsembleReport {
    pub fn table(&self) -> TextTable {
        let mut t = TextTable::new(
            format!("Ensemble of {} (assignment fitted on {})", self.members.len(), self.fitting_set),
            &["model", "seed", "test IOU"],
        );
        for m in &self.members {
            t.push(vec!["member".into(), m.seed.to_string(), m.test_iou().map_or("-".into(), |v| format!("{v:.4}"))]);
        }
        if let Some(s) = &self.member_stats {
            t.push(vec!["members".into(), "-".into(), mean_var(s)]);
        }
        t.push(vec![
            "ensemble".into(),
            "-".into(),
            self.ensemble.as_ref().map_or("-".into(), |e| format!("{:.4}", e.dataset_iou)),
        ]);
        t
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Trains `ensemble_size` members, votes their binary test masks pixelwise
/// and evaluates the vote.
pub fn run_ensemble(cfg: &ExperimentConfig, data: &Dataset, runner: &Runner) -> Result<EnsembleReport> {
    let dir = &cfg.output_dir;
    cfg.write_snapshot(dir)?;
    let configs: Vec<ExperimentConfig> = cfg
        .member_seeds()
        .iter()
        .enumerate()
        .map(|(k, &seed)| single_run_config(cfg, seed, &dir.join(format!("member-{k}"))))
        .collect();
    let results = run_all(&configs, data, runner)?;

    let mut ensemble = None;
    if let Some(preds) = results.iter().map(|r| r.predictions.as_ref()).collect::<Option<Vec<_>>>() {
        let voted = (0..data.test.len())
            .map(|i| majority_vote(&preds.iter().map(|p| p[i].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()?;
        write_prediction_rasters(&dir.join("ensemble"), data, &voted)?;
        ensemble = score(&voted, &data.test, cfg.eval_batch_size)?;
    }
    let member_iou: Vec<f64> = results.iter().filter_map(|r| r.summary.test_iou()).collect();
    let report = EnsembleReport {
        dataset: data.id.clone(),
        fitting_set: cfg.assignment_fit.name().into(),
        members: results.into_iter().map(|r| r.summary).collect(),
        member_stats: aggregate_runs(&member_iou).ok(),
        median_member_iou: median(&member_iou),
        member_iou,
        ensemble,
    };
    write_json(&dir.join("ensemble.json"), &report)?;
    if let Some(e) = &report.ensemble {
        write_json(&dir.join(EVAL_FILE), e)?;
    }
    report.table().write(&dir.join("ensemble.md"))?;
    Ok(report)
}

/// Configuration of repetition `r`: fresh synthetic data, split and member
/// seeds, all derived from the base values.
pub fn repetition_config(cfg: &ExperimentConfig, r: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    let r64 = r as u64;
    let m = cfg.ensemble_size as u64;
    c.seeds = cfg.member_seeds().iter().map(|s| s + r64 * m).collect();
    c.split.seed = cfg.split.seed + r64;
    if let crate::config::DataConfig::Synthetic(s) = &mut c.data {
        s.seed = s.seed.wrapping_add(r64);
    }
    c.output_dir = cfg.output_dir.join(format!("rep-{r}"));
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub ensemble_iou: f64,
    pub member_iou: Vec<f64>,
    pub median_member_iou: f64,
    pub otsu_iou: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub repetitions: Vec<Repetition>,
    pub ensemble: RunStats,
    /// Pooled over every member of every repetition.
    pub members: RunStats,
    pub otsu: RunStats,
    pub ensemble_at_least_median: usize,
}

impl StabilityReport {
    pub fn table(&self, ensemble_size: usize) -> TextTable {
        let mut t = TextTable::new(
            format!("Test IOU over {} repetitions (mean ± variance)", self.repetitions.len()),
            &["model", "IOU"],
        );
        t.push(vec![format!("ensemble (M={ensemble_size})"), mean_var(&self.ensemble)]);
        t.push(vec!["single model".into(), mean_var(&self.members)]);
        t.push(vec!["Otsu".into(), mean_var(&self.otsu)]);
        t
    }
}

/// Repeats the ensemble experiment with independent data and seeds, running
/// the Otsu baseline on each repetition's test tiles.
pub fn run_repetitions(cfg: &ExperimentConfig, repetitions: usize, runner: &Runner) -> Result<StabilityReport> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    cfg.write_snapshot(&cfg.output_dir)?;
    let mut reps = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let start = Instant::now();
        let rc = repetition_config(cfg, r);
        let data = Dataset::load(&rc)?;
        let ens = run_ensemble(&rc, &data, runner)?;
        let otsu = otsu_run(&rc, &data, true, true)?;
        let missing = || Error::Run(format!("repetition {r} has no test masks"));
        reps.push(Repetition {
            ensemble_iou: ens.ensemble.as_ref().ok_or_else(missing)?.dataset_iou,
            median_member_iou: ens.median_member_iou.ok_or_else(missing)?,
            member_iou: ens.member_iou,
            otsu_iou: otsu.report.ok_or_else(missing)?.dataset_iou,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let pooled: Vec<f64> = reps.iter().flat_map(|r| r.member_iou.iter().copied()).collect();
    let report = StabilityReport {
        ensemble: aggregate_runs(&reps.iter().map(|r| r.ensemble_iou).collect::<Vec<_>>())?,
        members: aggregate_runs(&pooled)?,
        otsu: aggregate_runs(&reps.iter().map(|r| r.otsu_iou).collect::<Vec<_>>())?,
        ensemble_at_least_median: reps.iter().filter(|r| r.ensemble_iou >= r.median_member_iou).count(),
        repetitions: reps,
    };
    write_json(&cfg.output_dir.join("stability.json"), &report)?;
    report.table(cfg.ensemble_size).write(&cfg.output_dir.join("stability.md"))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    ClusteringLossType,
    NClass,
    BatchSize,
    Channels,
    Depth,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::ClusteringLossType,
        AblationAxis::NClass,
        AblationAxis::BatchSize,
        AblationAxis::Channels,
        AblationAxis::Depth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::ClusteringLossType => "clustering_loss_type",
            AblationAxis::NClass => "n_class",
            AblationAxis::BatchSize => "batch_size",
            AblationAxis::Channels => "channels",
            AblationAxis::Depth => "depth",
        }
    }

    /// Configuration key the axis overrides.
    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::ClusteringLossType => "loss.clustering",
            AblationAxis::NClass => "n_class",
            AblationAxis::BatchSize => "batch_size",
            AblationAxis::Channels => "model.base_channels",
            AblationAxis::Depth => "model.depth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }

    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let literal = match self {
            AblationAxis::ClusteringLossType => format!("\"{value}\""),
            _ => value
                .parse::<usize>()
                .map(|v| v.to_string())
                .map_err(|_| Error::Config(format!("{} expects an integer, got `{value}`", self.name())))?,
        };
        cfg.with_overrides(&[format!("{}={literal}", self.key())])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub encoder_parameters: usize,
    pub test_iou: Vec<f64>,
    pub stats: RunStats,
}

/// `repeats` single-model runs per axis value; seeds are shared across values
/// so each repeat index forms a paired comparison.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &Dataset,
    axis: AblationAxis,
    values: &[String],
    repeats: usize,
    runner: &Runner,
) -> Result<(Vec<AblationRow>, TextTable)> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("no ablation values".into()));
    }
    let cells = values.iter().map(|v| axis.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let seeds = ExperimentConfig { ensemble_size: repeats, ..cfg.clone() }.member_seeds();
    cfg.write_snapshot(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for (value, cell) in values.iter().zip(&cells) {
        let cell_dir = cfg.output_dir.join(format!("{}-{}", axis.name(), sanitize(value)));
        let runs: Vec<ExperimentConfig> = seeds
            .iter()
            .enumerate()
            .map(|(r, &s)| single_run_config(cell, s, &cell_dir.join(format!("run-{r}"))))
            .collect();
        let results = run_all(&runs, data, runner)?;
        let ious: Vec<f64> = results
            .iter()
            .map(|r| r.summary.test_iou().ok_or_else(|| Error::Run("ablation needs test masks".into())))
            .collect::<Result<_>>()?;
        rows.push(AblationRow {
            value: value.clone(),
            encoder_parameters: encoder_parameters(cell)?,
            stats: aggregate_runs(&ious)?,
            test_iou: ious,
        });
    }
    let mut table = TextTable::new(
        format!("Effect of {} ({} runs per value, mean ± variance)", axis.name(), repeats),
        &[axis.name(), "encoder parameters", "test IOU"],
    );
    for r in &rows {
        table.push(vec![r.value.clone(), r.encoder_parameters.to_string(), mean_var(&r.stats)]);
    }
    write_json(&cfg.output_dir.join("ablation.json"), &rows)?;
    table.write(&cfg.output_dir.join("ablation.md"))?;
    Ok((rows, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, SyntheticData};
    use hydroseg_core::raster::SynthSpec;

    pub(crate) fn tiny(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: dir.to_path_buf(),
            tile_size: 16,
            data: DataConfig::Synthetic(SyntheticData {
                train_scenes: 2,
                test_scenes: 1,
                seed: 1,
                scene: SynthSpec { rows: 32, cols: 64, blob_radius: 8.0, ..SynthSpec::default() },
            }),
            model: hydroseg_core::model::UNetConfig { depth: 1, base_channels: 4, ..Default::default() },
            n_class: 4,
            epochs: 2,
            batch_size: 4,
            eval_batch_size: 4,
            ensemble_size: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn single_run_writes_its_records() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let data = Dataset::load(&cfg).unwrap();
        let run = train_run(&cfg, &data).unwrap();
        for f in [CONFIG_FILE, LOG_FILE, CHECKPOINT_FILE, ASSIGNMENT_FILE, SUMMARY_FILE, EVAL_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let records = crate::logs::read_log(&dir.path().join(LOG_FILE)).unwrap();
        let evals = records.iter().filter(|r| matches!(r, LogRecord::Evaluation(_))).count();
        assert_eq!(evals, 2);
        let reloaded = load_run(dir.path(), &data, 4).unwrap();
        assert_eq!(reloaded.predictions, run.predictions);
        assert_eq!(reloaded.summary, run.summary);
        let iou = run.summary.test_iou().unwrap();
        assert!((0.0..=1.0).contains(&iou));
    }

    #[test]
    fn identical_seeds_give_identical_members_and_ensemble() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.seeds = vec![7, 7, 7];
        let data = Dataset::load(&cfg).unwrap();
        let rep = run_ensemble(&cfg, &data, &Runner::InProcess).unwrap();
        assert_eq!(rep.member_iou.len(), 3);
        assert!(rep.member_iou.iter().all(|&v| v == rep.member_iou[0]));
        assert_eq!(rep.ensemble.unwrap().dataset_iou, rep.member_iou[0]);
        assert_eq!(rep.member_stats.unwrap().variance, 0.0);
        assert!(dir.path().join("ensemble/test-0.tif").is_file());
    }

    #[test]
    fn one_member_ensemble_is_that_member() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.ensemble_size = 1;
        let data = Dataset::load(&cfg).unwrap();
        let rep = run_ensemble(&cfg, &data, &Runner::InProcess).unwrap();
        assert_eq!(rep.ensemble.unwrap().dataset_iou, rep.member_iou[0]);
    }

    #[test]
    fn validation_fitting_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.assignment_fit = FitSet::Validation;
        cfg.epochs = 1;
        let data = Dataset::load(&cfg).unwrap();
        let run = train_run(&cfg, &data).unwrap();
        assert_eq!(run.summary.fitting_set.as_deref(), Some("validation"));
        let rec: AssignmentRecord = read_json(&dir.path().join(ASSIGNMENT_FILE)).unwrap();
        assert_eq!(rec.fitting_set, "validation");
        assert_eq!(rec.checkpoint_id, run.summary.checkpoint_id);
        assert_eq!(rec.mapping.len(), 4);
    }

    #[test]
    fn ablation_with_one_repeat_has_zero_variance() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.epochs = 1;
        let data = Dataset::load(&cfg).unwrap();
        let values = vec!["uniform".to_string(), "weighted".to_string()];
        let (rows, table) =
            run_ablation(&cfg, &data, AblationAxis::ClusteringLossType, &values, 1, &Runner::InProcess).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.stats.variance == 0.0 && r.stats.n == 1));
        assert_eq!(table.rows.len(), 2);
        assert!(dir.path().join("ablation.md").is_file());
        assert!(AblationAxis::NClass.apply(&cfg, "1").is_err());
        assert!(AblationAxis::Depth.apply(&cfg, "deep").is_err());
        assert!(AblationAxis::ClusteringLossType.apply(&cfg, "focal").is_err());
        assert!(AblationAxis::parse("width").is_err());
    }

    #[test]
    fn otsu_crops_scene_segmentations() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let data = Dataset::load(&cfg).unwrap();
        let out = otsu_run(&cfg, &data, true, true).unwrap();
        assert_eq!(out.predictions.len(), data.test.len());
        assert_eq!(out.thresholds.len(), 1);
        assert!(out.report.unwrap().dataset_iou > 0.5);
    }

    #[test]
    fn median_of_even_and_odd_lists() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}

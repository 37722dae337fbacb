//! The `hydroseg` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hydroseg_core::metrics::{evaluate_dataset, IOU_EPSILON};
use hydroseg_core::otsu::otsu_segment;
use hydroseg_core::postprocess::apply_assignment;
use hydroseg_core::raster::{tile_scene, ScalingSpec, Tile};
use hydroseg_core::trainer::{infer_scene, predict_supervised};
use hydroseg_core::{BinaryMask, Grid};

use crate::checkpoint::{self, LoadedModel};
use crate::config::{DataConfig, ExperimentConfig, SceneSource, JOBS_ENV, OUTPUT_DIR_ENV};
use crate::data::{masks, Dataset};
use crate::error::{io_err, Error, Result};
use crate::experiment::{self, AblationAxis, AssignmentRecord, Runner};
use crate::geotiff::{self, GeoInfo};
use crate::manifest::{write_tiles, SplitName};
use crate::report::{collect_runs, render_report, TextTable};

#[derive(Debug, Parser)]
#[command(name = "hydroseg", version, about = "Self-supervised water segmentation of radar images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

/// Configuration source shared by the experiment commands. Each flag
/// overrides exactly one configuration key.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override any key, e.g. `--set optimizer.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// output_dir
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,
    /// epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// n_class
    #[arg(long)]
    pub n_class: Option<usize>,
    /// seeds, as a single seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// ensemble_size
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    /// tile_size
    #[arg(long)]
    pub tile_size: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut sets = Vec::new();
        let mut flag = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{key}={v}"));
            }
        };
        flag("epochs", self.epochs.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("n_class", self.n_class.map(|v| v.to_string()));
        flag("seeds", self.seed.map(|v| format!("[{v}]")));
        flag("ensemble_size", self.ensemble_size.map(|v| v.to_string()));
        flag("tile_size", self.tile_size.map(|v| v.to_string()));
        flag("output_dir", self.output_dir.as_ref().map(|p| toml_string(&p.to_string_lossy())));
        sets.extend(self.overrides.iter().cloned());
        base.with_overrides(&sets)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_owned()).to_string()
}

#[derive(Debug, Clone, Args)]
pub struct RunnerArgs {
    /// Train members inside this process instead of one process each.
    #[arg(long)]
    pub in_process: bool,
    /// Concurrent member processes.
    #[arg(long, env = JOBS_ENV, default_value_t = 1)]
    pub jobs: usize,
}

impl RunnerArgs {
    fn runner(&self) -> Result<Runner> {
        if self.in_process {
            return Ok(Runner::InProcess);
        }
        let exe = std::env::current_exe().map_err(io_err("current executable"))?;
        Ok(Runner::Subprocess { exe, jobs: self.jobs.max(1) })
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write the configured scenes as tiles plus a manifest.
    Tile {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Destination directory; defaults to <output_dir>/tiles.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the configured synthetic scenes as GeoTIFF rasters.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one self-supervised model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the Dice-loss supervised baseline.
    TrainSupervised {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// supervised_fraction
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Segment rasters with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input rasters. Repeatable.
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Assignment record turning model classes into a water mask.
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        tile_size: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// `min-max`, or a fixed window `LOW:HIGH` (default -30:0).
        #[arg(long, default_value = "-30:0", allow_hyphen_values = true)]
        scaling: String,
    },
    /// Score predictions against ground truth, or a checkpoint on the
    /// configured test set.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate on the configured data.
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        checkpoint: Option<PathBuf>,
        /// Predicted {0,1} rasters, paired in order with --gt.
        #[arg(long)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        gt: Vec<PathBuf>,
        /// Where to write the report; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Otsu thresholding baseline.
    Otsu {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Rasters to segment instead of the configured test set. Repeatable.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Ground-truth masks paired with --image.
        #[arg(long = "mask")]
        masks: Vec<PathBuf>,
        /// Skip the Gaussian blur.
        #[arg(long)]
        no_pre: bool,
        /// Skip opening and closing.
        #[arg(long)]
        no_post: bool,
    },
    /// Train an ensemble and majority-vote its members.
    Ensemble {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        runner: RunnerArgs,
        /// Repeat the whole experiment with fresh data and seeds.
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
    },
    /// Sweep one hyperparameter with repeated single-model runs.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        runner: RunnerArgs,
        /// clustering_loss_type, n_class, batch_size, channels or depth.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Plot curves and tabulate results from run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Tile { cfg, out } => cmd_tile(&cfg.resolve()?, out),
        Cmd::Synth { cfg, out } => cmd_synth(&cfg.resolve()?, &out),
        Cmd::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let data = Dataset::load(&cfg)?;
            let r = experiment::train_run(&cfg, &data)?;
            println!(
                "trained seed {} for {} epochs; test IOU {}; outputs in {}",
                r.summary.seed,
                r.summary.epochs,
                fmt_opt(r.summary.test_iou()),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Cmd::TrainSupervised { cfg, fraction } => {
            let mut cfg = cfg.resolve()?;
            if let Some(f) = fraction {
                cfg = cfg.with_overrides(&[format!("supervised_fraction={f}")])?;
            }
            let data = Dataset::load(&cfg)?;
            let r = experiment::supervised_run(&cfg, &data)?;
            println!("supervised test IOU {}; outputs in {}", fmt_opt(r.summary.test_iou()), cfg.output_dir.display());
            Ok(())
        }
        Cmd::Infer { checkpoint, images, assignment, out, tile_size, batch_size, scaling } => {
            cmd_infer(&checkpoint, &images, assignment.as_deref(), &out, tile_size, batch_size, &scaling)
        }
        Cmd::Evaluate { cfg, checkpoint, pred, gt, out } => cmd_evaluate(&cfg, checkpoint, &pred, &gt, out),
        Cmd::Otsu { cfg, images, masks, no_pre, no_post } => cmd_otsu(&cfg.resolve()?, &images, &masks, !no_pre, !no_post),
        Cmd::Ensemble { cfg, runner, repetitions } => {
            let cfg = cfg.resolve()?;
            let runner = runner.runner()?;
            if repetitions > 1 {
                let rep = experiment::run_repetitions(&cfg, repetitions, &runner)?;
                print!("{}", rep.table(cfg.ensemble_size).render());
            } else {
                let data = Dataset::load(&cfg)?;
                print!("{}", experiment::run_ensemble(&cfg, &data, &runner)?.table().render());
            }
            Ok(())
        }
        Cmd::Ablation { cfg, runner, axis, values, repeats } => {
            let cfg = cfg.resolve()?;
            let axis = AblationAxis::parse(&axis)?;
            let data = Dataset::load(&cfg)?;
            let (_, table) = experiment::run_ablation(&cfg, &data, axis, &values, repeats, &runner.runner()?)?;
            print!("{}", table.render());
            Ok(())
        }
        Cmd::Report { runs, out } => {
            let logs = collect_runs(&runs)?;
            let files = render_report(&logs, &out)?;
            for p in files.plots.iter().chain(std::iter::once(&files.table)) {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn cmd_tile(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let data = Dataset::load(cfg)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("tiles"));
    let mut labelled: Vec<(&Tile, SplitName)> = Vec::new();
    for (list, name) in [
        (&data.split.train, SplitName::Train),
        (&data.split.validation, SplitName::Validation),
        (&data.split.test, SplitName::Test),
    ] {
        let mut idx = list.clone();
        idx.sort_unstable();
        labelled.extend(idx.iter().map(|&i| (&data.tiles[i], name)));
    }
    let held_out = data.test.len() - data.split.test.len();
    labelled.extend(data.test[..held_out].iter().map(|t| (t, SplitName::Test)));
    let recs = write_tiles(&out, &labelled, &|id| data.scene(id).map(|e| e.geo.clone()))?;
    cfg.write_snapshot(&out)?;
    println!("{} tiles written to {}", recs.len(), out.display());
    Ok(())
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let DataConfig::Synthetic(_) = &cfg.data else {
        return Err(Error::Config("synth needs a synthetic data section".into()));
    };
    let data = Dataset::load(cfg)?;
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for e in &data.scenes {
        let s = &e.scene;
        let geo = GeoInfo {
            pixel_scale: Some(vec![s.pixel_size_m, s.pixel_size_m, 0.0]),
            tiepoints: Some(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ..GeoInfo::default()
        };
        let image = out.join(format!("{}.tif", s.scene_id));
        let mask = out.join(format!("{}_mask.tif", s.scene_id));
        // Stored in dB so the default fixed-range scaling maps it back.
        geotiff::write_f32(&image, &s.pixels.map(|p| p * 30.0 - 30.0), &geo)?;
        geotiff::write_u8(&mask, s.mask.as_ref().expect("synthetic scenes have masks"), &geo)?;
        let src = SceneSource { image, mask: Some(mask), id: Some(s.scene_id.clone()), date: None };
        if e.held_out { test.push(src) } else { pool.push(src) }
    }
    let data_cfg = ExperimentConfig {
        data: DataConfig::Rasters {
            scenes: pool,
            test_scenes: test,
            scaling: ScalingSpec::default(),
            exclude_months: Vec::new(),
        },
        ..cfg.clone()
    };
    let path = out.join("rasters.toml");
    std::fs::write(&path, data_cfg.to_toml()?).map_err(io_err(&path))?;
    println!("{} scenes written to {}; config for them: {}", data.scenes.len(), out.display(), path.display());
    Ok(())
}

fn parse_scaling(s: &str) -> Result<ScalingSpec> {
    if s == "min-max" || s == "minmax" {
        return Ok(ScalingSpec::MinMax);
    }
    let bad = || Error::Config(format!("scaling `{s}` is neither min-max nor LOW:HIGH"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let low: f64 = lo.trim().parse().map_err(|_| bad())?;
    let high: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(high > low) {
        return Err(bad());
    }
    Ok(ScalingSpec::FixedRange { low, high })
}

fn cmd_infer(
    checkpoint: &Path,
    images: &[PathBuf],
    assignment: Option<&Path>,
    out: &Path,
    tile_size: usize,
    batch_size: usize,
    scaling: &str,
) -> Result<()> {
    let scaling = parse_scaling(scaling)?;
    let ck = checkpoint::load(checkpoint)?;
    let record: Option<AssignmentRecord> = assignment.map(experiment::read_json).transpose()?;
    if let Some(r) = &record {
        if r.checkpoint_id != ck.id {
            eprintln!("warning: assignment was fitted for checkpoint {}, not {}", r.checkpoint_id, ck.id);
        }
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    for image in images {
        let loaded = geotiff::load_scene(image, None, scaling, None)?;
        let stem = loaded.scene.scene_id.clone();
        match &ck.model {
            LoadedModel::SelfSupervised(model) => {
                let classes = infer_scene(model, &loaded.scene, tile_size, batch_size)?;
                geotiff::write_u16(&out.join(format!("{stem}_classes.tif")), &classes, &loaded.geo)?;
                if let Some(r) = &record {
                    let water = apply_assignment(&classes, &r.assignment())?;
                    geotiff::write_u8(&out.join(format!("{stem}_water.tif")), &water, &loaded.geo)?;
                }
            }
            LoadedModel::Supervised(model) => {
                ck.header.model.check_tile_side(tile_size)?;
                let tiles = tile_scene(&loaded.scene, tile_size)?;
                let px: Vec<Grid<f32>> = tiles.iter().map(|t| t.pixels.clone()).collect();
                let pred = if px.is_empty() { Vec::new() } else { predict_supervised(model, &px, batch_size)? };
                let parts: Vec<_> = tiles.iter().map(|t| t.origin).zip(pred).collect();
                let (rows, cols) = loaded.scene.shape();
                let water = hydroseg_core::raster::assemble(
                    hydroseg_core::raster::tiled_extent(rows, cols, tile_size),
                    &parts,
                )?;
                geotiff::write_u8(&out.join(format!("{stem}_water.tif")), &water, &loaded.geo)?;
            }
        }
        println!("{} segmented", image.display());
    }
    Ok(())
}

fn cmd_evaluate(
    args: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    pred: &[PathBuf],
    gt: &[PathBuf],
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = args.resolve()?;
    let report = match checkpoint {
        Some(path) => {
            let data = Dataset::load(&cfg)?;
            let ck = checkpoint::load(&path)?;
            match ck.model {
                LoadedModel::SelfSupervised(model) => {
                    experiment::evaluate_model(&model, &data, cfg.assignment_fit, cfg.eval_batch_size)?
                        .and_then(|e| e.report)
                        .ok_or_else(|| Error::Run("the configured data has no test masks".into()))?
                }
                LoadedModel::Supervised(model) => {
                    let px: Vec<Grid<f32>> = data.test.iter().map(|t| t.pixels.clone()).collect();
                    let p = predict_supervised(&model, &px, cfg.eval_batch_size)?;
                    evaluate_dataset(&p, &masks(&data.test, "test")?, cfg.eval_batch_size, IOU_EPSILON)?
                }
            }
        }
        None => {
            if pred.is_empty() || pred.len() != gt.len() {
                return Err(Error::Config("give matching --pred and --gt lists, or --checkpoint".into()));
            }
            let mut p_tiles: Vec<BinaryMask> = Vec::new();
            let mut g_tiles: Vec<BinaryMask> = Vec::new();
            for (p, g) in pred.iter().zip(gt) {
                let (pm, _) = geotiff::read_mask(p)?;
                let (gm, _) = geotiff::read_mask(g)?;
                // Predictions may cover only the tiled region of the truth.
                let (rows, cols) = pm.shape();
                if rows > gm.rows() || cols > gm.cols() {
                    return Err(crate::error::format_err(p, "prediction is larger than its ground truth"));
                }
                let gm = gm.crop((0, 0), rows, cols)?;
                let side = cfg.tile_size;
                for r in 0..rows / side {
                    for c in 0..cols / side {
                        p_tiles.push(pm.crop((r * side, c * side), side, side)?);
                        g_tiles.push(gm.crop((r * side, c * side), side, side)?);
                    }
                }
            }
            if p_tiles.is_empty() {
                return Err(Error::Run(format!("rasters hold no {0}x{0} tiles", cfg.tile_size)));
            }
            evaluate_dataset(&p_tiles, &g_tiles, cfg.eval_batch_size, IOU_EPSILON)?
        }
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match out {
        Some(path) => std::fs::write(&path, &text).map_err(io_err(&path))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_otsu(cfg: &ExperimentConfig, images: &[PathBuf], mask_paths: &[PathBuf], pre: bool, post: bool) -> Result<()> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    cfg.write_snapshot(out)?;
    let mut table = TextTable::new(
        format!("Otsu (pre-processing {}, post-processing {})", on_off(pre), on_off(post)),
        &["scene", "threshold", "IOU"],
    );
    if images.is_empty() {
        let data = Dataset::load(cfg)?;
        let res = experiment::otsu_run(cfg, &data, pre, post)?;
        experiment::write_prediction_rasters(&out.join("otsu"), &data, &res.predictions)?;
        for (id, t) in &res.thresholds {
            table.push(vec![id.clone(), format!("{:.4}", t.value), "-".into()]);
        }
        table.push(vec!["test set".into(), "-".into(), fmt_opt(res.report.as_ref().map(|r| r.dataset_iou))]);
        if let Some(r) = &res.report {
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(r)? + "\n").map_err(io_err(out))?;
        }
    } else {
        if !mask_paths.is_empty() && mask_paths.len() != images.len() {
            return Err(Error::Config("--mask must be given once per --image, or not at all".into()));
        }
        let scaling = match &cfg.data {
            DataConfig::Rasters { scaling, .. } => *scaling,
            _ => ScalingSpec::default(),
        };
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (i, image) in images.iter().enumerate() {
            let loaded = geotiff::load_scene(image, mask_paths.get(i).map(PathBuf::as_path), scaling, None)?;
            let seg = otsu_segment(&loaded.scene.pixels, &cfg.otsu, pre, post)?;
            let id = loaded.scene.scene_id.clone();
            geotiff::write_u8(&out.join(format!("{id}_water.tif")), &seg.mask, &loaded.geo)?;
            let mut iou = "-".to_string();
            if loaded.scene.mask.is_some() {
                let tiles = tile_scene(&loaded.scene, cfg.tile_size)?;
                let p: Vec<BinaryMask> = tiles
                    .iter()
                    .map(|t| seg.mask.crop(t.origin, t.side(), t.side()))
                    .collect::<Result<_, _>>()?;
                let g: Vec<BinaryMask> = tiles.iter().map(|t| t.mask.clone().unwrap()).collect();
                if !p.is_empty() {
                    iou = format!("{:.4}", evaluate_dataset(&p, &g, cfg.eval_batch_size, IOU_EPSILON)?.dataset_iou);
                }
                preds.extend(p);
                gts.extend(g);
            }
            table.push(vec![id, format!("{:.4}", seg.threshold.value), iou]);
        }
        if !preds.is_empty() {
            let r = evaluate_dataset(&preds, &gts, cfg.eval_batch_size, IOU_EPSILON)?;
            table.push(vec!["all".into(), "-".into(), format!("{:.4}", r.dataset_iou)]);
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&r)? + "\n").map_err(io_err(out))?;
        }
    }
    table.write(&out.join("otsu.md"))?;
    print!("{}", table.render());
    Ok(())
}

fn on_off(b: bool) -> &'static str {
    if b { "on" } else { "off" }
}

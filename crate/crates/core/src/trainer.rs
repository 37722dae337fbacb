//! Training loops for the self-supervised model and the supervised baseline,
//! plus tiled inference.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_triplet, AugmentSpec, TileBatch};
use crate::error::{bail, Result};
use crate::grid::{BinaryMask, ClassMap, Grid};
use crate::losses::{dice_loss_and_grad, softmax, total_loss_and_grad, LossWeights};
use crate::metrics::{evaluate_dataset, EvalReport, IOU_EPSILON};
use crate::model::{Module, PredictionHead, SupervisedModel, UNetConfig, UNetEncoder};
use crate::nn::Tensor;
use crate::optim::{AdamW, OptimizerSpec, Schedule, ScheduleSpec};
use crate::postprocess::{apply_assignment, fit_assignment, ClassAssignment};
use crate::raster::{assemble, tile_scene, tiled_extent, DatasetSplit, Scene, Tile};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: UNetConfig,
    pub n_class: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleSpec,
    pub augment: AugmentSpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batch size for validation IOU.
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            n_class: 10,
            weights: LossWeights::default(),
            optimizer: OptimizerSpec::default(),
            schedule: ScheduleSpec::default(),
            augment: AugmentSpec::default(),
            epochs: 100,
            batch_size: 16,
            eval_batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: u64,
    pub lr: f64,
    pub l_c: f64,
    pub l_c_hat: f64,
    pub l_p: f64,
    pub l_n: f64,
    pub total: f64,
    /// Distinct pseudo-labels in the standard branch.
    pub occupied_classes: usize,
    pub class_histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_occupied_classes: f64,
    pub val_iou: Option<f64>,
    pub val_global_iou: Option<f64>,
}

/// Held-out evaluation after an epoch, written by callers that own a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub set: String,
    /// Tiles the class assignment was fitted on.
    pub fitting_set: String,
    pub dataset_iou: f64,
    pub global_iou: f64,
}

/// One line of a metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    SupervisedStep { epoch: usize, step: usize, global_step: u64, lr: f64, dice: f64 },
    Evaluation(EvalRecord),
}

/// The inference path: encoder plus prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub encoder: UNetEncoder<f32>,
    pub head: PredictionHead<f32>,
}

impl SegmentationModel {
    pub fn new(config: UNetConfig, n_class: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: UNetEncoder::new(config, derive_seed(seed, &[1]))?,
            head: PredictionHead::new(config.encoding_channels(), n_class, derive_seed(seed, &[3]))?,
        })
    }

    pub fn n_class(&self) -> usize {
        self.head.n_class()
    }

    /// Evaluation-mode logits for `N x 1 x S x S` input.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.head.forward_eval(&self.encoder.forward_eval(x)?))
    }

    /// Per-pixel argmax classes for each tile.
    pub fn predict_classes(&self, tiles: &[Grid<f32>], batch_size: usize) -> Result<Vec<ClassMap>> {
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(batch_size.max(1)) {
            let x = stack(chunk)?;
            let z = self.logits(&x)?;
            out.extend(argmax_maps(&z));
        }
        Ok(out)
    }
}

impl Module<f32> for SegmentationModel {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.encoder.for_each_param(f);
        self.head.for_each_param(f);
    }

    fn for_each_state(&self, prefix: &str, f: &mut dyn FnMut(&str, crate::model::StateKind, &[f32])) {
        self.encoder.for_each_state(&alloc::format!("{prefix}encoder."), f);
        self.head.for_each_state(&alloc::format!("{prefix}head."), f);
    }

    fn for_each_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, crate::model::StateKind, &mut [f32])) {
        self.encoder.for_each_state_mut(&alloc::format!("{prefix}encoder."), f);
        self.head.for_each_state_mut(&alloc::format!("{prefix}head."), f);
    }

    fn layers(&self) -> Vec<crate::model::LayerKind> {
        let mut l = self.encoder.layers();
        l.extend(self.head.layers());
        l
    }
}

/// Stacks equally sized tiles into an `N x 1 x S x S` tensor.
pub fn stack(tiles: &[Grid<f32>]) -> Result<Tensor<f32>> {
    let Some(first) = tiles.first() else {
        bail!(Empty, "no tiles to stack");
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(tiles.len() * h * w);
    for t in tiles {
        if t.shape() != (h, w) {
            bail!(ShapeMismatch, "tile shapes {:?} and {:?} differ", (h, w), t.shape());
        }
        data.extend_from_slice(t.as_slice());
    }
    Tensor::from_vec(tiles.len(), 1, h, w, data)
}

/// Lowest-index argmax over the class axis.
pub fn argmax_maps(logits: &Tensor<f32>) -> Vec<ClassMap> {
    let plane = logits.plane_len();
    (0..logits.n)
        .map(|s| {
            let z = logits.sample(s);
            let labels = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..logits.c {
                        if z[c * plane + i] > z[best * plane + i] {
                            best = c;
                        }
                    }
                    best as u16
                })
                .collect();
            Grid::from_vec(logits.h, logits.w, labels).expect("plane sized")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_iou: f64,
    pub model: SegmentationModel,
}

/// Everything the self-supervised loop carries between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: SegmentationModel,
    /// Encoder of the augmented branches; discarded after training.
    pub aug_encoder: UNetEncoder<f32>,
    pub optimizer: AdamW<f32>,
    pub schedule: Option<Schedule>,
    pub epochs_done: usize,
    pub global_step: u64,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.weights.validate()?;
        config.augment.validate()?;
        if config.batch_size < 2 {
            bail!(InvalidArgument, "batch size must be >= 2 to form negative pairs");
        }
        let model = SegmentationModel::new(config.model, config.n_class, config.seed)?;
        let aug_encoder = UNetEncoder::new(config.model, derive_seed(config.seed, &[2]))?;
        let optimizer = AdamW::new(config.optimizer)?;
        Ok(Self {
            config,
            model,
            aug_encoder,
            optimizer,
            schedule: None,
            epochs_done: 0,
            global_step: 0,
            best: None,
        })
    }
}

fn check_tiles(tiles: &[Tile], indices: &[usize], model: &UNetConfig) -> Result<()> {
    for &i in indices {
        let Some(t) = tiles.get(i) else {
            bail!(OutOfRange, "tile index {i} outside 0..{}", tiles.len());
        };
        if t.pixels.rows() != t.pixels.cols() {
            bail!(ShapeMismatch, "tile {} is not square", t.id());
        }
        model.check_tile_side(t.side())?;
    }
    Ok(())
}

/// Validation IOU after fitting the class assignment on the same tiles.
/// `None` when any validation tile lacks a mask.
pub fn validation_iou(
    model: &SegmentationModel,
    tiles: &[&Tile],
    batch_size: usize,
) -> Result<Option<(EvalReport, ClassAssignment)>> {
    if tiles.is_empty() || tiles.iter().any(|t| t.mask.is_none()) {
        return Ok(None);
    }
    let pixels: Vec<Grid<f32>> = tiles.iter().map(|t| t.pixels.clone()).collect();
    let gt: Vec<BinaryMask> = tiles.iter().map(|t| t.mask.clone().unwrap()).collect();
    let classes = model.predict_classes(&pixels, batch_size)?;
    let assignment = fit_assignment(&classes, &gt, model.n_class(), IOU_EPSILON)?;
    let pred = classes
        .iter()
        .map(|c| apply_assignment(c, &assignment))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some((evaluate_dataset(&pred, &gt, batch_size, IOU_EPSILON)?, assignment)))
}

/// Runs one epoch-sized slice of the three-branch loop. Exposed so callers can
/// checkpoint between epochs; [`train_self_supervised`] loops over it.
pub fn train_epoch(
    state: &mut TrainState,
    tiles: &[Tile],
    split: &DatasetSplit,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<EpochRecord> {
    let cfg = state.config.clone();
    let batches = split.train.len() / cfg.batch_size;
    if batches == 0 {
        bail!(
            InvalidArgument,
            "{} training tiles cannot fill one batch of {}",
            split.train.len(),
            cfg.batch_size
        );
    }
    let schedule = match state.schedule {
        Some(s) => s,
        None => {
            let s = cfg.schedule.resolve(&cfg.optimizer, batches as u64)?;
            state.schedule = Some(s);
            s
        }
    };
    let epoch = state.epochs_done;
    let mut order = split.train.clone();
    order.shuffle(&mut rng_from(cfg.seed, &[4, epoch as u64]));

    let mut loss_sum = 0.0;
    let mut occupied_sum = 0usize;
    for step in 0..batches {
        let members: Vec<&Tile> = order[step * cfg.batch_size..(step + 1) * cfg.batch_size]
            .iter()
            .map(|&i| &tiles[i])
            .collect();
        let batch = TileBatch::from_tiles(&members)?;
        let triplet = make_triplet(
            &batch,
            derive_seed(cfg.seed, &[5, epoch as u64, step as u64]),
            &cfg.augment,
        )?;
        let x_std = stack(&triplet.standard.pixels)?;
        let x_aug = stack(&triplet.augmented.pixels)?;

        let (e_std, tape_std) = state.model.encoder.forward_train(&x_std)?;
        let (z_std, head_std) = state.model.head.forward_train(&e_std);
        let (e_aug, tape_aug) = state.aug_encoder.forward_train(&x_aug)?;
        let (z_aug, head_aug) = state.model.head.forward_train(&e_aug);
        // Training-mode batch norm ignores sample order, so the shuffled branch
        // is the augmented output reordered.
        let z_shuf = z_aug.gather_samples(&triplet.permutation);

        let out = total_loss_and_grad(
            &z_std.map_scalar::<f64>(),
            &z_aug.map_scalar::<f64>(),
            &z_shuf.map_scalar::<f64>(),
            &cfg.weights,
        )?;
        if !out.report.total.is_finite() {
            bail!(InvalidState, "loss diverged at epoch {epoch}, step {step}");
        }
        let [g_std, g_aug, g_shuf] = &out.grads;
        let mut g_aug = g_aug.map_scalar::<f32>();
        let g_shuf = g_shuf.map_scalar::<f32>();
        for (k, &src) in triplet.permutation.iter().enumerate() {
            for (a, &b) in g_aug.sample_mut(src).iter_mut().zip(g_shuf.sample(k)) {
                *a += b;
            }
        }

        state.model.zero_grad();
        state.aug_encoder.zero_grad();
        let ge = state.model.head.backward(&head_std, &g_std.map_scalar::<f32>());
        state.model.encoder.backward(&tape_std, ge);
        let ge = state.model.head.backward(&head_aug, &g_aug);
        state.aug_encoder.backward(&tape_aug, ge);
        state.model.head.norm.update_running(head_aug.norm_cache());

        let lr = schedule.lr_at(schedule.clock(state.global_step, batches as u64));
        let TrainState { model, aug_encoder, optimizer, .. } = state;
        let SegmentationModel { encoder, head } = model;
        optimizer.step(&mut [encoder, aug_encoder, head], lr);

        let r = out.report;
        let occupied = r.occupied_classes();
        loss_sum += r.total;
        occupied_sum += occupied;
        log(&LogRecord::Step(StepRecord {
            epoch,
            step,
            global_step: state.global_step,
            lr,
            l_c: r.l_c,
            l_c_hat: r.l_c_hat,
            l_p: r.l_p,
            l_n: r.l_n,
            total: r.total,
            occupied_classes: occupied,
            class_histogram: r.class_histogram,
        }));
        state.global_step += 1;
    }

    let val_tiles: Vec<&Tile> = split.validation.iter().map(|&i| &tiles[i]).collect();
    let val = validation_iou(&state.model, &val_tiles, cfg.eval_batch_size)?;
    let record = EpochRecord {
        epoch,
        steps: batches,
        mean_loss: loss_sum / batches as f64,
        mean_occupied_classes: occupied_sum as f64 / batches as f64,
        val_iou: val.as_ref().map(|v| v.0.dataset_iou),
        val_global_iou: val.as_ref().map(|v| v.0.global_iou),
    };
    if let Some(v) = record.val_iou {
        if state.best.as_ref().is_none_or(|b| v > b.val_iou) {
            state.best = Some(BestSnapshot { epoch, val_iou: v, model: state.model.clone() });
        }
    }
    state.epochs_done += 1;
    log(&LogRecord::Epoch(record.clone()));
    Ok(record)
}

/// Full self-supervised training; deterministic given the configuration.
pub fn train_self_supervised(
    tiles: &[Tile],
    split: &DatasetSplit,
    config: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainState> {
    check_tiles(tiles, &split.train, &config.model)?;
    check_tiles(tiles, &split.validation, &config.model)?;
    let mut state = TrainState::new(config.clone())?;
    for _ in 0..config.epochs {
        train_epoch(&mut state, tiles, split, log)?;
    }
    Ok(state)
}

/// Per-pixel model classes over the tiled region of a scene.
pub fn infer_scene(model: &SegmentationModel, scene: &Scene, side: usize, batch_size: usize) -> Result<ClassMap> {
    model.encoder.config.check_tile_side(side)?;
    let tiles = tile_scene(scene, side)?;
    let pixels: Vec<Grid<f32>> = tiles.iter().map(|t| t.pixels.clone()).collect();
    let classes = if pixels.is_empty() {
        Vec::new()
    } else {
        model.predict_classes(&pixels, batch_size)?
    };
    let parts: Vec<_> = tiles.iter().map(|t| t.origin).zip(classes).collect();
    let (rows, cols) = scene.shape();
    assemble(tiled_extent(rows, cols, side), &parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub model: UNetConfig,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleSpec,
    /// Share of the training tiles used, in `(0, 1]`.
    pub fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            optimizer: OptimizerSpec::default(),
            schedule: ScheduleSpec::default(),
            fraction: 1.0,
            epochs: 100,
            batch_size: 16,
            eval_batch_size: 16,
            seed: 0,
        }
    }
}

/// Deterministic subset of `floor(fraction * n)` training indices (at least one).
pub fn supervised_subset(train: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(InvalidArgument, "fraction must lie in (0, 1], got {fraction}");
    }
    if train.is_empty() {
        bail!(Empty, "no training tiles");
    }
    let count = (libm::floor(fraction * train.len() as f64 + 1e-9) as usize).max(1);
    let mut order = train.to_vec();
    order.shuffle(&mut rng_from(seed, &[6]));
    order.truncate(count);
    Ok(order)
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    pub model: SupervisedModel<f32>,
    pub subset: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
}

/// Water where the predicted probability exceeds one half.
pub fn predict_supervised(model: &SupervisedModel<f32>, tiles: &[Grid<f32>], batch_size: usize) -> Result<Vec<BinaryMask>> {
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let p = model.forward_eval(&stack(chunk)?)?;
        for s in 0..p.n {
            let data = p.sample(s).iter().map(|&v| (v > 0.5) as u8).collect();
            out.push(Grid::from_vec(p.h, p.w, data)?);
        }
    }
    Ok(out)
}

fn masks_of(tiles: &[&Tile]) -> Result<Vec<BinaryMask>> {
    tiles
        .iter()
        .map(|t| match &t.mask {
            Some(m) => Ok(m.clone()),
            None => Err(crate::Error::MissingMask(alloc::format!("tile {} has no mask", t.id()))),
        })
        .collect()
}

/// Dice-loss training of the supervised baseline. Every epoch visits the
/// subset in a fresh order; a final partial batch is kept.
pub fn train_supervised(
    tiles: &[Tile],
    split: &DatasetSplit,
    config: &SupervisedConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<SupervisedOutcome> {
    check_tiles(tiles, &split.train, &config.model)?;
    check_tiles(tiles, &split.validation, &config.model)?;
    if config.batch_size == 0 {
        bail!(InvalidArgument, "batch size must be >= 1");
    }
    let subset = supervised_subset(&split.train, config.fraction, config.seed)?;
    let subset_tiles: Vec<&Tile> = subset.iter().map(|&i| &tiles[i]).collect();
    masks_of(&subset_tiles)?;
    let mut model = SupervisedModel::<f32>::new(config.model, derive_seed(config.seed, &[1]))?;
    let mut optimizer = AdamW::<f32>::new(config.optimizer)?;
    let batches = subset.len().div_ceil(config.batch_size);
    let schedule = config.schedule.resolve(&config.optimizer, batches as u64)?;
    let val_tiles: Vec<&Tile> = split.validation.iter().map(|&i| &tiles[i]).collect();
    let val_masks = if val_tiles.is_empty() { None } else { masks_of(&val_tiles).ok() };
    let val_pixels: Vec<Grid<f32>> = val_tiles.iter().map(|t| t.pixels.clone()).collect();

    let mut global_step = 0u64;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = subset.clone();
        order.shuffle(&mut rng_from(config.seed, &[7, epoch as u64]));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let members: Vec<&Tile> = chunk.iter().map(|&i| &tiles[i]).collect();
            let x = stack(&members.iter().map(|t| t.pixels.clone()).collect::<Vec<_>>())?;
            let target: Vec<u8> = members
                .iter()
                .flat_map(|t| t.mask.as_ref().unwrap().as_slice().iter().copied())
                .collect();
            let (probs, tape) = model.forward_train(&x)?;
            let pred: Vec<f64> = probs.data.iter().map(|&v| v as f64).collect();
            let (dice, grad) = dice_loss_and_grad(&pred, &target)?;
            let grad = Tensor::from_vec(probs.n, 1, probs.h, probs.w, grad.into_iter().map(|g| g as f32).collect())?;
            model.zero_grad();
            model.backward(&tape, &probs, &grad);
            let lr = schedule.lr_at(schedule.clock(global_step, batches as u64));
            optimizer.step(&mut [&mut model], lr);
            loss_sum += dice;
            log(&LogRecord::SupervisedStep { epoch, step, global_step, lr, dice });
            global_step += 1;
        }
        let val_iou = match &val_masks {
            Some(gt) => {
                let pred = predict_supervised(&model, &val_pixels, config.eval_batch_size)?;
                Some(evaluate_dataset(&pred, gt, config.eval_batch_size, IOU_EPSILON)?)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            steps: batches,
            mean_loss: loss_sum / batches as f64,
            mean_occupied_classes: 0.0,
            val_iou: val_iou.as_ref().map(|r| r.dataset_iou),
            val_global_iou: val_iou.as_ref().map(|r| r.global_iou),
        };
        log(&LogRecord::Epoch(record.clone()));
        epochs.push(record);
    }
    Ok(SupervisedOutcome { model, subset, epochs })
}

/// Softmax class probabilities in evaluation mode, `N x K x S x S`.
pub fn predict_probabilities(model: &SegmentationModel, tiles: &[Grid<f32>]) -> Result<Tensor<f64>> {
    Ok(softmax(&model.logits(&stack(tiles)?)?.map_scalar::<f64>()))
}

/// Tile identifiers in index order, for manifests and reports.
pub fn tile_ids(tiles: &[Tile], indices: &[usize]) -> Vec<String> {
    indices.iter().map(|&i| tiles[i].id()).collect()
}

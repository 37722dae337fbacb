//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 2 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use hydroseg::checkpoint::{self, LoadedModel};
use hydroseg::config::{jobs_from_env, DataConfig, ExperimentConfig};
use hydroseg::data::Dataset;
use hydroseg::experiment::{run_repetitions, Runner, StabilityReport, REFERENCE_ENCODER_PARAMETERS};
use hydroseg_core::losses::{
    class_weights, clustering_loss_self_labelled, negative_pair_loss, positive_pair_loss, softmax, total_loss_and_grad,
    total_loss_with_labels, ClusteringLossKind, LossWeights,
};
use hydroseg_core::metrics::{iou, IOU_EPSILON};
use hydroseg_core::model::{count_parameters, LayerKind, Module, UNetConfig, UNetEncoder};
use hydroseg_core::nn::Tensor;
use hydroseg_core::optim::{OptimizerSpec, ScheduleSpec};
use hydroseg_core::otsu::{morph_close, morph_open, otsu_threshold, MorphMode};
use hydroseg_core::postprocess::{fit_assignment, majority_vote, GroundClass};
use hydroseg_core::raster::{generate_synthetic_scene, SynthSpec};
use hydroseg_core::trainer::{infer_scene, train_self_supervised, LogRecord};
use hydroseg_core::{BinaryMask, ClassMap, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mask(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> BinaryMask {
    let density: f64 = r.random_range(0.0..1.0);
    Grid::from_fn(rows, cols, |_, _| r.random_bool(density) as u8)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_profile() -> ExperimentConfig {
    ExperimentConfig::load(&repo_root().join("configs/desk.toml")).expect("desk profile")
}

// ---------------------------------------------------------------- criterion 1

fn oracle_iou(p: &BinaryMask, g: &BinaryMask, eps: f64) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for r in 0..p.rows() {
        for c in 0..p.cols() {
            let (a, b) = (p.get(r, c) == 1, g.get(r, c) == 1);
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
    }
    (inter as f64 + eps) / (union as f64 + eps)
}

fn oracle_otsu_bin(img: &Grid<f32>) -> usize {
    let bins = 256usize;
    let mut hist = vec![0f64; bins];
    for &v in img.as_slice() {
        let b = ((v as f64 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        hist[b] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let mut best = (0usize, f64::NEG_INFINITY);
    for t in 1..bins {
        let n0: f64 = hist[..t].iter().sum();
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let mu0 = hist[..t].iter().enumerate().map(|(b, h)| b as f64 * h).sum::<f64>() / n0;
        let mu1 = hist[t..].iter().enumerate().map(|(b, h)| (b + t) as f64 * h).sum::<f64>() / n1;
        let var = (n0 / total) * (n1 / total) * (mu0 - mu1) * (mu0 - mu1);
        if var > best.1 {
            best = (t, var);
        }
    }
    best.0
}

/// Min (erode) or max over the in-image part of a square window.
fn oracle_rank(m: &BinaryMask, k: usize, erode: bool) -> BinaryMask {
    let h = (k / 2) as isize;
    Grid::from_fn(m.rows(), m.cols(), |r, c| {
        let mut vals = Vec::new();
        for dr in -h..=h {
            for dc in -h..=h {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < m.rows() && (cc as usize) < m.cols() {
                    vals.push(m.get(rr as usize, cc as usize));
                }
            }
        }
        if erode { *vals.iter().min().unwrap() } else { *vals.iter().max().unwrap() }
    })
}

fn oracle_morph(m: &BinaryMask, k: usize, iters: usize, open: bool) -> BinaryMask {
    let mut out = m.clone();
    for _ in 0..iters {
        out = oracle_rank(&out, k, open);
    }
    for _ in 0..iters {
        out = oracle_rank(&out, k, !open);
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    for i in 0..200 {
        let p = random_mask(&mut r, 16, 16);
        let g = random_mask(&mut r, 16, 16);
        let got = iou(std::slice::from_ref(&p), std::slice::from_ref(&g), IOU_EPSILON).map_err(|e| e.to_string())?;
        let want = oracle_iou(&p, &g, IOU_EPSILON);
        check(got == want, || format!("IOU pair {i}: {got} vs oracle {want}"))?;
    }
    let iou_secs = start.elapsed().as_secs_f64();
    check(iou_secs < 5.0, || format!("IOU oracle took {iou_secs:.2}s"))?;

    for i in 0..200 {
        let k = r.random_range(2..16);
        let hist: Vec<u64> = (0..k)
            .map(|_| if r.random_bool(0.2) { 0 } else { r.random_range(0..5000) })
            .collect();
        let eps = if i % 2 == 0 { 1.0 } else { r.random_range(0.01..10.0) };
        let w = class_weights(&hist, eps);
        let denom: f64 = hist.iter().map(|&h| eps / (h as f64 + eps)).sum();
        for (j, &h) in hist.iter().enumerate() {
            let want = (eps / (h as f64 + eps)) / denom;
            check(((w[j] - want) / want).abs() <= 1e-9, || format!("weight {j} of histogram {i}: {} vs {want}", w[j]))?;
        }
        let sum: f64 = w.iter().sum();
        check((sum - 1.0).abs() < 1e-12, || format!("weights of histogram {i} sum to {sum}"))?;
    }

    for i in 0..100 {
        // Two-component mixtures with random means and spreads.
        let (m0, m1) = (r.random_range(0.0..0.5f32), r.random_range(0.4..1.0f32));
        let (s0, s1) = (r.random_range(0.01..0.2f32), r.random_range(0.01..0.2f32));
        let frac = r.random_range(0.1..0.9);
        let img = Grid::from_fn(32, 32, |_, _| {
            let (m, s) = if r.random_bool(frac) { (m0, s0) } else { (m1, s1) };
            (m + s * (r.random::<f32>() - 0.5) * 3.0).clamp(0.0, 1.0)
        });
        let got = otsu_threshold(&img, 256).map_err(|e| e.to_string())?.bin;
        let want = oracle_otsu_bin(&img);
        check(got == want, || format!("Otsu image {i}: bin {got} vs exhaustive {want}"))?;
    }

    for i in 0..100 {
        let m = random_mask(&mut r, 16, 16);
        for (k, iters) in [(3, 1), (3, 2), (5, 1)] {
            let open = morph_open(&m, k, iters, MorphMode::Stacked).map_err(|e| e.to_string())?;
            let close = morph_close(&m, k, iters, MorphMode::Stacked).map_err(|e| e.to_string())?;
            check(open == oracle_morph(&m, k, iters, true), || format!("opening of mask {i} (k={k}, n={iters})"))?;
            check(close == oracle_morph(&m, k, iters, false), || format!("closing of mask {i} (k={k}, n={iters})"))?;
            for idx in 0..m.len() {
                let (o, x, c) = (open.as_slice()[idx], m.as_slice()[idx], close.as_slice()[idx]);
                check(o <= x && x <= c, || format!("inclusion broken at pixel {idx} of mask {i}"))?;
            }
        }
    }

    for i in 0..200 {
        let members = r.random_range(1..8);
        let masks: Vec<BinaryMask> = (0..members).map(|_| random_mask(&mut r, 6, 6)).collect();
        let got = majority_vote(&masks).map_err(|e| e.to_string())?;
        let want = Grid::from_fn(6, 6, |y, x| {
            let votes = masks.iter().filter(|m| m.get(y, x) == 1).count();
            (2 * votes > members) as u8
        });
        check(got == want, || format!("vote instance {i}"))?;

        let k = r.random_range(2..6);
        let n = r.random_range(1..4);
        let maps: Vec<ClassMap> = (0..n).map(|_| Grid::from_fn(8, 8, |_, _| r.random_range(0..k) as u16)).collect();
        let gts: Vec<BinaryMask> = (0..n).map(|_| random_mask(&mut r, 8, 8)).collect();
        let got = fit_assignment(&maps, &gts, k, IOU_EPSILON).map_err(|e| e.to_string())?;
        for class in 0..k {
            let (mut pred, mut iw, mut uw, mut il, mut ul) = (0u64, 0u64, 0u64, 0u64, 0u64);
            for (m, g) in maps.iter().zip(&gts) {
                for (&c, &t) in m.as_slice().iter().zip(g.as_slice()) {
                    let hit = c as usize == class;
                    pred += hit as u64;
                    iw += (hit && t == 1) as u64;
                    uw += (hit || t == 1) as u64;
                    il += (hit && t == 0) as u64;
                    ul += (hit || t == 0) as u64;
                }
            }
            let water_iou = (iw as f64 + IOU_EPSILON) / (uw as f64 + IOU_EPSILON);
            let land_iou = (il as f64 + IOU_EPSILON) / (ul as f64 + IOU_EPSILON);
            let want = if pred > 0 && water_iou > land_iou { GroundClass::Water } else { GroundClass::Land };
            check(got.mapping[class] == want, || format!("assignment instance {i}, class {class}"))?;
            check(got.per_class_iou[class] == [land_iou, water_iou], || format!("class IOUs of instance {i}"))?;
        }
    }
    Ok(format!("IOU x200 ({iou_secs:.3}s), weights x200, Otsu x100, morphology x100, vote and assignment x200"))
}

// ---------------------------------------------------------------- criterion 2

fn random_logits(r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(2, 3, 4, 4, (0..96).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn criterion_2() -> Outcome {
    let weights = LossWeights::default();
    check(
        weights.alpha_c == 0.1 && weights.alpha_p == 1.0 && weights.alpha_n == 1.0,
        || "unexpected default loss weights".into(),
    )?;
    let start = Instant::now();
    let mut r = rng(2);
    let h = 1e-4;
    let (mut good, mut total, mut worst) = (0usize, 0usize, 0f64);
    for _ in 0..10 {
        let z = [random_logits(&mut r), random_logits(&mut r), random_logits(&mut r)];
        let out = total_loss_and_grad(&z[0], &z[1], &z[2], &weights).map_err(|e| e.to_string())?;
        let labels = [&out.labels[0], &out.labels[1]];
        for branch in 0..3 {
            for i in 0..z[branch].data.len() {
                let eval = |delta: f64| {
                    let mut zz = z.clone();
                    zz[branch].data[i] += delta;
                    total_loss_with_labels(&zz[0], &zz[1], &zz[2], &weights, labels).unwrap().report.total
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = out.grads[branch].data[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                good += (rel < 1e-3) as usize;
                total += 1;
            }
        }
    }
    let share = good as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    check(share >= 0.99, || format!("only {:.2}% of coordinates within 1e-3", share * 100.0))?;
    check(secs < 30.0, || format!("gradient check took {secs:.1}s"))?;
    Ok(format!("{good}/{total} coordinates within 1e-3 relative (worst {worst:.1e})"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut max_lp = 0f64;
    for i in 0..50 {
        let a = softmax(&random_logits(&mut r));
        let b = if i % 5 == 0 {
            // One-hot pairs with disjoint classes reach the upper bound.
            let hot = |c: usize| Tensor::from_vec(2, 3, 4, 4, (0..96).map(|j| ((j / 16) % 3 == c) as u8 as f64).collect()).unwrap();
            let (x, y) = (hot(0), hot(1));
            let lp = positive_pair_loss(&x, &y).map_err(|e| e.to_string())?;
            check((lp - 2.0).abs() < 1e-12, || format!("disjoint one-hot L_p = {lp}"))?;
            y
        } else {
            softmax(&random_logits(&mut r))
        };
        let lp_aa = positive_pair_loss(&a, &a).map_err(|e| e.to_string())?;
        let ln_aa = negative_pair_loss(&a, &a).map_err(|e| e.to_string())?;
        check(lp_aa == 0.0 && ln_aa == 0.0, || format!("L_p(A,A) = {lp_aa}, L_n(A,A) = {ln_aa}"))?;
        let lp = positive_pair_loss(&a, &b).map_err(|e| e.to_string())?;
        let ln = negative_pair_loss(&a, &b).map_err(|e| e.to_string())?;
        check(ln == -lp, || format!("L_n = {ln} but L_p = {lp}"))?;
        check((0.0..=2.0).contains(&lp), || format!("L_p = {lp} outside [0, 2]"))?;
        max_lp = max_lp.max(lp);
    }

    // Logits whose argmax visits every class equally often.
    let (n, k, side) = (2, 4, 4);
    let plane = side * side;
    let mut data = vec![0.0; n * k * plane];
    for s in 0..n {
        for p in 0..plane {
            let label = (s * plane + p) % k;
            for c in 0..k {
                data[(s * k + c) * plane + p] = r.random_range(-1.0..1.0) + if c == label { 3.0 } else { 0.0 };
            }
        }
    }
    let z = Tensor::from_vec(n, k, side, side, data).unwrap();
    let probs = softmax(&z);
    let mut ce = 0.0;
    for s in 0..n {
        for p in 0..plane {
            let label = (s * plane + p) % k;
            ce -= probs.data[(s * k + label) * plane + p].ln();
        }
    }
    ce /= (n * plane) as f64;
    let weighted = clustering_loss_self_labelled(&z, ClusteringLossKind::Weighted, 1.0).map_err(|e| e.to_string())?;
    let uniform = clustering_loss_self_labelled(&z, ClusteringLossKind::Uniform, 1.0).map_err(|e| e.to_string())?;
    check((weighted - ce).abs() < 1e-6, || format!("weighted {weighted} vs cross-entropy {ce}"))?;
    check((uniform - ce).abs() < 1e-6, || format!("uniform {uniform} vs cross-entropy {ce}"))?;
    Ok(format!("pair identities on 50 pairs (max L_p {max_lp:.3}); balanced weighted CE = plain CE ({ce:.6})"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let cfg = UNetConfig::default();
    check(cfg.depth == 2 && cfg.base_channels == 8, || "default architecture is not depth 2, 8 channels".into())?;
    let enc = UNetEncoder::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
    let mut r = rng(4);
    let x = Tensor::from_vec(3, 1, 64, 64, (0..3 * 64 * 64).map(|_| r.random::<f32>()).collect()).unwrap();
    let y = enc.forward_eval(&x).map_err(|e| e.to_string())?;
    check(y.shape() == [3, 8, 64, 64], || format!("encoder output {:?}", y.shape()))?;
    let layers = enc.layers();
    let ups = layers.iter().filter(|l| matches!(l, LayerKind::UpsampleNearest2)).count();
    check(ups == cfg.depth, || format!("{ups} nearest-neighbour upsampling layers for depth {}", cfg.depth))?;
    let learned_up = layers.iter().any(|l| !matches!(
        l,
        LayerKind::Conv { .. } | LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::MaxPool2
            | LayerKind::UpsampleNearest2 | LayerKind::ConcatSkip
    ));
    check(!learned_up, || "unexpected layer kind in the encoder".into())?;
    let params = count_parameters(&enc);

    // Checkpoint round trip of a briefly trained model.
    let spec = SynthSpec { rows: 128, cols: 128, ..SynthSpec::default() };
    let scene = generate_synthetic_scene("ck", &spec, 4).map_err(|e| e.to_string())?;
    let tiles = hydroseg_core::raster::tile_scene(&scene, 32).map_err(|e| e.to_string())?;
    let split = hydroseg_core::raster::split_dataset(tiles.len(), (0.75, 0.25), 0).map_err(|e| e.to_string())?;
    let train_cfg = hydroseg_core::trainer::TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
    let state = train_self_supervised(&tiles, &split, &train_cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    checkpoint::save_segmentation(&path, &state.model, 0, 1).map_err(|e| e.to_string())?;
    let LoadedModel::SelfSupervised(back) = checkpoint::load(&path).map_err(|e| e.to_string())?.model else {
        return Err("checkpoint reloaded as the wrong model kind".into());
    };
    let a = infer_scene(&state.model, &scene, 32, 8).map_err(|e| e.to_string())?;
    let b = infer_scene(&back, &scene, 32, 8).map_err(|e| e.to_string())?;
    check(a == b, || "masks differ after checkpoint round trip".into())?;
    let za = state.model.logits(&x.clone()).map_err(|e| e.to_string())?;
    let zb = back.logits(&x).map_err(|e| e.to_string())?;
    check(za.data.iter().zip(&zb.data).all(|(p, q)| p.to_bits() == q.to_bits()), || "logits differ bitwise".into())?;
    Ok(format!(
        "output {:?}, nearest upsampling only, encoder parameters {params} (reference {REFERENCE_ENCODER_PARAMETERS}), checkpoint bit-identical",
        y.shape()
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let opt = OptimizerSpec::default();
    for (t0, explicit) in [(10u64, true), (37, false)] {
        let spec = ScheduleSpec { t_0: explicit.then_some(t0), ..ScheduleSpec::default() };
        let s = spec.resolve(&opt, t0).map_err(|e| e.to_string())?;
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        check(near(s.lr_at(0), 1e-3), || format!("lr_at(0) = {}", s.lr_at(0)))?;
        check(near(s.lr_at(t0), 1e-3), || format!("lr_at(T_0) = {}", s.lr_at(t0)))?;
        for k in 1..t0 {
            check(s.lr_at(k) < s.lr_at(k - 1), || format!("not decreasing at step {k}"))?;
            check(s.lr_at(k) > 0.0, || format!("lr_at({k}) left (0, lr)"))?;
        }
        check(s.cycle_position(t0) == (0, 2 * t0), || format!("second cycle is {:?}", s.cycle_position(t0)))?;
        check(near(s.lr_at(3 * t0), 1e-3), || "no restart after the second cycle".into())?;
        check(s.lr_at(3 * t0 - 1) < s.lr_at(3 * t0 - 2), || "second cycle not decreasing at its end".into())?;
        check(
            near(s.lr_at(t0 + t0), 0.5 * 1e-3),
            || format!("midpoint of the second cycle is {}", s.lr_at(2 * t0)),
        )?;
        let lr2 = hydroseg_core::optim::lr_at(t0, &opt, &spec, t0).map_err(|e| e.to_string())?;
        check(near(lr2, 1e-3), || "free lr_at disagrees".into())?;
    }
    Ok("restart at T_0, strictly decreasing first cycle, second cycle 2*T_0 (T_0 = 10 and one epoch of 37 batches)".into())
}

// ------------------------------------------------------------ criteria 6 and 7

static STABILITY: OnceLock<Result<StabilityReport, String>> = OnceLock::new();
static STABILITY_DIR: OnceLock<tempfile::TempDir> = OnceLock::new();

fn stability() -> Result<&'static StabilityReport, String> {
    STABILITY
        .get_or_init(|| {
            let dir = STABILITY_DIR.get_or_init(|| tempfile::tempdir().expect("tempdir"));
            let mut cfg = desk_profile();
            cfg.output_dir = dir.path().to_path_buf();
            let runner = Runner::Subprocess { exe: PathBuf::from(env!("CARGO_BIN_EXE_hydroseg")), jobs: jobs_from_env() };
            run_repetitions(&cfg, 5, &runner).map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn criterion_6() -> Outcome {
    let cfg = desk_profile();
    let DataConfig::Synthetic(synth) = &cfg.data else {
        return Err("desk profile does not use synthetic data".into());
    };
    check(
        synth.scene.looks == 4.0 && synth.scene.land_mean == 0.55 && synth.scene.water_mean == 0.15
            && cfg.tile_size == 64 && cfg.n_class == 10 && cfg.batch_size == 8 && cfg.epochs == 10
            && cfg.ensemble_size == 5,
        || "desk profile differs from the stated setup".into(),
    )?;
    let rep = stability()?;
    let first = &rep.repetitions[0];
    for (i, r) in rep.repetitions.iter().enumerate() {
        check(r.ensemble_iou >= 0.70, || format!("repetition {i}: ensemble IOU {:.4} < 0.70", r.ensemble_iou))?;
        check(r.otsu_iou >= 0.60, || format!("repetition {i}: Otsu IOU {:.4} < 0.60", r.otsu_iou))?;
    }
    check(first.seconds <= 900.0, || format!("one run took {:.0}s", first.seconds))?;
    let min_e = rep.repetitions.iter().map(|r| r.ensemble_iou).fold(f64::INFINITY, f64::min);
    let min_o = rep.repetitions.iter().map(|r| r.otsu_iou).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "ensemble {:.4}, Otsu {:.4} in {:.0}s (over 5 repetitions: mean {:.4}, {:.4}; lowest {min_e:.4}, {min_o:.4})",
        first.ensemble_iou, first.otsu_iou, first.seconds, rep.ensemble.mean, rep.otsu.mean
    ))
}

fn criterion_7() -> Outcome {
    let rep = stability()?;
    check(rep.ensemble.variance <= rep.members.variance, || {
        format!("ensemble variance {:.2e} > pooled member variance {:.2e}", rep.ensemble.variance, rep.members.variance)
    })?;
    Ok(format!(
        "ensemble variance {:.2e} <= member variance {:.2e} (ensemble mean {:.4}, member mean {:.4})",
        rep.ensemble.variance, rep.members.variance, rep.ensemble.mean, rep.members.mean
    ))
}

fn ensemble_vs_median() -> Outcome {
    let rep = stability()?;
    let k = rep.ensemble_at_least_median;
    check(k >= 4, || format!("ensemble reached the median member in only {k} of 5 repetitions"))?;
    Ok(format!("ensemble >= median member in {k} of 5 repetitions"))
}

// ---------------------------------------------------------------- criterion 8

fn final_occupancy(cfg: &ExperimentConfig, data: &Dataset, seed: u64, kind: ClusteringLossKind) -> Result<f64, String> {
    let mut tc = cfg.train_config(seed);
    tc.weights.clustering = kind;
    let mut last = None;
    train_self_supervised(&data.tiles, &data.split, &tc, &mut |r| {
        if let LogRecord::Epoch(e) = r {
            last = Some(e.mean_occupied_classes);
        }
    })
    .map_err(|e| e.to_string())?;
    last.ok_or_else(|| "no epoch finished".into())
}

fn criterion_8() -> Outcome {
    let cfg = desk_profile();
    let data = Dataset::load(&cfg).map_err(|e| e.to_string())?;
    let mut pairs = Vec::new();
    for seed in 0..3 {
        let w = final_occupancy(&cfg, &data, seed, ClusteringLossKind::Weighted)?;
        let u = final_occupancy(&cfg, &data, seed, ClusteringLossKind::Uniform)?;
        pairs.push(format!("{w:.2}/{u:.2}"));
        check(w >= u, || format!("seed {seed}: weighted {w:.3} < uniform {u:.3}"))?;
    }
    Ok(format!("weighted/uniform occupied classes at the final epoch: {}", pairs.join(", ")))
}

// ---------------------------------------------------------------- criterion 9

fn hydroseg(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hydroseg"))
        .args(args)
        .env_remove(hydroseg::config::OUTPUT_DIR_ENV)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("hydroseg {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<usize, String> {
    for name in names {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{}: {e}", a.join(name).display()))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{}: {e}", b.join(name).display()))?;
        check(x == y, || format!("{name} differs between {} and {}", a.display(), b.display()))?;
    }
    Ok(names.len())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let desk = repo_root().join("configs/desk.toml").to_string_lossy().into_owned();
    let small = ["--epochs", "2", "--set", "data.train_scenes=2", "--set", "data.test_scenes=1"];
    let mut compared = 0;

    let first = p("train-a");
    hydroseg(&[&["train", "-c", &desk, "--output-dir", &first, "--seed", "11"], &small[..]].concat())?;
    hydroseg(&["train", "-c", &format!("{first}/config.toml"), "--output-dir", &p("train-b")])?;
    compared += same_files(Path::new(&first), Path::new(&p("train-b")), &["metrics.jsonl", "model.ckpt", "eval.json", "assignment.json"])?;

    let first = p("sup-a");
    hydroseg(&[&["train-supervised", "-c", &desk, "--output-dir", &first, "--fraction", "0.5"], &small[..]].concat())?;
    hydroseg(&["train-supervised", "-c", &format!("{first}/config.toml"), "--output-dir", &p("sup-b")])?;
    compared += same_files(Path::new(&first), Path::new(&p("sup-b")), &["metrics.jsonl", "model.ckpt", "eval.json"])?;

    let first = p("ens-a");
    hydroseg(&[&["ensemble", "-c", &desk, "--output-dir", &first, "--ensemble-size", "2", "--epochs", "1"], &small[2..]].concat())?;
    hydroseg(&["ensemble", "-c", &format!("{first}/config.toml"), "--output-dir", &p("ens-b")])?;
    compared += same_files(Path::new(&first), Path::new(&p("ens-b")), &["eval.json", "member-0/metrics.jsonl", "member-1/metrics.jsonl"])?;

    let first = p("otsu-a");
    hydroseg(&[&["otsu", "-c", &desk, "--output-dir", &first], &small[2..]].concat())?;
    hydroseg(&["otsu", "-c", &format!("{first}/config.toml"), "--output-dir", &p("otsu-b")])?;
    compared += same_files(Path::new(&first), Path::new(&p("otsu-b")), &["eval.json", "otsu.md"])?;

    Ok(format!("train, train-supervised, ensemble and otsu reruns from snapshots: {compared} files bit-identical"))
}

// ---------------------------------------------------------------------- driver

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "formula oracles", criterion_1),
        (2, "gradient check", criterion_2),
        (3, "loss identities", criterion_3),
        (4, "architecture and checkpoint", criterion_4),
        (5, "scheduler", criterion_5),
        (6, "desk-scale end to end", criterion_6),
        (7, "ensemble stabilization", criterion_7),
        (7, "ensemble vs median member", ensemble_vs_median),
        (8, "weighted-loss occupancy", criterion_8),
        (9, "reproducibility", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

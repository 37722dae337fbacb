//! Self-supervised objective over the three branches and the Dice loss of the
//! supervised baseline. All arithmetic is in `f64`; logits are `N x K x H x W`
//! with the class axis in the channel slot.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringLossKind {
    /// Plain mean cross-entropy against the pseudo-labels.
    Uniform,
    /// Cross-entropy reweighted by inverse pseudo-label frequency.
    #[default]
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_c: f64,
    pub alpha_p: f64,
    pub alpha_n: f64,
    /// Smoothing constant of the class weights.
    pub epsilon_w: f64,
    pub clustering: ClusteringLossKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_c: 0.1,
            alpha_p: 1.0,
            alpha_n: 1.0,
            epsilon_w: 1.0,
            clustering: ClusteringLossKind::Weighted,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_c", self.alpha_c), ("alpha_p", self.alpha_p), ("alpha_n", self.alpha_n)] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!(InvalidArgument, "{name} must be a finite value >= 0, got {v}");
            }
        }
        if !(self.epsilon_w > 0.0) || !self.epsilon_w.is_finite() {
            bail!(InvalidArgument, "epsilon_w must be positive, got {}", self.epsilon_w);
        }
        Ok(())
    }
}

/// Per-pixel class indices, `N x H x W`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u16>,
}

impl LabelBatch {
    pub fn histogram(&self, n_class: usize) -> Result<Vec<u64>> {
        let mut hist = vec![0u64; n_class];
        for &l in &self.labels {
            match hist.get_mut(l as usize) {
                Some(slot) => *slot += 1,
                None => bail!(OutOfRange, "label {l} outside 0..{n_class}"),
            }
        }
        Ok(hist)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_c_hat: f64,
    pub l_p: f64,
    pub l_n: f64,
    pub total: f64,
    /// Pixels per pseudo-label in the standard branch.
    pub class_histogram: Vec<u64>,
}

impl LossReport {
    /// Number of pseudo-label classes that own at least one pixel.
    pub fn occupied_classes(&self) -> usize {
        self.class_histogram.iter().filter(|&&c| c > 0).count()
    }
}

/// Softmax over the class axis, computed with the per-pixel maximum removed.
pub fn softmax(logits: &Tensor<f64>) -> Tensor<f64> {
    let plane = logits.plane_len();
    let k = logits.c;
    let mut out = logits.clone();
    for s in 0..logits.n {
        let sample = out.sample_mut(s);
        for i in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(sample[c * plane + i]);
            }
            let mut total = 0.0;
            for c in 0..k {
                let e = libm::exp(sample[c * plane + i] - max);
                sample[c * plane + i] = e;
                total += e;
            }
            for c in 0..k {
                sample[c * plane + i] /= total;
            }
        }
    }
    out
}

/// Per-pixel argmax with ties resolved to the lowest class index.
pub fn pseudo_labels(probs: &Tensor<f64>) -> LabelBatch {
    let plane = probs.plane_len();
    let mut labels = Vec::with_capacity(probs.n * plane);
    for s in 0..probs.n {
        let sample = probs.sample(s);
        for i in 0..plane {
            let mut best = 0;
            for c in 1..probs.c {
                if sample[c * plane + i] > sample[best * plane + i] {
                    best = c;
                }
            }
            labels.push(best as u16);
        }
    }
    LabelBatch { n: probs.n, h: probs.h, w: probs.w, labels }
}

/// `w_k = (eps / (K_k + eps)) / sum_j (eps / (K_j + eps))`.
pub fn class_weights(histogram: &[u64], epsilon_w: f64) -> Vec<f64> {
    let raw: Vec<f64> = histogram
        .iter()
        .map(|&k| epsilon_w / (k as f64 + epsilon_w))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn check_labels(logits: &Tensor<f64>, labels: &LabelBatch) -> Result<()> {
    if (labels.n, labels.h, labels.w) != (logits.n, logits.h, logits.w) {
        bail!(
            ShapeMismatch,
            "labels {}x{}x{} do not match logits {:?}",
            labels.n,
            labels.h,
            labels.w,
            logits.shape()
        );
    }
    Ok(())
}

/// Cross-entropy of `probs` against `labels` scaled by `N_class * w_label`,
/// averaged over pixels; also returns the gradient with respect to the logits.
fn clustering_term(
    probs: &Tensor<f64>,
    labels: &LabelBatch,
    kind: ClusteringLossKind,
    epsilon_w: f64,
    grad: Option<&mut Tensor<f64>>,
    scale: f64,
) -> Result<f64> {
    check_labels(probs, labels)?;
    let k = probs.c;
    let hist = labels.histogram(k)?;
    let factors: Vec<f64> = match kind {
        ClusteringLossKind::Uniform => vec![1.0; k],
        ClusteringLossKind::Weighted => class_weights(&hist, epsilon_w)
            .into_iter()
            .map(|w| w * k as f64)
            .collect(),
    };
    let plane = probs.plane_len();
    let pixels = (probs.n * plane) as f64;
    let mut loss = 0.0;
    for s in 0..probs.n {
        let p = probs.sample(s);
        for i in 0..plane {
            let c = labels.labels[s * plane + i] as usize;
            loss += factors[c] * -libm::log(p[c * plane + i]);
        }
    }
    if let Some(g) = grad {
        for s in 0..probs.n {
            let p = probs.sample(s);
            let gs = g.sample_mut(s);
            for i in 0..plane {
                let c = labels.labels[s * plane + i] as usize;
                let f = scale * factors[c] / pixels;
                for j in 0..k {
                    let onehot = if j == c { 1.0 } else { 0.0 };
                    gs[j * plane + i] += f * (p[j * plane + i] - onehot);
                }
            }
        }
    }
    Ok(loss / pixels)
}

/// Weighted clustering loss with weights from this batch's label histogram.
pub fn clustering_loss(logits: &Tensor<f64>, labels: &LabelBatch, epsilon_w: f64) -> Result<f64> {
    clustering_term(&softmax(logits), labels, ClusteringLossKind::Weighted, epsilon_w, None, 1.0)
}

/// Clustering loss of either kind, self-labelled from the logits.
pub fn clustering_loss_self_labelled(
    logits: &Tensor<f64>,
    kind: ClusteringLossKind,
    epsilon_w: f64,
) -> Result<f64> {
    let probs = softmax(logits);
    let labels = pseudo_labels(&probs);
    clustering_term(&probs, &labels, kind, epsilon_w, None, 1.0)
}

fn check_pair(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(ShapeMismatch, "probability batches {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

/// Mean per-pixel L1 distance between class-probability vectors.
fn mean_l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let pixels = (a.n * a.plane_len()) as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / pixels
}

pub fn positive_pair_loss(probs: &Tensor<f64>, probs_aug: &Tensor<f64>) -> Result<f64> {
    check_pair(probs, probs_aug)?;
    Ok(mean_l1(probs, probs_aug))
}

pub fn negative_pair_loss(probs: &Tensor<f64>, probs_shuffled: &Tensor<f64>) -> Result<f64> {
    check_pair(probs, probs_shuffled)?;
    Ok(-mean_l1(probs, probs_shuffled))
}

/// Adds `scale * sign(a - b) / pixels` to `ga` and its negation to `gb`.
fn l1_grad(a: &Tensor<f64>, b: &Tensor<f64>, scale: f64, ga: &mut Tensor<f64>, gb: &mut Tensor<f64>) {
    let pixels = (a.n * a.plane_len()) as f64;
    let f = scale / pixels;
    for i in 0..a.data.len() {
        let d = a.data[i] - b.data[i];
        let s = if d > 0.0 {
            f
        } else if d < 0.0 {
            -f
        } else {
            0.0
        };
        ga.data[i] += s;
        gb.data[i] -= s;
    }
}

/// Maps a gradient with respect to probabilities back through the softmax.
fn softmax_backward(probs: &Tensor<f64>, grad_probs: &Tensor<f64>) -> Tensor<f64> {
    let plane = probs.plane_len();
    let k = probs.c;
    let mut out = Tensor::zeros(probs.n, k, probs.h, probs.w);
    for s in 0..probs.n {
        let p = probs.sample(s);
        let g = grad_probs.sample(s);
        let o = out.sample_mut(s);
        for i in 0..plane {
            let mut dot = 0.0;
            for c in 0..k {
                dot += p[c * plane + i] * g[c * plane + i];
            }
            for c in 0..k {
                o[c * plane + i] = p[c * plane + i] * (g[c * plane + i] - dot);
            }
        }
    }
    out
}

/// Result of the three-branch objective.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub report: LossReport,
    /// Gradients with respect to the standard, augmented and shuffled logits.
    pub grads: [Tensor<f64>; 3],
    /// Pseudo-labels of the standard and augmented branches.
    pub labels: [LabelBatch; 2],
}

fn evaluate(
    logits: [&Tensor<f64>; 3],
    weights: &LossWeights,
    frozen: Option<[&LabelBatch; 2]>,
) -> Result<LossOutput> {
    weights.validate()?;
    let [std_l, aug_l, shuf_l] = logits;
    check_pair(std_l, aug_l)?;
    check_pair(std_l, shuf_l)?;
    if std_l.c < 2 {
        bail!(InvalidArgument, "need at least 2 classes, got {}", std_l.c);
    }
    let p = softmax(std_l);
    let q = softmax(aug_l);
    let r = softmax(shuf_l);
    let (labels_p, labels_q) = match frozen {
        Some([a, b]) => (a.clone(), b.clone()),
        None => (pseudo_labels(&p), pseudo_labels(&q)),
    };
    let [n, k, h, w] = p.shape();
    let mut gz_p = Tensor::zeros(n, k, h, w);
    let mut gz_q = Tensor::zeros(n, k, h, w);
    let kind = weights.clustering;
    let l_c = clustering_term(&p, &labels_p, kind, weights.epsilon_w, Some(&mut gz_p), weights.alpha_c)?;
    let l_c_hat = clustering_term(&q, &labels_q, kind, weights.epsilon_w, Some(&mut gz_q), weights.alpha_c)?;
    let l_p = mean_l1(&p, &q);
    let l_n = -mean_l1(&p, &r);

    let mut gp = Tensor::zeros(n, k, h, w);
    let mut gq = Tensor::zeros(n, k, h, w);
    let mut gr = Tensor::zeros(n, k, h, w);
    l1_grad(&p, &q, weights.alpha_p, &mut gp, &mut gq);
    l1_grad(&p, &r, -weights.alpha_n, &mut gp, &mut gr);
    gz_p.add_assign(&softmax_backward(&p, &gp));
    gz_q.add_assign(&softmax_backward(&q, &gq));
    let gz_r = softmax_backward(&r, &gr);

    let total = weights.alpha_c * (l_c + l_c_hat) + weights.alpha_p * l_p + weights.alpha_n * l_n;
    let report = LossReport {
        l_c,
        l_c_hat,
        l_p,
        l_n,
        total,
        class_histogram: labels_p.histogram(k)?,
    };
    Ok(LossOutput {
        report,
        grads: [gz_p, gz_q, gz_r],
        labels: [labels_p, labels_q],
    })
}

/// All four terms and their weighted sum for standard, augmented and
/// shuffled logits.
pub fn total_loss(
    standard: &Tensor<f64>,
    augmented: &Tensor<f64>,
    shuffled: &Tensor<f64>,
    weights: &LossWeights,
) -> Result<LossReport> {
    Ok(evaluate([standard, augmented, shuffled], weights, None)?.report)
}

/// Like [`total_loss`] and also returns the logit gradients. Pseudo-labels
/// are constants of the gradient.
pub fn total_loss_and_grad(
    standard: &Tensor<f64>,
    augmented: &Tensor<f64>,
    shuffled: &Tensor<f64>,
    weights: &LossWeights,
) -> Result<LossOutput> {
    evaluate([standard, augmented, shuffled], weights, None)
}

/// Evaluates the objective with pseudo-labels held fixed, e.g. for finite
/// differences.
pub fn total_loss_with_labels(
    standard: &Tensor<f64>,
    augmented: &Tensor<f64>,
    shuffled: &Tensor<f64>,
    weights: &LossWeights,
    labels: [&LabelBatch; 2],
) -> Result<LossOutput> {
    evaluate([standard, augmented, shuffled], weights, Some(labels))
}

/// Soft Dice loss `1 - (2 sum(p t) + 1) / (sum p + sum t + 1)`.
pub fn dice_loss(pred: &[f64], target: &[u8]) -> Result<f64> {
    Ok(dice_loss_and_grad(pred, target)?.0)
}

pub fn dice_loss_and_grad(pred: &[f64], target: &[u8]) -> Result<(f64, Vec<f64>)> {
    const SMOOTH: f64 = 1.0;
    if pred.len() != target.len() {
        bail!(ShapeMismatch, "prediction has {} values, target {}", pred.len(), target.len());
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        if t > 1 {
            bail!(InvalidArgument, "target value {t} is not binary");
        }
        let t = t as f64;
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = 2.0 * inter + SMOOTH;
    let den = sum_p + sum_t + SMOOTH;
    let grad = target
        .iter()
        .map(|&t| -(2.0 * t as f64 * den - num) / (den * den))
        .collect();
    Ok((1.0 - num / den, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn random_logits(seed: u64, n: usize, k: usize, side: usize, scale: f64) -> Tensor<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        let data = (0..n * k * side * side).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor::from_vec(n, k, side, side, data).unwrap()
    }

    fn probs_from_pixels(pixels: &[[f64; 2]]) -> Tensor<f64> {
        let n = pixels.len();
        let mut data = vec![0.0; 2 * n];
        for (i, p) in pixels.iter().enumerate() {
            data[i] = p[0];
            data[n + i] = p[1];
        }
        Tensor::from_vec(1, 2, 1, n, data).unwrap()
    }

    #[test]
    fn argmax_and_tie_break() {
        let t = Tensor::from_vec(1, 3, 1, 1, vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(pseudo_labels(&t).labels, [1]);
        let t = Tensor::from_vec(1, 2, 1, 1, vec![0.5, 0.5]).unwrap();
        assert_eq!(pseudo_labels(&t).labels, [0]);
        let t = Tensor::from_vec(2, 10, 2, 2, vec![0.1; 80]).unwrap();
        assert!(pseudo_labels(&t).labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[50, 50], 3.0), [0.5, 0.5]);
        let w = class_weights(&[90, 10], 1.0);
        let a = 1.0 / 91.0;
        let b = 1.0 / 11.0;
        assert!((w[0] - a / (a + b)).abs() < 1e-15);
        assert!((w[0] - 0.107_843_137).abs() < 1e-8);
        assert!((w[1] - 0.892_156_862).abs() < 1e-8);
        let w = class_weights(&[100, 0], 1.0);
        assert!((w[0] - 0.009_803_921_6).abs() < 1e-9);
        assert!((w[1] - 0.990_196_078).abs() < 1e-8);
    }

    #[test]
    fn confident_logits_have_near_zero_clustering_loss() {
        let mut data = vec![-50.0; 2 * 3 * 4];
        for i in 0..4 {
            data[i] = 50.0;
            data[3 * 4 + 4 + i] = 50.0;
        }
        let logits = Tensor::from_vec(2, 3, 2, 2, data).unwrap();
        let labels = pseudo_labels(&softmax(&logits));
        assert!(clustering_loss(&logits, &labels, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_log_two() {
        let logits = Tensor::from_vec(1, 2, 2, 2, vec![0.3; 8]).unwrap();
        let labels = LabelBatch { n: 1, h: 2, w: 2, labels: vec![0, 1, 1, 1] };
        let v = clustering_loss(&logits, &labels, 1.0).unwrap();
        // Skewed histogram but every pixel has the same probability.
        let w = class_weights(&[1, 3], 1.0);
        let expected = 2.0 * (w[0] + 3.0 * w[1]) / 4.0 * core::f64::consts::LN_2;
        assert!((v - expected).abs() < 1e-12);
        let balanced = LabelBatch { n: 1, h: 2, w: 2, labels: vec![0, 1, 0, 1] };
        let v = clustering_loss(&logits, &balanced, 1.0).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn clustering_loss_matches_scalar_loop() {
        // 2 tiles of 2x2 pixels, 3 classes.
        let logits = random_logits(9, 2, 3, 2, 2.0);
        let labels = LabelBatch { n: 2, h: 2, w: 2, labels: vec![0, 2, 2, 1, 0, 0, 2, 2] };
        let mut hist = [0f64; 3];
        for &l in &labels.labels {
            hist[l as usize] += 1.0;
        }
        let raw: Vec<f64> = hist.iter().map(|k| 1.0 / (k + 1.0)).collect();
        let z: f64 = raw.iter().sum();
        let mut acc = 0.0;
        for s in 0..2 {
            for i in 0..4 {
                let v: Vec<f64> = (0..3).map(|c| logits.data[s * 12 + c * 4 + i]).collect();
                let norm: f64 = v.iter().map(|x| x.exp()).sum();
                let c = labels.labels[s * 4 + i] as usize;
                acc += 3.0 * raw[c] / z * -(v[c].exp() / norm).ln();
            }
        }
        let v = clustering_loss(&logits, &labels, 1.0).unwrap();
        assert!((v - acc / 8.0).abs() < 1e-12, "{v} vs {}", acc / 8.0);
        let bad = LabelBatch { n: 2, h: 2, w: 2, labels: vec![3; 8] };
        assert!(clustering_loss(&logits, &bad, 1.0).is_err());
    }

    #[test]
    fn pair_loss_examples() {
        let a = probs_from_pixels(&[[1.0, 0.0]; 4]);
        let b = probs_from_pixels(&[[0.0, 1.0]; 4]);
        assert_eq!(positive_pair_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(positive_pair_loss(&a, &b).unwrap(), 2.0);
        assert_eq!(negative_pair_loss(&a, &b).unwrap(), -2.0);
        assert_eq!(negative_pair_loss(&a, &a).unwrap(), 0.0);
        let c = Tensor::<f64>::zeros(1, 2, 1, 3);
        assert!(positive_pair_loss(&a, &c).is_err());
        assert!(negative_pair_loss(&a, &c).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let s = random_logits(1, 2, 3, 4, 2.0);
        let a = random_logits(2, 2, 3, 4, 2.0);
        let r = random_logits(3, 2, 3, 4, 2.0);
        let only_c = LossWeights { alpha_c: 1.0, alpha_p: 0.0, alpha_n: 0.0, ..LossWeights::default() };
        let rep = total_loss(&s, &a, &r, &only_c).unwrap();
        assert!((rep.total - (rep.l_c + rep.l_c_hat)).abs() < 1e-12);
        let rep = total_loss(&s, &s, &r, &LossWeights::default()).unwrap();
        assert_eq!(rep.l_p, 0.0);
        let rep = total_loss(&s, &a, &r, &LossWeights::default()).unwrap();
        let expected = 0.1 * (rep.l_c + rep.l_c_hat) + rep.l_p + rep.l_n;
        assert!((rep.total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        assert_eq!(rep.class_histogram.iter().sum::<u64>(), 2 * 16);
        assert!(total_loss(&s, &Tensor::zeros(2, 3, 2, 2), &r, &LossWeights::default()).is_err());
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_loss(&[1.0, 0.0, 1.0], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(dice_loss(&[0.0; 10], &[0; 10]).unwrap(), 0.0);
        let v = dice_loss(&[1.0; 100], &[0; 100]).unwrap();
        assert!((v - (1.0 - 1.0 / 101.0)).abs() < 1e-15);
        assert!(dice_loss(&[0.5], &[1, 0]).is_err());
        assert!(dice_loss(&[0.5], &[2]).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(4);
        let pred: Vec<f64> = (0..20).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<u8> = (0..20).map(|_| rng.random_range(0..2u8)).collect();
        let (_, g) = dice_loss_and_grad(&pred, &target).unwrap();
        for j in 0..20 {
            let mut up = pred.clone();
            let mut dn = pred.clone();
            up[j] += 1e-6;
            dn[j] -= 1e-6;
            let fd = (dice_loss(&up, &target).unwrap() - dice_loss(&dn, &target).unwrap()) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7);
        }
    }

    /// Central differences with the pseudo-labels frozen at their argmax.
    fn fd_check(seed: u64, weights: LossWeights) -> (usize, usize) {
        let s = random_logits(seed, 2, 3, 4, 2.0);
        let a = random_logits(seed + 100, 2, 3, 4, 2.0);
        let r = random_logits(seed + 200, 2, 3, 4, 2.0);
        let out = total_loss_and_grad(&s, &a, &r, &weights).unwrap();
        let labels = [&out.labels[0], &out.labels[1]];
        let h = 1e-4;
        let mut ok = 0;
        let mut total = 0;
        for branch in 0..3 {
            for i in 0..s.data.len() {
                let eval = |delta: f64| {
                    let mut t = [s.clone(), a.clone(), r.clone()];
                    t[branch].data[i] += delta;
                    total_loss_with_labels(&t[0], &t[1], &t[2], &weights, labels).unwrap().report.total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = out.grads[branch].data[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                total += 1;
                if err < 1e-3 {
                    ok += 1;
                }
            }
        }
        (ok, total)
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (ok, total) = fd_check(seed, LossWeights::default());
            assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
        }
        let uniform = LossWeights { clustering: ClusteringLossKind::Uniform, ..LossWeights::default() };
        let (ok, total) = fd_check(7, uniform);
        assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn class_weights_on_simplex(hist in proptest::collection::vec(0u64..1000, 1..12), eps in 0.01f64..10.0) {
            let w = class_weights(&hist, eps);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&v| v > 0.0));
            for i in 0..hist.len() {
                for j in 0..hist.len() {
                    if hist[i] < hist[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }

        #[test]
        fn pair_losses_are_bounded_and_symmetric(seed in any::<u64>(), k in 2usize..6) {
            let p = softmax(&random_logits(seed, 2, k, 3, 6.0));
            let q = softmax(&random_logits(seed ^ 0xABCD, 2, k, 3, 6.0));
            let lp = positive_pair_loss(&p, &q).unwrap();
            let ln = negative_pair_loss(&p, &q).unwrap();
            prop_assert!((0.0..=2.0).contains(&lp));
            prop_assert!((-2.0..=0.0).contains(&ln));
            prop_assert_eq!(ln, -lp);
            prop_assert_eq!(lp, positive_pair_loss(&q, &p).unwrap());
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), k in 2usize..12) {
            let p = softmax(&random_logits(seed, 2, k, 3, 30.0));
            let plane = p.plane_len();
            for s in 0..p.n {
                for i in 0..plane {
                    let total: f64 = (0..k).map(|c| p.sample(s)[c * plane + i]).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn balanced_weighting_equals_plain_cross_entropy(seed in any::<u64>(), k in 2usize..5) {
            // Each class owns exactly one pixel per class-sized block.
            let logits = random_logits(seed, 1, k, k, 3.0);
            let labels = LabelBatch { n: 1, h: k, w: k, labels: (0..k * k).map(|i| (i % k) as u16).collect() };
            let probs = softmax(&logits);
            let weighted = clustering_term(&probs, &labels, ClusteringLossKind::Weighted, 1.0, None, 1.0).unwrap();
            let plain = clustering_term(&probs, &labels, ClusteringLossKind::Uniform, 1.0, None, 1.0).unwrap();
            prop_assert!((weighted - plain).abs() < 1e-12);
        }
    }
}

//! Intersection-over-union and the batch-mean dataset protocol.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::BinaryMask;

/// Smoothing constant added to both sides of the IOU ratio.
pub const IOU_EPSILON: f64 = 1e-6;

/// Water-class intersection and union pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub union: u64,
}

impl OverlapCounts {
    pub fn iou(&self, epsilon: f64) -> f64 {
        (self.intersection as f64 + epsilon) / (self.union as f64 + epsilon)
    }

    pub fn add(&mut self, other: OverlapCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }
}

pub fn overlap(pred: &[u8], gt: &[u8]) -> Result<OverlapCounts> {
    if pred.len() != gt.len() {
        bail!(ShapeMismatch, "prediction has {} pixels, ground truth {}", pred.len(), gt.len());
    }
    let mut c = OverlapCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            bail!(InvalidArgument, "masks must be binary, saw {p} and {g}");
        }
        c.intersection += (p & g) as u64;
        c.union += (p | g) as u64;
    }
    Ok(c)
}

fn mask_overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<OverlapCounts> {
    if pred.shape() != gt.shape() {
        bail!(ShapeMismatch, "mask shapes {:?} and {:?} differ", pred.shape(), gt.shape());
    }
    overlap(pred.as_slice(), gt.as_slice())
}

/// IOU of the water class over all pixels of the given masks.
pub fn iou(pred: &[BinaryMask], gt: &[BinaryMask], epsilon: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        bail!(ShapeMismatch, "{} predictions for {} ground-truth masks", pred.len(), gt.len());
    }
    let mut total = OverlapCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        total.add(mask_overlap(p, g)?);
    }
    Ok(total.iou(epsilon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_batch_iou: Vec<f64>,
    /// Mean of the per-batch IOUs.
    pub dataset_iou: f64,
    /// IOU from counts pooled over the whole dataset.
    pub global_iou: f64,
    pub n_batches: usize,
    pub batch_size: usize,
    pub epsilon: f64,
}

/// Groups masks into consecutive batches (keeping a final partial batch) and
/// averages the per-batch IOUs.
pub fn evaluate_dataset(
    pred: &[BinaryMask],
    gt: &[BinaryMask],
    batch_size: usize,
    epsilon: f64,
) -> Result<EvalReport> {
    if pred.is_empty() {
        bail!(Empty, "no masks to evaluate");
    }
    if pred.len() != gt.len() {
        bail!(ShapeMismatch, "{} predictions for {} ground-truth masks", pred.len(), gt.len());
    }
    if batch_size == 0 {
        bail!(InvalidArgument, "batch size must be >= 1");
    }
    let mut per_batch = Vec::new();
    let mut global = OverlapCounts::default();
    for (p, g) in pred.chunks(batch_size).zip(gt.chunks(batch_size)) {
        let mut counts = OverlapCounts::default();
        for (a, b) in p.iter().zip(g) {
            counts.add(mask_overlap(a, b)?);
        }
        global.add(counts);
        per_batch.push(counts.iou(epsilon));
    }
    let dataset_iou = per_batch.iter().sum::<f64>() / per_batch.len() as f64;
    Ok(EvalReport {
        n_batches: per_batch.len(),
        per_batch_iou: per_batch,
        dataset_iou,
        global_iou: global.iou(epsilon),
        batch_size,
        epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub n: usize,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunStats> {
    if values.is_empty() {
        bail!(Empty, "no runs to aggregate");
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(RunStats { mean, variance, n: values.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn block(rows: usize, cols: usize, r0: usize, c0: usize, h: usize, w: usize) -> BinaryMask {
        Grid::from_fn(rows, cols, |r, c| (r >= r0 && r < r0 + h && c >= c0 && c < c0 + w) as u8)
    }

    #[test]
    fn iou_examples() {
        let a = block(8, 8, 2, 2, 2, 2);
        assert_eq!(iou(core::slice::from_ref(&a), core::slice::from_ref(&a), IOU_EPSILON).unwrap(), 1.0);
        let empty = Grid::filled(8, 8, 0u8);
        assert_eq!(iou(core::slice::from_ref(&empty), core::slice::from_ref(&empty), IOU_EPSILON).unwrap(), 1.0);
        let shifted = block(8, 8, 2, 3, 2, 2);
        let v = iou(core::slice::from_ref(&a), &[shifted], IOU_EPSILON).unwrap();
        assert_eq!(v, (2.0 + 1e-6) / (6.0 + 1e-6));
        assert!(iou(core::slice::from_ref(&a), &[block(4, 4, 0, 0, 1, 1)], IOU_EPSILON).is_err());
        assert!(iou(core::slice::from_ref(&a), &[Grid::filled(8, 8, 2u8)], IOU_EPSILON).is_err());
    }

    #[test]
    fn dataset_protocol() {
        let full = block(4, 4, 0, 0, 4, 4);
        let half = block(4, 4, 0, 0, 2, 4);
        let empty = Grid::filled(4, 4, 0u8);
        let pred = [full.clone(), full.clone(), half.clone()];
        let gt = [full.clone(), full.clone(), full.clone()];
        let r = evaluate_dataset(&pred, &pred, 2, IOU_EPSILON).unwrap();
        assert_eq!(r.dataset_iou, 1.0);
        assert_eq!(r.n_batches, 2);
        let r = evaluate_dataset(&pred, &gt, 3, IOU_EPSILON).unwrap();
        assert_eq!(r.dataset_iou, iou(&pred, &gt, IOU_EPSILON).unwrap());
        // Batch mean and pooled counts disagree once batches differ in size.
        let pred = [empty.clone(), half.clone(), half.clone()];
        let gt = [empty.clone(), full.clone(), full.clone()];
        let r = evaluate_dataset(&pred, &gt, 1, IOU_EPSILON).unwrap();
        let mean = (1.0 + 2.0 * (8.0 + 1e-6) / (16.0 + 1e-6)) / 3.0;
        assert!((r.dataset_iou - mean).abs() < 1e-12);
        assert!((r.global_iou - (16.0 + 1e-6) / (32.0 + 1e-6)).abs() < 1e-12);
        assert!((r.dataset_iou - r.global_iou).abs() > 0.1);
        assert!(evaluate_dataset(&[], &[], 2, IOU_EPSILON).is_err());
        assert!(evaluate_dataset(&pred, &gt, 0, IOU_EPSILON).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_runs(&[0.5]).unwrap().variance, 0.0);
        let s = aggregate_runs(&[0.4, 0.6]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15 && (s.variance - 0.01).abs() < 1e-15);
        assert_eq!(aggregate_runs(&[0.3; 7]).unwrap().variance, 0.0);
        assert!(aggregate_runs(&[]).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (proptest::collection::vec(0u8..2, 36), proptest::collection::vec(0u8..2, 36))
            .prop_map(|(a, b)| (Grid::from_vec(6, 6, a).unwrap(), Grid::from_vec(6, 6, b).unwrap()))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_exact_at_equality((a, b) in mask_strategy()) {
            let ab = iou(core::slice::from_ref(&a), core::slice::from_ref(&b), IOU_EPSILON).unwrap();
            prop_assert_eq!(ab, iou(core::slice::from_ref(&b), core::slice::from_ref(&a), IOU_EPSILON).unwrap());
            prop_assert_eq!(ab == 1.0, a == b);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_invariant_under_joint_flip((a, b) in mask_strategy()) {
            let before = iou(core::slice::from_ref(&a), core::slice::from_ref(&b), IOU_EPSILON).unwrap();
            let after = iou(&[a.flip_horizontal()], &[b.flip_horizontal()], IOU_EPSILON).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn batch_size_irrelevant_for_identical_tiles((a, b) in mask_strategy(), n in 1usize..7, bs in 1usize..5) {
            let pred = alloc::vec![a; n];
            let gt = alloc::vec![b; n];
            let one = evaluate_dataset(&pred, &gt, 1, IOU_EPSILON).unwrap().dataset_iou;
            let other = evaluate_dataset(&pred, &gt, bs, IOU_EPSILON).unwrap().dataset_iou;
            // Equal up to the smoothing term, which does not scale with batch size.
            prop_assert!((one - other).abs() <= 2.0 * IOU_EPSILON);
        }
    }
}

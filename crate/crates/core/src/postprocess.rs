//! Mapping model classes to water/land and combining ensemble members.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::{BinaryMask, ClassMap, Grid};
use crate::metrics::OverlapCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundClass {
    Land,
    Water,
}

impl GroundClass {
    pub fn value(self) -> u8 {
        match self {
            GroundClass::Land => 0,
            GroundClass::Water => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAssignment {
    pub mapping: Vec<GroundClass>,
    /// `[iou_vs_land, iou_vs_water]` for each model class.
    pub per_class_iou: Vec<[f64; 2]>,
}

impl ClassAssignment {
    pub fn n_class(&self) -> usize {
        self.mapping.len()
    }

    pub fn water_classes(&self) -> Vec<usize> {
        (0..self.mapping.len())
            .filter(|&k| self.mapping[k] == GroundClass::Water)
            .collect()
    }
}

/// Assigns each model class to the ground-truth class it overlaps best, using
/// intersection and union counts pooled over every mask.
pub fn fit_assignment(
    model_masks: &[ClassMap],
    gt_masks: &[BinaryMask],
    n_class: usize,
    epsilon: f64,
) -> Result<ClassAssignment> {
    if model_masks.is_empty() {
        bail!(Empty, "no masks to fit the class assignment on");
    }
    if model_masks.len() != gt_masks.len() {
        bail!(ShapeMismatch, "{} model masks for {} ground-truth masks", model_masks.len(), gt_masks.len());
    }
    if n_class == 0 {
        bail!(InvalidArgument, "n_class must be >= 1");
    }
    // predicted[k], joint[k][g]
    let mut predicted = vec![0u64; n_class];
    let mut joint = vec![[0u64; 2]; n_class];
    let mut truth = [0u64; 2];
    for (m, g) in model_masks.iter().zip(gt_masks) {
        if m.shape() != g.shape() {
            bail!(ShapeMismatch, "mask shapes {:?} and {:?} differ", m.shape(), g.shape());
        }
        for (&k, &t) in m.as_slice().iter().zip(g.as_slice()) {
            let k = k as usize;
            if k >= n_class {
                bail!(OutOfRange, "model class {k} outside 0..{n_class}");
            }
            if t > 1 {
                bail!(InvalidArgument, "ground truth value {t} is not binary");
            }
            predicted[k] += 1;
            joint[k][t as usize] += 1;
            truth[t as usize] += 1;
        }
    }
    let mut mapping = Vec::with_capacity(n_class);
    let mut per_class_iou = Vec::with_capacity(n_class);
    for k in 0..n_class {
        let ious = [0, 1].map(|g| {
            OverlapCounts {
                intersection: joint[k][g],
                union: predicted[k] + truth[g] - joint[k][g],
            }
            .iou(epsilon)
        });
        let water = predicted[k] > 0 && ious[1] > ious[0];
        mapping.push(if water { GroundClass::Water } else { GroundClass::Land });
        per_class_iou.push(ious);
    }
    Ok(ClassAssignment { mapping, per_class_iou })
}

pub fn apply_assignment(mask: &ClassMap, assignment: &ClassAssignment) -> Result<BinaryMask> {
    let lut: Vec<u8> = assignment.mapping.iter().map(|g| g.value()).collect();
    let mut out = Vec::with_capacity(mask.len());
    for &k in mask.as_slice() {
        match lut.get(k as usize) {
            Some(&v) => out.push(v),
            None => bail!(OutOfRange, "model class {k} outside 0..{}", lut.len()),
        }
    }
    Grid::from_vec(mask.rows(), mask.cols(), out)
}

/// Water where strictly more than half of the members vote water.
pub fn majority_vote(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let Some(first) = masks.first() else {
        bail!(Empty, "majority vote needs at least one mask");
    };
    let mut votes = vec![0usize; first.len()];
    for m in masks {
        if m.shape() != first.shape() {
            bail!(ShapeMismatch, "mask shapes {:?} and {:?} differ", first.shape(), m.shape());
        }
        for (v, &x) in votes.iter_mut().zip(m.as_slice()) {
            if x > 1 {
                bail!(InvalidArgument, "vote value {x} is not binary");
            }
            *v += x as usize;
        }
    }
    let m = masks.len();
    let data = votes.into_iter().map(|v| (2 * v > m) as u8).collect();
    Grid::from_vec(first.rows(), first.cols(), data)
}

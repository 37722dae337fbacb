//! Batch construction for the three-branch training step: the standard batch,
//! its blurred copy, and the blurred copy in deranged order.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::raster::Tile;
use crate::rng::{rng_from, Rng};

/// Normalized 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel_1d(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) || size == 0 {
        bail!(InvalidArgument, "kernel size must be odd, got {size}");
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        bail!(InvalidArgument, "sigma must be positive, got {sigma}");
    }
    let half = (size / 2) as f64;
    let mut weights: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(weights)
}

/// Index into `0..len` after mirroring about the edges, repeating the edge
/// sample (`cba|abcd|dcb`). With a symmetric kernel this keeps the mean exact.
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let i = i.rem_euclid(2 * n);
    (if i >= n { 2 * n - 1 - i } else { i }) as usize
}

/// Separable Gaussian filter with reflection padding. Requires an odd kernel
/// of at least 3 taps.
pub fn gaussian_blur(pixels: &Grid<f32>, sigma: f64, kernel: usize) -> Result<Grid<f32>> {
    if kernel < 3 {
        bail!(InvalidArgument, "kernel size must be >= 3, got {kernel}");
    }
    let weights = gaussian_kernel_1d(sigma, kernel)?;
    Ok(convolve_separable(pixels, &weights))
}

pub(crate) fn convolve_separable(pixels: &Grid<f32>, weights: &[f64]) -> Grid<f32> {
    let (rows, cols) = pixels.shape();
    if rows == 0 || cols == 0 {
        return pixels.clone();
    }
    let half = (weights.len() / 2) as isize;
    let src = pixels.as_slice();
    let mut horiz = alloc::vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for (t, w) in weights.iter().enumerate() {
                acc += w * row[reflect(c as isize + t as isize - half, cols)] as f64;
            }
            horiz[r * cols + c] = acc;
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (t, w) in weights.iter().enumerate() {
                acc += w * horiz[reflect(r as isize + t as isize - half, rows) * cols + c];
            }
            out.push(acc as f32);
        }
    }
    Grid::from_vec(rows, cols, out).expect("shape preserved")
}

/// A recorded pair of mirror operations. Each flip is its own inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flip {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flip {
    pub fn apply<T: Copy>(&self, grid: &Grid<T>) -> Grid<T> {
        let mut out = grid.clone();
        if self.horizontal {
            out = out.flip_horizontal();
        }
        if self.vertical {
            out = out.flip_vertical();
        }
        out
    }
}

/// `N_batch` equally sized tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBatch {
    pub pixels: Vec<Grid<f32>>,
    pub masks: Option<Vec<Grid<u8>>>,
    pub tile_ids: Vec<String>,
}

impl TileBatch {
    pub fn from_tiles(tiles: &[&Tile]) -> Result<Self> {
        let Some(first) = tiles.first() else {
            bail!(Empty, "a batch needs at least one tile");
        };
        let side = first.side();
        if let Some(t) = tiles.iter().find(|t| t.side() != side) {
            bail!(
                ShapeMismatch,
                "tile {} has side {} but the batch uses {}",
                t.id(),
                t.side(),
                side
            );
        }
        let masks = if tiles.iter().all(|t| t.mask.is_some()) {
            Some(tiles.iter().map(|t| t.mask.clone().unwrap()).collect())
        } else {
            None
        };
        Ok(Self {
            pixels: tiles.iter().map(|t| t.pixels.clone()).collect(),
            masks,
            tile_ids: tiles.iter().map(|t| t.id()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.pixels.first().map_or(0, |p| p.rows())
    }

    /// Pixels as one contiguous `N x S x S` buffer.
    pub fn flat_pixels(&self) -> Vec<f32> {
        self.pixels
            .iter()
            .flat_map(|p| p.as_slice().iter().copied())
            .collect()
    }

    fn reordered(&self, order: &[usize]) -> Self {
        Self {
            pixels: order.iter().map(|&i| self.pixels[i].clone()).collect(),
            masks: self
                .masks
                .as_ref()
                .map(|m| order.iter().map(|&i| m[i].clone()).collect()),
            tile_ids: order.iter().map(|&i| self.tile_ids[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub kernel: usize,
    pub flip_prob: f64,
    /// Apply each tile's flips to both the standard and augmented copies.
    /// Turning this off draws independent flips for the augmented copy.
    pub share_flips: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            sigma_low: 1.0,
            sigma_high: 2.0,
            kernel: 5,
            flip_prob: 0.5,
            share_flips: true,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            bail!(InvalidArgument, "flip probability {} not in [0, 1]", self.flip_prob);
        }
        if !(self.sigma_low > 0.0) || self.sigma_low > self.sigma_high {
            bail!(
                InvalidArgument,
                "blur sigma range [{}, {}] is invalid",
                self.sigma_low,
                self.sigma_high
            );
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            bail!(InvalidArgument, "blur kernel must be odd and >= 3, got {}", self.kernel);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTriplet {
    pub standard: TileBatch,
    pub augmented: TileBatch,
    pub shuffled: TileBatch,
    /// `shuffled[k] == augmented[permutation[k]]`.
    pub permutation: Vec<usize>,
    pub flips: Vec<Flip>,
    pub sigmas: Vec<f64>,
}

/// Uniformly random derangement of `0..n` by rejection (about `e` draws on
/// average).
pub fn random_derangement(n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        bail!(InvalidArgument, "a derangement needs at least 2 elements, got {n}");
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

fn draw_flip(rng: &mut Rng, prob: f64) -> Flip {
    Flip {
        horizontal: rng.random::<f64>() < prob,
        vertical: rng.random::<f64>() < prob,
    }
}

pub fn make_triplet(batch: &TileBatch, seed: u64, spec: &AugmentSpec) -> Result<BatchTriplet> {
    spec.validate()?;
    let n = batch.len();
    if n < 2 {
        bail!(
            InvalidArgument,
            "negative pairs need at least 2 tiles per batch, got {n}"
        );
    }
    let mut rng = rng_from(seed, &[0x7219]);
    let flips: Vec<Flip> = (0..n).map(|_| draw_flip(&mut rng, spec.flip_prob)).collect();
    let aug_flips: Vec<Flip> = if spec.share_flips {
        flips.clone()
    } else {
        (0..n).map(|_| draw_flip(&mut rng, spec.flip_prob)).collect()
    };
    let sigmas: Vec<f64> = (0..n)
        .map(|_| {
            if spec.sigma_high > spec.sigma_low {
                rng.random_range(spec.sigma_low..=spec.sigma_high)
            } else {
                spec.sigma_low
            }
        })
        .collect();
    let permutation = random_derangement(n, &mut rng)?;

    let standard = TileBatch {
        pixels: batch.pixels.iter().zip(&flips).map(|(p, f)| f.apply(p)).collect(),
        masks: batch
            .masks
            .as_ref()
            .map(|m| m.iter().zip(&flips).map(|(m, f)| f.apply(m)).collect()),
        tile_ids: batch.tile_ids.clone(),
    };
    let mut aug_pixels = Vec::with_capacity(n);
    for ((p, f), &sigma) in batch.pixels.iter().zip(&aug_flips).zip(&sigmas) {
        aug_pixels.push(gaussian_blur(&f.apply(p), sigma, spec.kernel)?);
    }
    let augmented = TileBatch {
        pixels: aug_pixels,
        masks: batch
            .masks
            .as_ref()
            .map(|m| m.iter().zip(&aug_flips).map(|(m, f)| f.apply(m)).collect()),
        tile_ids: batch.tile_ids.clone(),
    };
    let shuffled = augmented.reordered(&permutation);
    Ok(BatchTriplet {
        standard,
        augmented,
        shuffled,
        permutation,
        flips,
        sigmas,
    })
}

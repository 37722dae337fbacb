//! Scenes, tiles and dataset splits, plus a speckled synthetic scene
//! generator for desk-scale runs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{convolve_separable, gaussian_kernel_1d};
use crate::error::{bail, Result};
use crate::grid::{BinaryMask, Grid};
use crate::rng::rng_from;

/// How raw backscatter values are mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScalingSpec {
    /// Per-scene min/max. A zero-range scene maps to all zeros.
    MinMax,
    /// Fixed window, values outside are clipped.
    FixedRange { low: f64, high: f64 },
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec::FixedRange {
            low: -30.0,
            high: 0.0,
        }
    }
}

/// The linear map that was actually applied, kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedScaling {
    pub spec: ScalingSpec,
    pub low: f64,
    pub high: f64,
}

impl ScalingSpec {
    pub fn apply(&self, raw: &Grid<f64>) -> Result<(Grid<f32>, AppliedScaling)> {
        let (low, high) = match *self {
            ScalingSpec::MinMax => {
                let finite = raw.as_slice().iter().copied().filter(|v| v.is_finite());
                let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
                if lo > hi {
                    (0.0, 0.0)
                } else {
                    (lo, hi)
                }
            }
            ScalingSpec::FixedRange { low, high } => {
                if !(high > low) {
                    bail!(InvalidArgument, "fixed scaling range [{low}, {high}] is empty");
                }
                (low, high)
            }
        };
        let range = high - low;
        let scaled = raw.map(|v| {
            if !v.is_finite() || range <= 0.0 {
                0.0
            } else {
                ((v - low) / range).clamp(0.0, 1.0) as f32
            }
        });
        Ok((
            scaled,
            AppliedScaling {
                spec: *self,
                low,
                high,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub pixels: Grid<f32>,
    pub mask: Option<BinaryMask>,
    pub pixel_size_m: f64,
    pub scaling: Option<AppliedScaling>,
}

impl Scene {
    /// Builds a scene from unscaled raster values and an optional raw mask.
    pub fn from_raw(
        scene_id: impl Into<String>,
        raw: &Grid<f64>,
        mask: Option<&Grid<f64>>,
        scaling: ScalingSpec,
        pixel_size_m: f64,
    ) -> Result<Self> {
        let mask = match mask {
            Some(m) => {
                if !m.same_shape(raw) {
                    bail!(
                        ShapeMismatch,
                        "mask is {}x{} but scene is {}x{}",
                        m.rows(),
                        m.cols(),
                        raw.rows(),
                        raw.cols()
                    );
                }
                if let Some(v) = m.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
                    bail!(OutOfRange, "mask contains value {v}, expected 0 or 1");
                }
                Some(m.map(|v| v as u8))
            }
            None => None,
        };
        let (pixels, applied) = scaling.apply(raw)?;
        Self::new(scene_id, pixels, mask, pixel_size_m).map(|mut s| {
            s.scaling = Some(applied);
            s
        })
    }

    /// Builds a scene from already-scaled pixels.
    pub fn new(
        scene_id: impl Into<String>,
        pixels: Grid<f32>,
        mask: Option<BinaryMask>,
        pixel_size_m: f64,
    ) -> Result<Self> {
        if let Some(m) = &mask {
            if !m.same_shape(&pixels) {
                bail!(ShapeMismatch, "mask and pixels differ in shape");
            }
            crate::grid::ensure_binary(m, "scene mask")?;
        }
        if pixels.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(OutOfRange, "scaled pixels must lie in [0, 1]");
        }
        if !(pixel_size_m > 0.0) {
            bail!(InvalidArgument, "pixel size must be positive, got {pixel_size_m}");
        }
        Ok(Self {
            scene_id: scene_id.into(),
            pixels,
            mask,
            pixel_size_m,
            scaling: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub scene_id: String,
    pub origin: (usize, usize),
    pub pixels: Grid<f32>,
    pub mask: Option<BinaryMask>,
}

impl Tile {
    pub fn side(&self) -> usize {
        self.pixels.rows()
    }

    pub fn id(&self) -> String {
        format!("{}@{},{}", self.scene_id, self.origin.0, self.origin.1)
    }
}

/// Cuts non-overlapping `side x side` tiles in row-major grid order. Partial
/// tiles at the right and bottom edges are dropped.
pub fn tile_scene(scene: &Scene, side: usize) -> Result<Vec<Tile>> {
    if side < 2 {
        bail!(InvalidArgument, "tile side must be >= 2, got {side}");
    }
    let (rows, cols) = scene.shape();
    let mut tiles = Vec::with_capacity((rows / side) * (cols / side));
    for tr in 0..rows / side {
        for tc in 0..cols / side {
            let origin = (tr * side, tc * side);
            tiles.push(Tile {
                scene_id: scene.scene_id.clone(),
                origin,
                pixels: scene.pixels.crop(origin, side, side)?,
                mask: scene
                    .mask
                    .as_ref()
                    .map(|m| m.crop(origin, side, side))
                    .transpose()?,
            });
        }
    }
    Ok(tiles)
}

/// Region of a `rows x cols` scene covered by whole tiles.
pub fn tiled_extent(rows: usize, cols: usize, side: usize) -> (usize, usize) {
    if side == 0 {
        return (0, 0);
    }
    ((rows / side) * side, (cols / side) * side)
}

/// Pastes per-tile grids back at their origins.
pub fn assemble<T: Copy + Default>(
    extent: (usize, usize),
    parts: &[((usize, usize), Grid<T>)],
) -> Result<Grid<T>> {
    let mut out = Grid::filled(extent.0, extent.1, T::default());
    for (origin, part) in parts {
        out.paste(*origin, part)?;
    }
    Ok(out)
}

/// Indices into a tile list. The three lists are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles tile indices by `seed` and partitions them contiguously.
/// The train count is `floor(train * n)` and the validation boundary is
/// `floor((train + val) * n)`; anything after it becomes test.
pub fn split_dataset(n_tiles: usize, fractions: (f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (train, val) = fractions;
    if n_tiles == 0 {
        bail!(Empty, "cannot split an empty tile list");
    }
    if !(train > 0.0) || val < 0.0 || train + val > 1.0 + 1e-12 {
        bail!(InvalidArgument, "invalid split fractions ({train}, {val})");
    }
    let n = n_tiles as f64;
    let n_train = libm::floor(train * n + 1e-9) as usize;
    let n_train_val = (libm::floor((train + val) * n + 1e-9) as usize).min(n_tiles);
    let mut order: Vec<usize> = (0..n_tiles).collect();
    order.shuffle(&mut rng_from(seed, &[0x5911]));
    Ok(DatasetSplit {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train_val].to_vec(),
        test: order[n_train_val..].to_vec(),
        seed,
    })
}

/// Parameters of a synthetic speckled scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    /// Number of water bodies seeded into the scene; 0 gives a dry scene.
    pub blobs: usize,
    /// Typical blob radius in pixels.
    pub blob_radius: f64,
    /// Amplitude of the smooth noise that roughens blob boundaries.
    pub roughness: f64,
    /// Target share of water pixels.
    pub water_fraction: f64,
    pub land_mean: f64,
    pub water_mean: f64,
    /// Equivalent number of looks; the speckle is Gamma(looks, 1/looks).
    pub looks: f64,
    pub pixel_size_m: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 256,
            blobs: 6,
            blob_radius: 24.0,
            roughness: 0.6,
            water_fraction: 0.25,
            land_mean: 0.55,
            water_mean: 0.15,
            looks: 4.0,
            pixel_size_m: 10.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            bail!(InvalidArgument, "synthetic scene must be non-empty");
        }
        if !(self.water_mean < self.land_mean) {
            bail!(
                InvalidArgument,
                "water mean {} must be below land mean {}",
                self.water_mean,
                self.land_mean
            );
        }
        if !(self.looks > 0.0) {
            bail!(InvalidArgument, "speckle looks must be positive, got {}", self.looks);
        }
        if !(0.0..=1.0).contains(&self.water_fraction) {
            bail!(InvalidArgument, "water fraction {} not in [0, 1]", self.water_fraction);
        }
        if !(self.blob_radius > 0.0) {
            bail!(InvalidArgument, "blob radius must be positive");
        }
        Ok(())
    }
}

fn synth_mask(spec: &SynthSpec, seed: u64) -> Result<BinaryMask> {
    let (rows, cols) = (spec.rows, spec.cols);
    let n_water = libm::round(spec.water_fraction * (rows * cols) as f64) as usize;
    if spec.blobs == 0 || n_water == 0 {
        return Ok(Grid::filled(rows, cols, 0));
    }
    let mut rng = rng_from(seed, &[0xB10B]);
    let centers: Vec<(f64, f64, f64)> = (0..spec.blobs)
        .map(|_| {
            let r = rng.random::<f64>() * rows as f64;
            let c = rng.random::<f64>() * cols as f64;
            let radius = spec.blob_radius * rng.random_range(0.6..1.4);
            (r, c, radius)
        })
        .collect();

    // Smooth unit-variance noise roughens the blob boundaries.
    let white = Grid::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    });
    let smooth_sigma = (spec.blob_radius / 2.0).max(1.0);
    let taps = 2 * libm::ceil(3.0 * smooth_sigma) as usize + 1;
    let noise = convolve_separable(&white, &gaussian_kernel_1d(smooth_sigma, taps)?);
    let noise_sd = {
        let n = noise.len() as f64;
        let mean = noise.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = noise
            .as_slice()
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / n;
        libm::sqrt(var).max(1e-12)
    };

    let field = Grid::from_fn(rows, cols, |r, c| {
        let bumps: f64 = centers
            .iter()
            .map(|&(cr, cc, rad)| {
                let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                let d2 = dr * dr + dc * dc;
                libm::exp(-d2 / (2.0 * rad * rad))
            })
            .sum();
        bumps + spec.roughness * noise.get(r, c) as f64 / noise_sd * 0.25
    });

    // Threshold at the quantile that yields the requested water share.
    let mut order: Vec<usize> = (0..field.len()).collect();
    let values = field.as_slice();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut mask = Grid::filled(rows, cols, 0u8);
    for &idx in &order[..n_water.min(order.len())] {
        mask.as_mut_slice()[idx] = 1;
    }
    Ok(mask)
}

/// Generates a scene whose mean field is `water_mean` inside random blobs and
/// `land_mean` elsewhere, multiplied by unit-mean gamma speckle and clipped to
/// `[0, 1]`.
pub fn generate_synthetic_scene(
    scene_id: impl Into<String>,
    spec: &SynthSpec,
    seed: u64,
) -> Result<Scene> {
    spec.validate()?;
    let mask = synth_mask(spec, seed)?;
    let gamma = Gamma::new(spec.looks, 1.0 / spec.looks)
        .map_err(|e| crate::error::Error::InvalidArgument(format!("speckle: {e}")))?;
    let mut rng = rng_from(seed, &[0x5BEC]);
    let pixels = mask.map(|water| {
        let mean = if water == 1 {
            spec.water_mean
        } else {
            spec.land_mean
        };
        let speckle: f64 = gamma.sample(&mut rng);
        (mean * speckle).clamp(0.0, 1.0) as f32
    });
    Scene::new(scene_id, pixels, Some(mask), spec.pixel_size_m)
}

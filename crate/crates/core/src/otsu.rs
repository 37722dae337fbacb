//! Classical baseline: optional blur, global Otsu threshold, then opening and
//! closing.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur;
use crate::error::{bail, Result};
use crate::grid::{ensure_binary, BinaryMask, Grid};

/// How `iterations` is read for opening and closing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphMode {
    /// Erode `n` times then dilate `n` times (mirrored for closing).
    #[default]
    Stacked,
    /// `n` complete single-step openings (or closings).
    Repeated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtsuConfig {
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub morph_kernel: usize,
    pub morph_iterations: usize,
    pub histogram_bins: usize,
    pub morph_mode: MorphMode,
}

impl Default for OtsuConfig {
    fn default() -> Self {
        Self {
            blur_kernel: 5,
            blur_sigma: 1.1,
            morph_kernel: 3,
            morph_iterations: 7,
            histogram_bins: 256,
            morph_mode: MorphMode::Stacked,
        }
    }
}

impl OtsuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel.is_multiple_of(2) || self.morph_kernel.is_multiple_of(2) {
            bail!(InvalidArgument, "blur and morphology kernels must be odd");
        }
        if self.histogram_bins < 2 {
            bail!(InvalidArgument, "need at least 2 histogram bins");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtsuThreshold {
    /// Pixels whose bin index is below this belong to the dark class.
    pub bin: usize,
    /// Threshold in pixel units.
    pub value: f64,
}

pub fn quantize(v: f32, bins: usize) -> usize {
    let b = libm::floor(v as f64 * bins as f64);
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

/// Histogram of `pixels` over `bins` equal-width bins of `[0, 1]`.
pub fn histogram(pixels: &[f32], bins: usize) -> Vec<u64> {
    let mut hist = vec![0u64; bins];
    for &v in pixels {
        hist[quantize(v, bins)] += 1;
    }
    hist
}

/// Between-class variance at split `t` as the fraction `(num, den)` with
/// `num / den = n0 * n1 * (mu0 - mu1)^2` up to a constant factor.
fn between_class(n0: u64, s0: u64, n1: u64, s1: u64) -> (u128, u128) {
    let a = s0 as u128 * n1 as u128;
    let b = s1 as u128 * n0 as u128;
    let d = a.abs_diff(b);
    (d * d, n0 as u128 * n1 as u128)
}

/// Whether `x` is strictly greater than `y`, both given as fractions.
fn greater(x: (u128, u128), y: (u128, u128)) -> bool {
    match (x.0.checked_mul(y.1), y.0.checked_mul(x.1)) {
        (Some(l), Some(r)) => l > r,
        _ => (x.0 as f64 / x.1 as f64) > (y.0 as f64 / y.1 as f64),
    }
}

/// Threshold maximizing between-class variance; the lowest candidate wins
/// ties. When every pixel falls in a single bin, that bin is returned so that
/// no pixel lies below it.
pub fn otsu_threshold(pixels: &Grid<f32>, bins: usize) -> Result<OtsuThreshold> {
    if pixels.is_empty() {
        bail!(Empty, "cannot threshold an empty image");
    }
    if bins < 2 {
        bail!(InvalidArgument, "need at least 2 histogram bins");
    }
    let hist = histogram(pixels.as_slice(), bins);
    let occupied: Vec<usize> = (0..bins).filter(|&b| hist[b] > 0).collect();
    if occupied.len() == 1 {
        let min = pixels.as_slice().iter().copied().fold(f32::INFINITY, f32::min);
        return Ok(OtsuThreshold { bin: occupied[0], value: min as f64 });
    }
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, (u128, u128))> = None;
    for t in 1..bins {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = between_class(n0, s0, n1, total_s - s0);
        if best.is_none_or(|(_, b)| greater(score, b)) {
            best = Some((t, score));
        }
    }
    let (bin, _) = best.expect("two occupied bins give a valid split");
    Ok(OtsuThreshold { bin, value: bin as f64 / bins as f64 })
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel.is_multiple_of(2) {
        bail!(InvalidArgument, "structuring element must be odd, got {kernel}");
    }
    Ok(())
}

/// Square min (`erode`) or max filter. Neighbours outside the image are
/// ignored, so the border never creates or removes water on its own.
fn rank_filter(mask: &BinaryMask, kernel: usize, erode: bool) -> BinaryMask {
    let (rows, cols) = mask.shape();
    let half = kernel / 2;
    let src = mask.as_slice();
    let pick = |a: u8, b: u8| if erode { a.min(b) } else { a.max(b) };
    let init = if erode { 1u8 } else { 0u8 };
    let mut horiz = vec![init; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(cols - 1);
            horiz[r * cols + c] = src[r * cols + lo..=r * cols + hi].iter().fold(init, |a, &b| pick(a, b));
        }
    }
    Grid::from_fn(rows, cols, |r, c| {
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(rows - 1);
        (lo..=hi).fold(init, |a, rr| pick(a, horiz[rr * cols + c]))
    })
}

pub fn erode(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    check_kernel(kernel)?;
    ensure_binary(mask, "erosion input")?;
    Ok(rank_filter(mask, kernel, true))
}

pub fn dilate(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    check_kernel(kernel)?;
    ensure_binary(mask, "dilation input")?;
    Ok(rank_filter(mask, kernel, false))
}

fn iterate(mask: &BinaryMask, kernel: usize, n: usize, first_erodes: bool, mode: MorphMode) -> Result<BinaryMask> {
    check_kernel(kernel)?;
    ensure_binary(mask, "morphology input")?;
    let mut out = mask.clone();
    let (rounds, per_round) = match mode {
        MorphMode::Stacked => (1, n),
        MorphMode::Repeated => (n, 1),
    };
    if rows_or_cols_empty(mask) {
        return Ok(out);
    }
    for _ in 0..rounds {
        for _ in 0..per_round {
            out = rank_filter(&out, kernel, first_erodes);
        }
        for _ in 0..per_round {
            out = rank_filter(&out, kernel, !first_erodes);
        }
    }
    Ok(out)
}

fn rows_or_cols_empty(mask: &BinaryMask) -> bool {
    mask.rows() == 0 || mask.cols() == 0
}

/// Erosion followed by dilation, `iterations` deep.
pub fn morph_open(mask: &BinaryMask, kernel: usize, iterations: usize, mode: MorphMode) -> Result<BinaryMask> {
    iterate(mask, kernel, iterations, true, mode)
}

/// Dilation followed by erosion, `iterations` deep.
pub fn morph_close(mask: &BinaryMask, kernel: usize, iterations: usize, mode: MorphMode) -> Result<BinaryMask> {
    iterate(mask, kernel, iterations, false, mode)
}

/// Water wherever the pixel's bin lies below the threshold.
pub fn threshold_below(pixels: &Grid<f32>, threshold: &OtsuThreshold, bins: usize) -> BinaryMask {
    pixels.map(|v| (quantize(v, bins) < threshold.bin) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuSegmentation {
    pub mask: BinaryMask,
    pub threshold: OtsuThreshold,
}

/// Full baseline on one image of `[0, 1]` pixels.
pub fn otsu_segment(pixels: &Grid<f32>, cfg: &OtsuConfig, use_pre: bool, use_post: bool) -> Result<OtsuSegmentation> {
    cfg.validate()?;
    let source = if use_pre {
        gaussian_blur(pixels, cfg.blur_sigma, cfg.blur_kernel)?
    } else {
        pixels.clone()
    };
    let threshold = otsu_threshold(&source, cfg.histogram_bins)?;
    let mut mask = threshold_below(&source, &threshold, cfg.histogram_bins);
    if use_post {
        mask = morph_open(&mask, cfg.morph_kernel, cfg.morph_iterations, cfg.morph_mode)?;
        mask = morph_close(&mask, cfg.morph_kernel, cfg.morph_iterations, cfg.morph_mode)?;
    }
    Ok(OtsuSegmentation { mask, threshold })
}

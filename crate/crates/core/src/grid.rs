use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(
                ShapeMismatch,
                "{} values for a {}x{} grid",
                data.len(),
                rows,
                cols
            );
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copies the `rows x cols` window whose top-left corner is `origin`.
    pub fn crop(&self, origin: (usize, usize), rows: usize, cols: usize) -> Result<Self> {
        if origin.0 + rows > self.rows || origin.1 + cols > self.cols {
            bail!(
                OutOfRange,
                "window {}x{} at {:?} exceeds {}x{} grid",
                rows,
                cols,
                origin,
                self.rows,
                self.cols
            );
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in origin.0..origin.0 + rows {
            let start = r * self.cols + origin.1;
            data.extend_from_slice(&self.data[start..start + cols]);
        }
        Ok(Self { rows, cols, data })
    }

    /// Writes `src` into this grid with its top-left corner at `origin`.
    pub fn paste(&mut self, origin: (usize, usize), src: &Grid<T>) -> Result<()> {
        if origin.0 + src.rows > self.rows || origin.1 + src.cols > self.cols {
            bail!(
                OutOfRange,
                "cannot paste {}x{} at {:?} into {}x{}",
                src.rows,
                src.cols,
                origin,
                self.rows,
                self.cols
            );
        }
        for r in 0..src.rows {
            let dst = (origin.0 + r) * self.cols + origin.1;
            self.data[dst..dst + src.cols]
                .copy_from_slice(&src.data[r * src.cols..(r + 1) * src.cols]);
        }
        Ok(())
    }

    /// Mirrors left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self.get(r, self.cols - 1 - c))
    }

    /// Mirrors top-bottom.
    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self.get(self.rows - 1 - r, c))
    }
}

impl<T> Grid<T> {
    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Binary water/land raster: 1 = water, 0 = land.
pub type BinaryMask = Grid<u8>;

/// Per-pixel model class ids.
pub type ClassMap = Grid<u16>;

pub fn ensure_binary(mask: &BinaryMask, what: &str) -> Result<()> {
    if let Some(v) = mask.as_slice().iter().find(|&&v| v > 1) {
        bail!(OutOfRange, "{what} contains non-binary value {v}");
    }
    Ok(())
}

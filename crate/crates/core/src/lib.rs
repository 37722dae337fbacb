//! Self-supervised water/land segmentation of single-channel radar tiles.
//!
//! The crate is `no_std` with `alloc`. Enable the `std` feature for runtime
//! SIMD dispatch in the matrix kernels.

#![no_std]
// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod real;
pub mod rng;
pub mod grid;
pub mod raster;
pub mod augment;
pub mod nn;
pub mod model;
pub mod losses;
pub mod optim;
pub mod metrics;
pub mod postprocess;
pub mod otsu;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BinaryMask, ClassMap, Grid};
pub use real::Real;

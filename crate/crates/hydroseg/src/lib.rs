//! File formats, experiment orchestration and the command line around
//! `hydroseg-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geotiff;
pub mod logs;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};

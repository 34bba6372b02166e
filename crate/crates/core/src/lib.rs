//! Compact volumetric encoding of 3D facial landmarks, a stacked-hourglass
//! voxel regressor chained to a 3D-convolution coordinate regressor, their
//! two-stage training, and the evaluation metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod geometry;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod render;
pub mod scheme;
pub mod training;
pub mod volumetric;

pub use error::{Error, Result};

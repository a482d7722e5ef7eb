//! Hybrid volumetric-textural rendering of an articulated avatar.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod body;
pub mod camera;
pub mod config;
pub mod data;
pub mod error;
pub mod hybrid;
pub mod imageio;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pdnerf;
pub mod posenc;
pub mod raster;
pub mod surface;
pub mod train;

pub use error::{Error, Result};

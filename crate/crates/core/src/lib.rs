//! Learned soft-thresholding feature denoisers with dynamic, instance-conditioned
//! kernels, an iterative refinement network around them, an IoU-weighted
//! regression loss, and a synthetic occlusion benchmark to train and measure
//! them on.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod filter;
pub mod gradsuite;
pub mod harness;
pub mod infn;
pub mod losses;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};

//! Desk-scale precipitation nowcasting: synthetic advected radar scenes, a
//! from-scratch autodiff U-Net predicting quantized rain classes one hour
//! ahead, persistence and optical-flow baselines, and exact per-pixel
//! precision-recall evaluation.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod predfile;
pub mod raster;
pub mod synthgen;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};

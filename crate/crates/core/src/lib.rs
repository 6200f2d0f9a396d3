//! Volumetric self-supervised segmentation toolkit.
//!
//! Contrastive (NT-Xent) pretraining of a 3D convolutional encoder on
//! augmented volume patches, U-Net fine-tuning with a dice objective, and
//! Monte-Carlo dropout inference with several ensemble aggregation rules.
//! Everything runs on a small built-in reverse-mode autodiff engine.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mc;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod segment;
pub mod volume;

pub use error::{Error, Result};

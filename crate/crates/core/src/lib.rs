//! Collaborative refinement training for binary segmentation.
//!
//! A backbone network produces an intermediate probability map, a small
//! fully convolutional head refines it, and training alternates per epoch
//! between an MSE objective on the backbone output and a BCE objective on the
//! refined output.

pub mod backbone;
pub mod data;
pub mod experiments;
pub mod metrics;
mod error;
pub mod nn;
pub mod optim;
pub mod persistence;
pub mod refinement;
pub mod render;
pub mod training;
pub mod tuning;
pub mod types;

pub use error::{Error, Result};

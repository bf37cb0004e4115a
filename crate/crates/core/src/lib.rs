//! Nested multi-scale 3D patch classification: per-scale convolutional
//! encoders, cross-scale latent alignment, staged cross-attention fusion,
//! two-stage training, evaluation metrics and Grad-CAM attribution.

pub mod alignment;
pub mod attribution;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod numerics;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};

//! Volumetric super-resolution with 3D shifted-window transformers.
//!
//! The crate bundles a small reverse-mode autodiff engine, the dual-embedding
//! 3D Swin model, a k-space degradation pipeline that turns high-resolution
//! volumes into low-resolution training inputs, and volumetric quality
//! metrics.

pub mod autodiff;
pub mod data;
pub mod degrade;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod oracle;
pub mod selftest;
pub mod swin3d;
pub mod tensor;
pub mod train;
pub mod volume;

pub use autodiff::{finite_diff_grad, grad_rel_error, Gradients, Tape, Var};
pub use error::{ConfigError, TensorError, TrainError, VolumeError};
pub use kernels::trilinear_resize;
pub use tensor::{Scalar, Tensor};
pub use metrics::{MetricReport, Psnr};
pub use swin3d::{ModelConfig, SuperFormer, Variant};
pub use train::{Checkpoint, TrainConfig, Trainer};
pub use volume::Volume;

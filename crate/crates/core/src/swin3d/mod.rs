//! Dual-embedding 3D shifted-window transformer for volumetric
//! super-resolution.

pub mod config;
pub mod model;
pub mod params;
pub mod window;

pub use config::{ModelConfig, Variant};
pub use model::{
    deep_feature_extract, patch_embed, rstb_forward, stl_forward, superformer_forward, wmsa, AttnContext, AttnParams,
    ModelError, SuperFormer,
};
pub use params::{param_count, param_specs, BoundParams, ParamStore};
pub use window::{build_shift_mask, window_partition, window_reverse, RelativePositionIndex, MASK_NEG};

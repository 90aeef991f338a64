//! The multi-stage feature pyramid: backbone, multi-map fusion, stacked
//! U-shaped stages, channel-reducing pooling and scale-wise concatenation
//! with channel attention.

mod attention;
mod backbone;
mod config;
mod feature;
mod ftd;
mod fusion;
mod net;
mod oun;

pub use attention::{ChannelAttention, Sfc, SfcOutput};
pub use backbone::Backbone;
pub use config::{PyramidConfig, UpsampleMode};
pub use feature::{FeatureMap, FeaturePyramid};
pub use ftd::{Ftd, PyramidPool};
pub use fusion::{fuse_deep_to_shallow, FmfV1, FmfV2};
pub use net::{PyramidNet, PyramidOutput};
pub use oun::{multi_stage_pyramid, multi_stage_with, Oun};

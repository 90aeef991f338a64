use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolation used by every upscaling step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Nearest,
}

/// Widths and depths of the multi-stage pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub input_size: usize,
    /// Output channels of the four backbone stages (strides 1, 2, 4, 8).
    pub backbone_channels: Vec<usize>,
    /// Number of stacked U-shaped stages `L`.
    pub num_ouns: usize,
    /// Down/up pairs per stage.
    pub oun_depth: usize,
    /// Channels per scale `NC`.
    pub scale_channels: usize,
    /// Bottleneck ratio `r` of channel attention.
    pub attention_reduction: usize,
    /// Levels `N` of feature pyramid pooling.
    pub pool_levels: usize,
    pub upsample: UpsampleMode,
}

impl PyramidConfig {
    /// The small configuration used for desk-scale experiments.
    pub fn desk() -> Self {
        PyramidConfig {
            input_size: 64,
            backbone_channels: vec![16, 32, 64, 128],
            num_ouns: 2,
            oun_depth: 3,
            scale_channels: 32,
            attention_reduction: 8,
            pool_levels: 3,
            upsample: UpsampleMode::Nearest,
        }
    }

    /// Full-size widths at `input_size` 320 or 512.
    pub fn full(input_size: usize) -> Self {
        PyramidConfig {
            input_size,
            backbone_channels: vec![64, 256, 512, 1024],
            num_ouns: 6,
            oun_depth: 5,
            scale_channels: 256,
            attention_reduction: 8,
            pool_levels: 3,
            upsample: UpsampleMode::Nearest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.backbone_channels.len() != 4 || self.backbone_channels.contains(&0) {
            return fail(format!(
                "backbone_channels must list four positive widths, got {:?}",
                self.backbone_channels
            ));
        }
        if self.num_ouns == 0 || self.oun_depth == 0 || self.pool_levels == 0 {
            return fail("num_ouns, oun_depth and pool_levels must be positive".into());
        }
        if self.scale_channels == 0 || self.scale_channels % 2 != 0 {
            return fail(format!("scale_channels must be positive and even, got {}", self.scale_channels));
        }
        if self.attention_reduction == 0 || self.scale_channels % self.attention_reduction != 0 {
            return fail(format!(
                "attention_reduction {} must divide scale_channels {}",
                self.attention_reduction, self.scale_channels
            ));
        }
        if self.pool_levels > self.oun_depth + 1 {
            return fail(format!(
                "pool_levels {} exceeds the {} pyramid scales",
                self.pool_levels,
                self.oun_depth + 1
            ));
        }
        let divisor = 1usize << self.oun_depth.max(3);
        if self.input_size == 0 || self.input_size % divisor != 0 {
            return fail(format!(
                "input_size {} must be divisible by {divisor}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Spatial extents of the pyramid scales, finest first.
    pub fn scale_sizes(&self) -> Vec<usize> {
        (0..=self.oun_depth).map(|i| self.input_size >> i).collect()
    }

    /// Channels of each pooled low-dimensional level, `D/(N−1)` rounded down
    /// with a minimum of one.
    pub fn pool_channels(&self) -> usize {
        (self.scale_channels / (self.pool_levels.max(2) - 1)).max(1)
    }

    /// Width each backbone tap is compressed to before multi-map fusion.
    pub fn fusion_width(&self) -> usize {
        self.scale_channels / 2
    }

    /// Spatial extent of the deepest backbone stage.
    pub fn conv4_size(&self) -> usize {
        self.input_size / 8
    }
}

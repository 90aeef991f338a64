use rand::Rng;

use crate::autodiff::{Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, PRelu};
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::{FeatureMap, FeaturePyramid};

/// Softmax-normalized channel reweighting from globally pooled statistics
/// through a bottleneck of ratio `r`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub fc1: Dense,
    pub act: PRelu,
    pub fc2: Dense,
}

impl ChannelAttention {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "attention reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelAttention {
            channels,
            fc1: Dense::new(format!("{prefix}.fc1"), channels, hidden).without_bias(),
            act: PRelu::new(format!("{prefix}.act"), hidden),
            fc2: Dense::new(format!("{prefix}.fc2"), hidden, channels).without_bias().with_gain(1.0),
        })
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.act.init(store)?;
        self.fc2.init(store, rng)
    }

    /// Returns the reweighted input and the activation `A` (`[N, C]`).
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<(Var, Var)> {
        if tape.shape(x).get(1) != Some(&self.channels) {
            return Err(Error::shape(
                "channel_attention",
                format!("expected {} channels, got {:?}", self.channels, tape.shape(x)),
            ));
        }
        let gp = tape.global_pool(x, Reduce::Mean)?;
        let h = self.fc1.forward(tape, gp)?;
        let h = self.act.forward(tape, h)?;
        let logits = self.fc2.forward(tape, h)?;
        let a = tape.softmax(logits, 1)?;
        Ok((tape.mul_channel(x, a)?, a))
    }
}

/// Per-scale concatenation across stages, channel attention, projection to
/// `NC`, and the pooled skip connections on the finest scales.
#[derive(Clone, Debug)]
pub struct Sfc {
    pub stages: usize,
    pub channels: usize,
    pub attention: Vec<ChannelAttention>,
    pub project: Vec<Conv2d>,
    pub skip: Vec<Conv2d>,
}

/// Output of [`Sfc::forward`].
#[derive(Clone, Debug)]
pub struct SfcOutput {
    pub pyramid: FeaturePyramid,
    /// Attention activation per scale.
    pub attention: Vec<Var>,
}

impl Sfc {
    pub fn new(
        prefix: &str,
        scales: usize,
        stages: usize,
        channels: usize,
        reduction: usize,
        skip_channels: usize,
        skip_levels: usize,
    ) -> Result<Self> {
        let wide = stages * channels;
        Ok(Sfc {
            stages,
            channels,
            attention: (0..scales)
                .map(|i| ChannelAttention::new(&format!("{prefix}{i}.attn"), wide, reduction))
                .collect::<Result<_>>()?,
            // A near-uniform attention scales every channel by about 1/wide.
            project: (0..scales)
                .map(|i| {
                    Conv2d::pointwise(format!("{prefix}{i}.project"), wide, channels)
                        .with_gain(std::f64::consts::SQRT_2 * wide as f64)
                })
                .collect(),
            skip: (0..skip_levels.min(scales))
                .map(|i| Conv2d::pointwise(format!("{prefix}{i}.skip"), skip_channels, channels))
                .collect(),
        })
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        for a in &self.attention {
            a.init(store, rng)?;
        }
        self.project.iter().chain(&self.skip).try_for_each(|c| c.init(store, rng))
    }

    /// `skips` holds one map per skip level, usually `concat(F_H[i], F_L[i])`.
    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<'_, E>,
        stages: &[FeaturePyramid],
        skips: &[Var],
    ) -> Result<SfcOutput> {
        if stages.len() != self.stages {
            return Err(Error::shape(
                "sfc",
                format!("expected {} stages, got {}", self.stages, stages.len()),
            ));
        }
        if skips.len() != self.skip.len() {
            return Err(Error::shape(
                "sfc",
                format!("expected {} skip maps, got {}", self.skip.len(), skips.len()),
            ));
        }
        let ladder = stages[0].ladder(tape)?;
        for s in stages {
            if s.ladder(tape)? != ladder {
                return Err(Error::shape("sfc", "stages have different scale ladders"));
            }
        }
        if ladder.len() != self.attention.len() {
            return Err(Error::shape(
                "sfc",
                format!("expected {} scales, got {}", self.attention.len(), ladder.len()),
            ));
        }
        let mut maps = Vec::with_capacity(ladder.len());
        let mut attention = Vec::with_capacity(ladder.len());
        for i in 0..ladder.len() {
            let parts: Vec<Var> = stages.iter().map(|s| s.maps[i].var).collect();
            let cat = tape.concat(&parts, 1)?;
            let (weighted, a) = self.attention[i].forward(tape, cat)?;
            let mut y = self.project[i].forward(tape, weighted)?;
            if let Some(conv) = self.skip.get(i) {
                let s = conv.forward(tape, skips[i])?;
                y = tape.add(y, s)?;
            }
            maps.push(FeatureMap {
                var: tape.relu(y)?,
                scale_index: i,
            });
            attention.push(a);
        }
        Ok(SfcOutput {
            pyramid: FeaturePyramid {
                maps,
                stage: self.stages,
            },
            attention,
        })
    }
}

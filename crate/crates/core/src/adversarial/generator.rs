use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::pyramid::{PyramidConfig, PyramidNet, PyramidOutput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Residual feature generator: `x_fm = conv4 + Ĝ(features, noise)`, where
/// `Ĝ` is the pyramid network followed by a 1×1 head over all scales
/// resized to the conv4 extents.
#[derive(Clone, Debug)]
pub struct Generator {
    pub pyramid: PyramidNet,
    pub head: Conv2d,
    conv4: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub x_fm: Var,
    pub residual: Var,
    pub pyramid: PyramidOutput,
}

/// `[n, 1, size, size]` noise from U[−1, 1].
pub fn sample_noise<E: Scalar>(n: usize, size: usize, rng: &mut impl Rng) -> Tensor<E> {
    Tensor::uniform(&[n, 1, size, size], -1.0, 1.0, rng)
}

impl Generator {
    pub const HEAD_GAIN: f64 = 0.5;

    pub fn new(cfg: &PyramidConfig, prefix: &str) -> Result<Self> {
        let pyramid = PyramidNet::new(cfg, prefix)?;
        let scales = cfg.oun_depth + 1;
        let c4 = cfg.backbone_channels[3];
        Ok(Generator {
            pyramid,
            head: Conv2d::pointwise(format!("{prefix}.head"), scales * cfg.scale_channels, c4).with_gain(Self::HEAD_GAIN),
            conv4: (c4, cfg.conv4_size()),
        })
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.pyramid.init(store, rng)?;
        self.head.init(store, rng)
    }

    /// `features` are the backbone stages; the noise channel matches `b1`.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, features: [Var; 4], noise: Var) -> Result<GeneratorOutput> {
        let conv4 = features[3];
        let (c4, s4) = self.conv4;
        match *tape.shape(conv4) {
            [_, c, h, w] if c == c4 && h == s4 && w == s4 => {}
            ref s => {
                return Err(Error::shape(
                    "generator",
                    format!("conv4 features should be [N, {c4}, {s4}, {s4}], got {s:?}"),
                ))
            }
        }
        let pyramid = self.pyramid.forward(tape, features, noise)?;
        let resized = pyramid
            .pyramid
            .vars()
            .into_iter()
            .map(|m| tape.resize_to(m, (s4, s4)))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat(&resized, 1)?;
        let residual = self.head.forward(tape, cat)?;
        let x_fm = tape.add(conv4, residual)?;
        Ok(GeneratorOutput { x_fm, residual, pyramid })
    }
}

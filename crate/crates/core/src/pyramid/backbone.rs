use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::PyramidConfig;

/// Four 3×3 convolution stages with ReLU at strides 1, 2, 4 and 8.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub input_size: usize,
    pub convs: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(cfg: &PyramidConfig) -> Self {
        let ch = &cfg.backbone_channels;
        let convs = (0..4)
            .map(|i| {
                let cin = if i == 0 { 3 } else { ch[i - 1] };
                Conv2d::new(format!("backbone.conv{}", i + 1), cin, ch[i], 3, if i == 0 { 1 } else { 2 })
            })
            .collect();
        Backbone {
            input_size: cfg.input_size,
            convs,
        }
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.convs.iter().try_for_each(|c| c.init(store, rng))
    }

    /// Stage outputs `b1..b4`; `b4` is the conv4 feature map.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, image: Var) -> Result<[Var; 4]> {
        match *tape.shape(image) {
            [_, 3, h, w] if h == self.input_size && w == self.input_size => {}
            ref s => {
                return Err(Error::shape(
                    "backbone",
                    format!("expected [N, 3, {0}, {0}], got {s:?}", self.input_size),
                ))
            }
        }
        let mut out = [image; 4];
        let mut x = image;
        for (slot, conv) in out.iter_mut().zip(&self.convs) {
            let y = conv.forward(tape, x)?;
            x = tape.relu(y)?;
            *slot = x;
        }
        Ok(out)
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Upsample-then-convolve stack: each stage doubles the extents.
#[derive(Clone, Debug)]
struct UpStack {
    cin: usize,
    stages: Vec<Conv2d>,
    head: Conv2d,
}

impl UpStack {
    fn new(prefix: &str, cin: usize, widths: &[usize], outputs: usize) -> Result<Self> {
        if cin == 0 || outputs == 0 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "head `{prefix}` needs positive widths, got {cin} -> {widths:?} -> {outputs}"
            )));
        }
        let mut c = cin;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv2d::new(format!("{prefix}.up{}", i + 1), c, w, 3, 1);
                c = w;
                conv
            })
            .collect();
        Ok(UpStack {
            cin,
            stages,
            head: Conv2d::pointwise(format!("{prefix}.out"), c, outputs).with_gain(1.0),
        })
    }

    fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        for s in &self.stages {
            s.init(store, rng)?;
        }
        self.head.init(store, rng)
    }

    fn factor(&self) -> usize {
        1 << self.stages.len()
    }

    fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var, op: &'static str) -> Result<Var> {
        match *tape.shape(x) {
            [_, c, _, _] if c == self.cin => {}
            ref s => return Err(Error::shape(op, format!("expected [N, {}, H, W], got {s:?}", self.cin))),
        }
        let mut h = x;
        for s in &self.stages {
            h = tape.upsample_nearest(h, 2)?;
            h = s.forward(tape, h)?;
            h = tape.relu(h)?;
        }
        self.head.forward(tape, h)
    }
}

/// Pixel classifier `T`: conv4-shaped features to per-pixel class logits at
/// `factor()` times the feature extents.
#[derive(Clone, Debug)]
pub struct Classifier {
    stack: UpStack,
    pub classes: usize,
}

impl Classifier {
    pub fn new(prefix: &str, cin: usize, widths: &[usize], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        Ok(Classifier {
            stack: UpStack::new(prefix, cin, widths, classes)?,
            classes,
        })
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.stack.init(store, rng)
    }

    pub fn factor(&self) -> usize {
        self.stack.factor()
    }

    /// Logits `[N, classes, f·H, f·W]`.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, features: Var) -> Result<Var> {
        self.stack.forward(tape, features, "classifier")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderOutput {
    Linear,
    #[default]
    Sigmoid,
}

/// Recovers images from generator features.
#[derive(Clone, Debug)]
pub struct Decoder {
    stack: UpStack,
    pub output: DecoderOutput,
    pub channels: usize,
}

impl Decoder {
    pub fn new(prefix: &str, cin: usize, widths: &[usize], channels: usize, output: DecoderOutput) -> Result<Self> {
        Ok(Decoder {
            stack: UpStack::new(prefix, cin, widths, channels)?,
            output,
            channels,
        })
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.stack.init(store, rng)
    }

    pub fn factor(&self) -> usize {
        self.stack.factor()
    }

    /// Name of the final 1×1 weight, `[channels, cin_last, 1, 1]`.
    pub fn out_weight_name(&self) -> String {
        self.stack.head.weight_name()
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, features: Var) -> Result<Var> {
        let y = self.stack.forward(tape, features, "decoder")?;
        match self.output {
            DecoderOutput::Linear => Ok(y),
            DecoderOutput::Sigmoid => tape.sigmoid(y),
        }
    }
}

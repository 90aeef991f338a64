use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorMode {
    #[default]
    Fc,
    Patch,
}

/// How patch decisions combine into one probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchReduce {
    #[default]
    Mean,
    /// The least real-looking patch decides.
    Min,
}

/// Log-probabilities `[N]` of "real" and of "generated".
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    pub log_real: Var,
    pub log_fake: Var,
}

/// Elementwise arithmetic mean of equally shaped samples.
pub fn minibatch_average<E: Scalar>(samples: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("minibatch average of an empty list".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::shape(
                "minibatch_average",
                format!("{:?} vs {:?}", s.shape(), first.shape()),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(s.data()) {
            *a += v.as_f64();
        }
    }
    let n = samples.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| E::from_f64(v / n)).collect())
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub mode: DiscriminatorMode,
    pub reduce: PatchReduce,
    /// Per-sample input shape `[C, H, W]` before minibatch concatenation.
    pub input: [usize; 3],
    pub fc: Vec<Dense>,
    pub convs: Vec<Conv2d>,
    pub head_fc: Option<Dense>,
    pub head_conv: Option<Conv2d>,
}

impl Discriminator {
    /// Fc mode uses all three `widths`; patch mode uses `widths[2]` channels
    /// in its two 3×3 convolutions.
    pub fn new(prefix: &str, mode: DiscriminatorMode, input: [usize; 3], widths: [usize; 3]) -> Result<Self> {
        if input.contains(&0) || widths.contains(&0) {
            return Err(Error::Config(format!(
                "discriminator needs positive sizes, got input {input:?} widths {widths:?}"
            )));
        }
        let doubled = 2 * input[0];
        let mut d = Discriminator {
            mode,
            reduce: PatchReduce::Mean,
            input,
            fc: Vec::new(),
            convs: Vec::new(),
            head_fc: None,
            head_conv: None,
        };
        match mode {
            DiscriminatorMode::Fc => {
                let mut fan_in = doubled * input[1] * input[2];
                for (i, &w) in widths.iter().enumerate() {
                    d.fc.push(Dense::new(format!("{prefix}.fc{}", i + 1), fan_in, w));
                    fan_in = w;
                }
                d.head_fc = Some(Dense::new(format!("{prefix}.head"), fan_in, 2).with_gain(1.0));
            }
            DiscriminatorMode::Patch => {
                let w = widths[2];
                d.convs.push(Conv2d::new(format!("{prefix}.conv1"), doubled, w, 3, 1));
                d.convs.push(Conv2d::new(format!("{prefix}.conv2"), w, w, 3, 1));
                d.head_conv = Some(Conv2d::pointwise(format!("{prefix}.head"), w, 2).with_gain(1.0));
            }
        }
        Ok(d)
    }

    pub fn with_reduce(mut self, reduce: PatchReduce) -> Self {
        self.reduce = reduce;
        self
    }

    /// Channels seen by the first layer: the sample plus its batch mean.
    pub fn input_channels(&self) -> usize {
        2 * self.input[0]
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        for l in &self.fc {
            l.init(store, rng)?;
        }
        for c in &self.convs {
            c.init(store, rng)?;
        }
        if let Some(h) = &self.head_fc {
            h.init(store, rng)?;
        }
        if let Some(h) = &self.head_conv {
            h.init(store, rng)?;
        }
        Ok(())
    }

    /// Concatenates the batch mean onto every sample.
    pub fn with_batch_mean<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        let n = self.check_input(tape, x)?;
        let mean = tape.batch_mean(x)?;
        let x_bar = tape.repeat_batch(mean, n)?;
        tape.concat(&[x, x_bar], 1)
    }

    fn check_input<E: Scalar>(&self, tape: &Tape<'_, E>, x: Var) -> Result<usize> {
        match *tape.shape(x) {
            [n, c, h, w] if [c, h, w] == self.input && n > 0 => Ok(n),
            ref s => Err(Error::shape(
                "discriminator",
                format!("expected [N, {}, {}, {}], got {s:?}", self.input[0], self.input[1], self.input[2]),
            )),
        }
    }

    /// Scores a batch against its own minibatch mean.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<DiscOutput> {
        let paired = self.with_batch_mean(tape, x)?;
        self.forward_paired(tape, paired)
    }

    /// Scores `x` paired with an explicit `x̄` of the same shape.
    pub fn forward_with_mean<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var, x_bar: Var) -> Result<DiscOutput> {
        self.check_input(tape, x)?;
        if tape.shape(x) != tape.shape(x_bar) {
            return Err(Error::shape(
                "discriminator",
                format!("x {:?} and x̄ {:?} differ", tape.shape(x), tape.shape(x_bar)),
            ));
        }
        let paired = tape.concat(&[x, x_bar], 1)?;
        self.forward_paired(tape, paired)
    }

    fn forward_paired<E: Scalar>(&self, tape: &mut Tape<'_, E>, paired: Var) -> Result<DiscOutput> {
        let n = tape.shape(paired)[0];
        match self.mode {
            DiscriminatorMode::Fc => {
                let mut h = tape.flatten(paired)?;
                for l in &self.fc {
                    h = l.forward(tape, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                }
                let logits = self.head_fc.as_ref().expect("fc head").forward(tape, h)?;
                let lp = tape.log_softmax(logits, 1)?;
                let real = tape.slice(lp, 1, 1, 1)?;
                let fake = tape.slice(lp, 1, 0, 1)?;
                Ok(DiscOutput {
                    log_real: tape.reshape(real, &[n])?,
                    log_fake: tape.reshape(fake, &[n])?,
                })
            }
            DiscriminatorMode::Patch => {
                let mut h = paired;
                for c in &self.convs {
                    h = c.forward(tape, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                }
                let logits = self.head_conv.as_ref().expect("patch head").forward(tape, h)?;
                let lp = tape.log_softmax(logits, 1)?;
                let real = tape.slice(lp, 1, 1, 1)?;
                let fake = tape.slice(lp, 1, 0, 1)?;
                let (log_real, log_fake) = match self.reduce {
                    PatchReduce::Mean => {
                        let pr = tape.exp(real)?;
                        let pf = tape.exp(fake)?;
                        let mr = tape.global_pool(pr, Reduce::Mean)?;
                        let mf = tape.global_pool(pf, Reduce::Mean)?;
                        (tape.log(mr)?, tape.log(mf)?)
                    }
                    PatchReduce::Min => (
                        tape.global_pool(real, Reduce::Min)?,
                        tape.global_pool(fake, Reduce::Max)?,
                    ),
                };
                Ok(DiscOutput {
                    log_real: tape.reshape(log_real, &[n])?,
                    log_fake: tape.reshape(log_fake, &[n])?,
                })
            }
        }
    }

    /// Probability of "real" per sample.
    pub fn probabilities<E: Scalar>(tape: &Tape<'_, E>, out: &DiscOutput) -> Vec<f64> {
        tape.value(out.log_real).data().iter().map(|v| v.as_f64().exp()).collect()
    }
}

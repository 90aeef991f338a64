//! Parameterized layers. Each layer owns parameter names and shapes;
//! `init` registers freshly initialized tensors in a [`ParamStore`] and
//! `forward` binds them on a [`Tape`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform initialization with bound `gain·sqrt(3 / fan_in)`.
fn scaled_uniform<E: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<E> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub gain: f64,
}

impl Conv2d {
    /// A `kernel × kernel` convolution with "same" padding and a bias.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            bias: true,
            gain: RELU_GAIN,
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, 1)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Scales the initialization bound; 1 suits layers not followed by a
    /// rectifier.
    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        let fan_in = self.cin * self.kernel * self.kernel;
        let shape = [self.cout, self.cin, self.kernel, self.kernel];
        store.insert(self.weight_name(), scaled_uniform(&shape, fan_in, self.gain, rng))?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.cout]))?;
        }
        Ok(())
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        let k = tape.param(&self.weight_name())?;
        let y = tape.conv2d(x, k, self.stride, self.pad)?;
        if self.bias {
            let b = tape.param(&self.bias_name())?;
            tape.add_channel_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
    pub gain: f64,
}

impl Dense {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Dense {
            name: name.into(),
            inputs,
            outputs,
            bias: true,
            gain: RELU_GAIN,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        let shape = [self.outputs, self.inputs];
        store.insert(self.weight_name(), scaled_uniform(&shape, self.inputs, self.gain, rng))?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.outputs]))?;
        }
        Ok(())
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight_name())?;
        let b = if self.bias {
            Some(tape.param(&self.bias_name())?)
        } else {
            None
        };
        tape.dense(x, w, b)
    }
}

/// Batch normalization over the channel axis with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>) -> Result<()> {
        let c = [self.channels];
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&c))?;
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&c))?;
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&c))?;
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::ones(&c))?;
        Ok(())
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        tape.batch_norm(x, &self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PRelu {
    pub name: String,
    pub channels: usize,
    pub init_slope: f64,
}

impl PRelu {
    /// One slope per channel, initialized to 0.25.
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        PRelu {
            name: name.into(),
            channels,
            init_slope: 0.25,
        }
    }

    pub fn slope_name(&self) -> String {
        format!("{}.slope", self.name)
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>) -> Result<()> {
        store.insert(
            self.slope_name(),
            Tensor::full(&[self.channels], E::from_f64(self.init_slope)),
        )
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        let a = tape.param(&self.slope_name())?;
        tape.prelu(x, a)
    }
}

/// Registers a trainable one-element parameter.
pub fn init_scalar<E: Scalar>(store: &mut ParamStore<E>, name: impl Into<String>, value: f64) -> Result<()> {
    store.insert(name, Tensor::from_parts(vec![1], vec![E::from_f64(value)]))
}

/// Checks that `v` is `[N, channels, size, size]`.
pub fn expect_map<E: Scalar>(tape: &Tape<'_, E>, v: Var, op: &'static str, channels: usize, size: usize) -> Result<()> {
    match *tape.shape(v) {
        [_, c, h, w] if c == channels && h == size && w == size => Ok(()),
        ref s => Err(Error::shape(
            op,
            format!("expected [N, {channels}, {size}, {size}], got {s:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamFilter;

    #[test]
    fn layers_register_expected_parameters() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv2d::new("c", 3, 8, 3, 2).init(&mut store, &mut rng).unwrap();
        Dense::new("d", 4, 2).without_bias().init(&mut store, &mut rng).unwrap();
        BatchNorm::new("bn", 8).init(&mut store).unwrap();
        PRelu::new("p", 8).init(&mut store).unwrap();
        let names: Vec<_> = store.names().collect();
        assert_eq!(
            names,
            [
                "bn.beta",
                "bn.gamma",
                "bn.running_mean",
                "bn.running_var",
                "c.bias",
                "c.weight",
                "d.weight",
                "p.slope"
            ]
        );
        assert_eq!(store.get("c.weight").unwrap().shape(), &[8, 3, 3, 3]);
        let bound = (2.0f32 * 3.0 / 27.0).sqrt();
        assert!(store.get("c.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(Conv2d::new("c", 3, 8, 3, 2).init(&mut store, &mut rng).is_err());
    }

    #[test]
    fn conv_layer_forward_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 3, 8, 3, 2);
        conv.init(&mut store, &mut rng).unwrap();
        let mut tape = Tape::with_params(&store, ParamFilter::All);
        let x = tape.constant(Tensor::zeros(&[2, 3, 16, 16]));
        let y = conv.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 8, 8]);
        assert!(expect_map(&tape, y, "t", 8, 8).is_ok());
        assert!(expect_map(&tape, y, "t", 8, 16).is_err());
    }
}

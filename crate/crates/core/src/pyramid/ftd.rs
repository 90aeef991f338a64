use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, PRelu};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Channel-reducing 1×1 → 3×3 → 1×1 stack, each convolution followed by
/// batch normalization and PReLU.
#[derive(Clone, Debug)]
pub struct Ftd {
    pub cin: usize,
    pub cout: usize,
    pub convs: [Conv2d; 3],
    pub norms: [BatchNorm; 3],
    pub acts: [PRelu; 3],
}

impl Ftd {
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        let mid = (cin / 2).max(1);
        let widths = [(cin, mid, 1), (mid, mid, 3), (mid, cout, 1)];
        let convs = [0, 1, 2].map(|i| {
            let (a, b, k) = widths[i];
            Conv2d::new(format!("{prefix}.conv{}", i + 1), a, b, k, 1).without_bias()
        });
        let norms = [0, 1, 2].map(|i| BatchNorm::new(format!("{prefix}.bn{}", i + 1), widths[i].1));
        let acts = [0, 1, 2].map(|i| PRelu::new(format!("{prefix}.act{}", i + 1), widths[i].1));
        Ftd {
            cin,
            cout,
            convs,
            norms,
            acts,
        }
    }

    /// The halving variant; odd channel counts are rejected.
    pub fn halving(prefix: &str, cin: usize) -> Result<Self> {
        if cin == 0 || cin % 2 != 0 {
            return Err(Error::Config(format!("channel halving needs an even count, got {cin}")));
        }
        Ok(Self::new(prefix, cin, cin / 2))
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        for i in 0..3 {
            self.convs[i].init(store, rng)?;
            self.norms[i].init(store)?;
            self.acts[i].init(store)?;
        }
        Ok(())
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        let mut y = x;
        for i in 0..3 {
            y = self.convs[i].forward(tape, y)?;
            y = self.norms[i].forward(tape, y)?;
            y = self.acts[i].forward(tape, y)?;
        }
        Ok(y)
    }
}

/// Feature pyramid pooling: `F_H` by repeated 2×2 average pooling and `F_L`
/// by an FTD per level.
#[derive(Clone, Debug)]
pub struct PyramidPool {
    pub levels: Vec<Ftd>,
}

impl PyramidPool {
    pub fn new(prefix: &str, channels: usize, levels: usize, low_channels: usize) -> Self {
        PyramidPool {
            levels: (0..levels)
                .map(|n| Ftd::new(&format!("{prefix}.ftd{n}"), channels, low_channels))
                .collect(),
        }
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.levels.iter().try_for_each(|f| f.init(store, rng))
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = self.levels.len();
        if n == 0 {
            return Err(Error::Config("pyramid pooling needs at least one level".into()));
        }
        match *tape.shape(x) {
            [_, _, h, w] if h % (1 << (n - 1)) == 0 && w % (1 << (n - 1)) == 0 => {}
            ref s => {
                return Err(Error::shape(
                    "pyramid_pool",
                    format!("{s:?} not divisible by 2^{}", n - 1),
                ))
            }
        }
        let mut high = vec![x];
        for _ in 1..n {
            let prev = *high.last().expect("non-empty");
            high.push(tape.avg_pool(prev, 2, 2)?);
        }
        let low = self
            .levels
            .iter()
            .zip(&high)
            .map(|(ftd, &h)| ftd.forward(tape, h))
            .collect::<Result<Vec<_>>>()?;
        Ok((high, low))
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::init_scalar;
use crate::params::{AdamConfig, ParamFilter, ParamStore};
use crate::tensor::Tensor;

use super::{descend, domain_objective, generator_loss, Discriminator, DiscriminatorMode, GeneratorLoss};

/// One-dimensional Gaussian matching: the generator adds a learnable shift to
/// standard normal noise and the discriminator sees samples of a
/// `N(target_mean, 1)` distribution as real.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftToyConfig {
    pub target_mean: f64,
    pub initial_shift: f64,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub disc_widths: [usize; 3],
    pub generator_loss: GeneratorLoss,
    pub seed: u64,
}

impl Default for ShiftToyConfig {
    fn default() -> Self {
        ShiftToyConfig {
            target_mean: 2.0,
            initial_shift: 0.0,
            steps: 500,
            batch: 64,
            adam: AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
            disc_widths: [16, 16, 8],
            generator_loss: GeneratorLoss::NonSaturating,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftToyTrace {
    /// Generator shift after each alternating step.
    pub shifts: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
}

impl ShiftToyTrace {
    pub fn final_shift(&self) -> f64 {
        self.shifts.last().copied().unwrap_or(f64::NAN)
    }
}

const SHIFT: &str = "gen.shift";

/// Runs `steps` alternations of one discriminator and one generator update.
pub fn shift_toy(cfg: &ShiftToyConfig) -> Result<ShiftToyTrace> {
    let disc = Discriminator::new("disc", DiscriminatorMode::Fc, [1, 1, 1], cfg.disc_widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f64>::new();
    disc.init(&mut store, &mut rng)?;
    init_scalar(&mut store, SHIFT, cfg.initial_shift)?;
    let d_group = ParamFilter::prefixes(&["disc."]);
    let g_group = ParamFilter::prefixes(&[SHIFT]);
    let shape = [cfg.batch, 1, 1, 1];
    let mut trace = ShiftToyTrace { shifts: Vec::new(), d_loss: Vec::new(), g_loss: Vec::new() };
    for _ in 0..cfg.steps {
        let real = Tensor::<f64>::normal(&shape, 1.0, &mut rng).map(|v| v + cfg.target_mean);
        let z = Tensor::<f64>::normal(&shape, 1.0, &mut rng);
        let shift = store.get(SHIFT).expect("shift").item()?;
        let fake = z.map(|v| v + shift);
        let d = descend(&mut store, &d_group, &cfg.adam, false, |t| {
            let r = t.constant(real);
            let f = t.constant(fake);
            let dr = disc.forward(t, r)?;
            let df = disc.forward(t, f)?;
            let obj = domain_objective(t, &dr, &df)?;
            t.neg(obj)
        })?;
        let z = Tensor::<f64>::normal(&shape, 1.0, &mut rng);
        let g = descend(&mut store, &g_group, &cfg.adam, false, |t| {
            let s = t.param(SHIFT)?;
            let zv = t.constant(z);
            let s4 = t.reshape(s, &[1, 1, 1, 1])?;
            let s_b = t.repeat_batch(s4, cfg.batch)?;
            let x = t.add(zv, s_b)?;
            let df = disc.forward(t, x)?;
            generator_loss(t, &df, cfg.generator_loss)
        })?;
        trace.d_loss.push(d);
        trace.g_loss.push(g);
        trace.shifts.push(store.get(SHIFT).expect("shift").item()?);
    }
    Ok(trace)
}

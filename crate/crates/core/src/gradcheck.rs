//! Central finite-difference verification of tape gradients at 64-bit.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamFilter, ParamStore};
use crate::tensor::Tensor;

/// Step divisor for re-estimating a coordinate whose first estimate fails,
/// which shrinks the window in which a kink can contaminate the difference.
const REFINE: f64 = 10.0;

/// Settings of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Perturbation size.
    pub h: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Largest fraction of coordinates that may be skipped as kinks.
    pub max_skip_fraction: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_skip_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `(argument name, flat index)`.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree (a kink lies within `h`).
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

enum Target {
    Input(usize),
    Param(String),
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck {
            tol,
            ..Self::default()
        }
    }

    /// Compares gradients of `f` with respect to every input and every
    /// trainable entry of `store` against central differences.
    ///
    /// `f` receives a fresh tape bound to (a perturbed copy of) `store` and
    /// the input leaves, and returns a scalar loss.
    pub fn run<F>(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
    {
        let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::with_params(store, ParamFilter::Nothing);
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            tape.value(loss).item()
        };

        let mut tape = Tape::with_params(store, ParamFilter::All);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        let f0 = tape.value(loss).item()?;

        let mut targets: Vec<(Target, Tensor<f64>)> = Vec::new();
        for (i, &v) in vars.iter().enumerate() {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            targets.push((Target::Input(i), g));
        }
        for (name, g) in tape.param_grads() {
            targets.push((Target::Param(name), g));
        }
        drop(tape);

        let mut report = GradCheckReport::default();
        for (target, analytic) in targets {
            let label = match &target {
                Target::Input(i) => format!("input{i}"),
                Target::Param(n) => n.clone(),
            };
            for idx in 0..analytic.len() {
                let probe = |delta: f64| -> Result<f64> {
                    match &target {
                        Target::Input(i) => {
                            let mut perturbed = inputs.to_vec();
                            perturbed[*i].data_mut()[idx] += delta;
                            eval(store, &perturbed)
                        }
                        Target::Param(name) => {
                            let mut s = store.clone();
                            let mut value = s.get(name).expect("bound parameter").clone();
                            value.data_mut()[idx] += delta;
                            s.set(name, value)?;
                            eval(&s, inputs)
                        }
                    }
                };
                let fp = probe(self.h)?;
                let fm = probe(-self.h)?;
                let central = (fp - fm) / (2.0 * self.h);
                let a = analytic.data()[idx];
                let rel = |c: f64| (a - c).abs() / a.abs().max(c.abs()).max(self.floor);
                let mut err = rel(central);
                if err > self.tol {
                    let fine = self.h / REFINE;
                    err = err.min(rel((probe(fine)? - probe(-fine)?) / (2.0 * fine)));
                }
                if err > self.tol {
                    let forward = (fp - f0) / self.h;
                    let backward = (f0 - fm) / self.h;
                    let kink = (forward - backward).abs() > 1e-2 * forward.abs().max(backward.abs()).max(1e-2);
                    if kink {
                        report.skipped += 1;
                        continue;
                    }
                }
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((label.clone(), idx));
                }
            }
        }
        let total = report.checked + report.skipped;
        if total > 0 && report.skipped as f64 > self.max_skip_fraction * total as f64 {
            return Err(Error::Invalid(format!(
                "gradient check skipped {} of {total} coordinates as kinks",
                report.skipped
            )));
        }
        Ok(report)
    }

    /// [`GradCheck::run`] without parameters.
    pub fn run_inputs<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
    {
        self.run(&ParamStore::new(), inputs, f)
    }
}

/// Reduces a node to a scalar with fixed pseudo-random weights so that every
/// output element contributes a distinct amount to the loss.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |i| {
        let t = (i as f64 + 1.0) * 0.618_033_988_749_895;
        (t - t.floor()) * 2.0 - 1.0
    });
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DiscOutput;

/// Generator objective against a frozen discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorLoss {
    /// Minimize `−mean log D(fake)`.
    #[default]
    NonSaturating,
    /// Minimize `mean log(1 − D(fake))`.
    Saturating,
}

/// `mean log p_target + mean log(1 − p_fake)` on plain probabilities.
pub fn domain_loss(p_target: &[f64], p_fake: &[f64]) -> Result<f64> {
    if p_target.is_empty() || p_fake.is_empty() {
        return Err(Error::Invalid("domain loss needs both batches non-empty".into()));
    }
    if let Some(p) = p_target.iter().chain(p_fake).find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain { op: "domain_loss", detail: format!("probability {p} outside [0, 1]") });
    }
    let real = p_target.iter().map(|p| p.ln()).sum::<f64>() / p_target.len() as f64;
    let fake = p_fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / p_fake.len() as f64;
    let loss = real + fake;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { op: "domain_loss" })
    }
}

/// Differentiable domain loss from discriminator outputs on target reals
/// and generated features.
pub fn domain_objective<E: Scalar>(tape: &mut Tape<'_, E>, real: &DiscOutput, fake: &DiscOutput) -> Result<Var> {
    let r = tape.mean(real.log_real)?;
    let f = tape.mean(fake.log_fake)?;
    tape.add(r, f)
}

pub fn generator_loss<E: Scalar>(tape: &mut Tape<'_, E>, fake: &DiscOutput, kind: GeneratorLoss) -> Result<Var> {
    match kind {
        GeneratorLoss::NonSaturating => {
            let m = tape.mean(fake.log_real)?;
            tape.neg(m)
        }
        GeneratorLoss::Saturating => tape.mean(fake.log_fake),
    }
}

/// Feature-extractor objective on target reals against a frozen
/// discriminator: `−mean log(1 − D(real))`, or `mean log D(real)` in the
/// saturating form.
pub fn target_alignment_loss<E: Scalar>(tape: &mut Tape<'_, E>, real: &DiscOutput, kind: GeneratorLoss) -> Result<Var> {
    match kind {
        GeneratorLoss::NonSaturating => {
            let m = tape.mean(real.log_fake)?;
            tape.neg(m)
        }
        GeneratorLoss::Saturating => tape.mean(real.log_real),
    }
}

/// Pixel-averaged cross-entropy of the source branch plus that of the
/// adapted branch when present.
pub fn task_loss<E: Scalar>(
    tape: &mut Tape<'_, E>,
    logits_source: Var,
    logits_adapted: Option<Var>,
    labels: &[usize],
) -> Result<Var> {
    let s = tape.softmax_cross_entropy(logits_source, labels)?;
    match logits_adapted {
        Some(a) => {
            let a = tape.softmax_cross_entropy(a, labels)?;
            tape.add(s, a)
        }
        None => Ok(s),
    }
}

/// `domain + λ·task`.
pub fn combined_objective<E: Scalar>(tape: &mut Tape<'_, E>, domain: Var, task: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("task weight must be finite and >= 0, got {lambda}")));
    }
    let t = tape.scale(task, lambda)?;
    tape.add(domain, t)
}

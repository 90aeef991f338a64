use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_scalar, Conv2d};
use crate::params::ParamStore;
use crate::scalar::Scalar;

fn spatial<E: Scalar>(tape: &Tape<'_, E>, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [_, _, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

/// Deep-to-shallow weighted fusion over maps ordered shallow to deep:
/// `b'_last = b_last` and `b'_l = w_l·b_l + α_l·up(b'_{l+1})`.
///
/// `w` and `alpha` are one-element nodes, one per level except the deepest.
pub fn fuse_deep_to_shallow<E: Scalar>(
    tape: &mut Tape<'_, E>,
    maps: &[Var],
    w: &[Var],
    alpha: &[Var],
) -> Result<Vec<Var>> {
    if maps.is_empty() || w.len() + 1 != maps.len() || alpha.len() + 1 != maps.len() {
        return Err(Error::Invalid(format!(
            "fusion over {} maps needs {} weights and coefficients, got {} and {}",
            maps.len(),
            maps.len().saturating_sub(1),
            w.len(),
            alpha.len()
        )));
    }
    let mut fused = maps.to_vec();
    for l in (0..maps.len() - 1).rev() {
        let target = spatial(tape, maps[l], "fuse_deep_to_shallow")?;
        let deeper = tape.resize_to(fused[l + 1], target)?;
        let own = tape.mul_scalar_var(maps[l], w[l])?;
        let carried = tape.mul_scalar_var(deeper, alpha[l])?;
        fused[l] = tape.add(own, carried)?;
    }
    Ok(fused)
}

/// Fusion of backbone stages 2, 3 and 4 into the base feature at the stage-2
/// scale.
#[derive(Clone, Debug)]
pub struct FmfV1 {
    pub prefix: String,
    pub compress: [Conv2d; 3],
    pub project: Conv2d,
}

impl FmfV1 {
    pub fn new(prefix: &str, inputs: [usize; 3], width: usize, out: usize) -> Self {
        let compress = [0, 1, 2].map(|i| Conv2d::pointwise(format!("{prefix}.compress{}", i + 2), inputs[i], width));
        FmfV1 {
            prefix: prefix.to_string(),
            compress,
            project: Conv2d::pointwise(format!("{prefix}.project"), 3 * width, out),
        }
    }

    fn w_name(&self, i: usize) -> String {
        format!("{}.w{i}", self.prefix)
    }

    fn alpha_name(&self, i: usize) -> String {
        format!("{}.alpha{i}", self.prefix)
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        for c in &self.compress {
            c.init(store, rng)?;
        }
        self.project.init(store, rng)?;
        for i in 0..2 {
            init_scalar(store, self.w_name(i), 1.0)?;
            init_scalar(store, self.alpha_name(i), 0.5)?;
        }
        Ok(())
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, taps: [Var; 3]) -> Result<Var> {
        let (h, w) = spatial(tape, taps[0], "fmf_v1")?;
        for (i, factor) in [(1, 2), (2, 4)] {
            if spatial(tape, taps[i], "fmf_v1")? != (h / factor, w / factor) || h % factor != 0 {
                return Err(Error::shape(
                    "fmf_v1",
                    format!("inputs must be in 1:2:4 scale ratio, got {:?}", taps.map(|t| tape.shape(t).to_vec())),
                ));
            }
        }
        let mut compressed = Vec::with_capacity(3);
        for (conv, &x) in self.compress.iter().zip(&taps) {
            let y = conv.forward(tape, x)?;
            compressed.push(tape.relu(y)?);
        }
        let mut w = Vec::with_capacity(2);
        let mut a = Vec::with_capacity(2);
        for i in 0..2 {
            w.push(tape.param(&self.w_name(i))?);
            a.push(tape.param(&self.alpha_name(i))?);
        }
        let fused = fuse_deep_to_shallow(tape, &compressed, &w, &a)?;
        let mid = tape.upsample_nearest(fused[1], 2)?;
        let deep = tape.upsample_nearest(fused[2], 4)?;
        let cat = tape.concat(&[fused[0], mid, deep], 1)?;
        self.project.forward(tape, cat)
    }
}

/// Fusion of the base feature with the finest output of the previous stage.
#[derive(Clone, Debug)]
pub struct FmfV2 {
    pub base: Conv2d,
    pub prev: Conv2d,
}

impl FmfV2 {
    pub fn new(prefix: &str, channels: usize) -> Self {
        FmfV2 {
            base: Conv2d::pointwise(format!("{prefix}.base"), channels, channels / 2),
            prev: Conv2d::pointwise(format!("{prefix}.prev"), channels, channels - channels / 2),
        }
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.base.init(store, rng)?;
        self.prev.init(store, rng)
    }

    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, base: Var, prev_largest: Var) -> Result<Var> {
        let (sb, sp) = (spatial(tape, base, "fmf_v2")?, spatial(tape, prev_largest, "fmf_v2")?);
        if sb != sp {
            return Err(Error::shape("fmf_v2", format!("scale mismatch {sb:?} vs {sp:?}")));
        }
        let a = self.base.forward(tape, base)?;
        let a = tape.relu(a)?;
        let b = self.prev.forward(tape, prev_largest)?;
        let b = tape.relu(b)?;
        tape.concat(&[a, b], 1)
    }
}

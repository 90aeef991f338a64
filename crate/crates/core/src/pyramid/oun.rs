use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::{FeatureMap, FeaturePyramid, FmfV2};

/// U-shaped stage: `depth` stride-2 3×3 convolutions down, then nearest
/// upsampling with lateral addition and a 1×1 convolution per level up.
#[derive(Clone, Debug)]
pub struct Oun {
    pub stage: usize,
    pub channels: usize,
    pub down: Vec<Conv2d>,
    pub up: Vec<Conv2d>,
}

impl Oun {
    pub fn new(prefix: &str, stage: usize, channels: usize, depth: usize) -> Self {
        Oun {
            stage,
            channels,
            down: (0..depth)
                .map(|i| Conv2d::new(format!("{prefix}.down{i}"), channels, channels, 3, 2))
                .collect(),
            up: (0..depth)
                .map(|i| Conv2d::pointwise(format!("{prefix}.up{i}"), channels, channels))
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.down.iter().chain(&self.up).try_for_each(|c| c.init(store, rng))
    }

    /// Emits `depth + 1` scales, finest first.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<FeaturePyramid> {
        let size = match *tape.shape(x) {
            [_, c, h, w] if c == self.channels && h == w => h,
            ref s => {
                return Err(Error::shape(
                    "oun",
                    format!("expected square [N, {}, S, S], got {s:?}", self.channels),
                ))
            }
        };
        if size % (1 << self.depth()) != 0 {
            return Err(Error::shape(
                "oun",
                format!("size {size} not divisible by 2^{}", self.depth()),
            ));
        }
        let mut lateral = vec![x];
        for conv in &self.down {
            let y = conv.forward(tape, *lateral.last().expect("non-empty"))?;
            lateral.push(tape.relu(y)?);
        }
        let mut outputs = vec![*lateral.last().expect("non-empty")];
        for i in (0..self.depth()).rev() {
            let up = tape.upsample_nearest(outputs[0], 2)?;
            let sum = tape.add(up, lateral[i])?;
            let y = self.up[i].forward(tape, sum)?;
            outputs.insert(0, tape.relu(y)?);
        }
        Ok(FeaturePyramid {
            maps: outputs
                .into_iter()
                .enumerate()
                .map(|(scale_index, var)| FeatureMap { var, scale_index })
                .collect(),
            stage: self.stage,
        })
    }
}

/// The stage recurrence: stage 1 sees `x_ini`; stage `l > 1` sees
/// `fuse(x_ini, largest map of stage l−1)`.
pub fn multi_stage_with<S, F>(x_ini: Var, stages: usize, mut stage: S, mut fuse: F) -> Result<Vec<FeaturePyramid>>
where
    S: FnMut(usize, Var) -> Result<FeaturePyramid>,
    F: FnMut(usize, Var, Var) -> Result<Var>,
{
    if stages == 0 {
        return Err(Error::Invalid("at least one stage is required".into()));
    }
    let mut out: Vec<FeaturePyramid> = Vec::with_capacity(stages);
    for l in 0..stages {
        let input = match out.last() {
            None => x_ini,
            Some(prev) => fuse(l, x_ini, prev.largest()?)?,
        };
        out.push(stage(l, input)?);
    }
    Ok(out)
}

/// Runs stacked stages with the fusion of `fmfs[l−1]` before stage `l`.
pub fn multi_stage_pyramid<E: Scalar>(
    tape: &mut Tape<'_, E>,
    x_ini: Var,
    ouns: &[Oun],
    fmfs: &[FmfV2],
) -> Result<Vec<FeaturePyramid>> {
    if fmfs.len() + 1 != ouns.len() {
        return Err(Error::Invalid(format!(
            "{} stages need {} fusions, got {}",
            ouns.len(),
            ouns.len().saturating_sub(1),
            fmfs.len()
        )));
    }
    let tape = std::cell::RefCell::new(tape);
    multi_stage_with(
        x_ini,
        ouns.len(),
        |l, x| ouns[l].forward(&mut tape.borrow_mut(), x),
        |l, base, prev| fmfs[l - 1].forward(&mut tape.borrow_mut(), base, prev),
    )
}

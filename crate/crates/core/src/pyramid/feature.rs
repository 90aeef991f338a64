use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A feature map on a tape together with its pyramid scale (0 = finest).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub scale_index: usize,
}

/// Per-scale maps of one stage, ordered fine to coarse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub maps: Vec<FeatureMap>,
    pub stage: usize,
}

impl FeaturePyramid {
    pub fn vars(&self) -> Vec<Var> {
        self.maps.iter().map(|m| m.var).collect()
    }

    /// The finest map.
    pub fn largest(&self) -> Result<Var> {
        self.maps
            .first()
            .map(|m| m.var)
            .ok_or_else(|| Error::Invalid("empty pyramid".into()))
    }

    /// Spatial extents per scale, checking the shared-width halving ladder.
    pub fn ladder<E: Scalar>(&self, tape: &Tape<'_, E>) -> Result<Vec<usize>> {
        let mut sizes = Vec::with_capacity(self.maps.len());
        let mut width = None;
        for (i, m) in self.maps.iter().enumerate() {
            let &[_, c, h, w] = tape.shape(m.var) else {
                return Err(Error::shape("pyramid", format!("scale {i} is not NCHW")));
            };
            if h != w || m.scale_index != i {
                return Err(Error::shape("pyramid", format!("scale {i} is {h}x{w} at index {}", m.scale_index)));
            }
            if *width.get_or_insert(c) != c {
                return Err(Error::shape("pyramid", format!("scale {i} has {c} channels")));
            }
            if let Some(&prev) = sizes.last() {
                if prev != 2 * h {
                    return Err(Error::shape("pyramid", format!("scale {i} is {h}, previous {prev}")));
                }
            }
            sizes.push(h);
        }
        Ok(sizes)
    }

    /// Channel count shared by every scale.
    pub fn channels<E: Scalar>(&self, tape: &Tape<'_, E>) -> Result<usize> {
        self.ladder(tape)?;
        Ok(tape.shape(self.largest()?)[1])
    }
}

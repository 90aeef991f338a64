//! Segmentation and distribution metrics.

mod boundary;
mod fid;
mod partition;
mod report;

pub use boundary::{bde, bde_masks, boundary_of};
pub use fid::{embed_backbone, embed_pooled, fid, gaussian_stats, GaussianStats};
pub use partition::{contingency, gce, pri, voi, Contingency, LogBase};
pub use report::{evaluate, Aggregate, EvalItem, ImageMetrics, MetricsReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel label map, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Invalid(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        Ok(SegMask { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: u32) -> Self {
        SegMask { width, height, labels: vec![label; width * height] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    fn same_dims(&self, other: &SegMask, op: &str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Invalid(format!(
                "{op}: mask dimensions differ ({}x{} vs {}x{})",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &SegMask, gt: &SegMask, class_id: u32) -> Result<ConfusionCounts> {
    pred.same_dims(gt, "confusion")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p == class_id, g == class_id) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `TP / (TP + FP + FN)`; an empty union is an error.
pub fn iou(c: &ConfusionCounts) -> Result<f64> {
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        return Err(Error::Invalid("iou of an empty union".into()));
    }
    Ok(c.tp as f64 / union as f64)
}

/// 8-connected components of the pixels equal to `class_id`; returns a
/// component index per pixel (`None` off-class) and the component sizes.
pub fn components(mask: &SegMask, class_id: u32) -> (Vec<Option<usize>>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let mut comp = vec![None; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.labels[start] != class_id || comp[start].is_some() {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = Some(id);
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask.labels[q] == class_id && comp[q].is_none() {
                        comp[q] = Some(id);
                        stack.push(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Weighted sums `(iTP, FP, iFN)` for instance-size weighted IoU.
pub(crate) fn instance_terms(pred: &SegMask, gt: &SegMask, class_id: u32) -> Result<(f64, f64, f64)> {
    pred.same_dims(gt, "iiou")?;
    let (comp, sizes) = components(gt, class_id);
    if sizes.is_empty() {
        return Err(Error::Invalid("iiou needs at least one ground-truth instance".into()));
    }
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    let mut hit = vec![0usize; sizes.len()];
    let mut fp = 0usize;
    for (i, &p) in pred.labels.iter().enumerate() {
        match (comp[i], p == class_id) {
            (Some(k), true) => hit[k] += 1,
            (None, true) => fp += 1,
            _ => {}
        }
    }
    let (mut itp, mut ifn) = (0.0, 0.0);
    for (k, &s) in sizes.iter().enumerate() {
        let weight = mean / s as f64;
        itp += weight * hit[k] as f64;
        ifn += weight * (s - hit[k]) as f64;
    }
    Ok((itp, fp as f64, ifn))
}

/// IoU with true-positive and false-negative counts of each ground-truth
/// instance weighted by `mean instance size / instance size`.
pub fn iiou(pred: &SegMask, gt: &SegMask, class_id: u32) -> Result<f64> {
    let (itp, fp, ifn) = instance_terms(pred, gt, class_id)?;
    Ok(itp / (itp + fp + ifn))
}

#[cfg(test)]
mod tests;

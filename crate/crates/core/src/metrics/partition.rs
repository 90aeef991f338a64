use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SegMask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    fn ln_factor(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Two => std::f64::consts::LN_2,
        }
    }
}

/// Joint label counts of two masks over the same pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub n: u64,
    /// `n_ij` keyed by `(label in g, label in t)`.
    pub joint: BTreeMap<(u32, u32), u64>,
    pub rows: BTreeMap<u32, u64>,
    pub cols: BTreeMap<u32, u64>,
}

pub fn contingency(g: &SegMask, t: &SegMask) -> Result<Contingency> {
    g.same_dims(t, "contingency")?;
    let mut joint = BTreeMap::new();
    let mut rows = BTreeMap::new();
    let mut cols = BTreeMap::new();
    for (&a, &b) in g.labels.iter().zip(&t.labels) {
        *joint.entry((a, b)).or_insert(0) += 1;
        *rows.entry(a).or_insert(0) += 1;
        *cols.entry(b).or_insert(0) += 1;
    }
    Ok(Contingency { n: g.len() as u64, joint, rows, cols })
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Rand index: the fraction of pixel pairs on which both masks agree about
/// being in the same segment or in different ones.
pub fn pri(g: &SegMask, t: &SegMask) -> Result<f64> {
    let c = contingency(g, t)?;
    if c.n < 2 {
        return Err(Error::Invalid("pri needs at least two pixels".into()));
    }
    let total = pairs(c.n);
    let same_both: u128 = c.joint.values().map(|&v| pairs(v)).sum();
    let same_g: u128 = c.rows.values().map(|&v| pairs(v)).sum();
    let same_t: u128 = c.cols.values().map(|&v| pairs(v)).sum();
    let agree = total + 2 * same_both - same_g - same_t;
    Ok(agree as f64 / total as f64)
}

/// Variation of information `H(g) + H(t) − 2 I(g; t)`, as the sum of the two
/// conditional entropies.
pub fn voi(g: &SegMask, t: &SegMask, base: LogBase) -> Result<f64> {
    let c = contingency(g, t)?;
    if c.n == 0 {
        return Ok(0.0);
    }
    let n = c.n as f64;
    let mut acc = 0.0;
    for (&(a, b), &nij) in &c.joint {
        let pij = nij as f64 / n;
        let pi = c.rows[&a] as f64 / n;
        let pj = c.cols[&b] as f64 / n;
        acc -= pij * ((pij / pj).ln() + (pij / pi).ln());
    }
    Ok((acc / base.ln_factor()).max(0.0))
}

/// Global consistency error.
pub fn gce(g: &SegMask, t: &SegMask) -> Result<f64> {
    let c = contingency(g, t)?;
    if c.n == 0 {
        return Err(Error::Invalid("gce of an empty mask".into()));
    }
    let (mut gt, mut tg) = (0.0, 0.0);
    for (&(a, b), &nij) in &c.joint {
        let (ai, bj, nij) = (c.rows[&a] as f64, c.cols[&b] as f64, nij as f64);
        gt += nij * (ai - nij) / ai;
        tg += nij * (bj - nij) / bj;
    }
    Ok(gt.min(tg) / c.n as f64)
}

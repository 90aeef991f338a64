//! Orthonormal 2×2-block pyramid decomposition and kernel-density
//! log-likelihood over its levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Block entries `(a, b, c, d)` are top-left, top-right, bottom-left,
/// bottom-right. Each row is one orthonormal detail direction.
pub const DETAIL_BASIS: [[f64; 4]; 3] = [
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// `coarse` is `[C, H/2^M, W/2^M]` block means; `details[k]` is
/// `[C, 3, H/2^(k+1), W/2^(k+1)]` detail coefficients of step `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    pub coarse: Tensor<f64>,
    pub details: Vec<Tensor<f64>>,
    /// Shape of the decomposed image, `[H, W]` or `[C, H, W]`.
    pub shape: Vec<usize>,
}

impl LaplacianPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Coarse map after step `k` (`k = 0` is the image itself).
    pub fn scale(&self, k: usize) -> Result<Tensor<f64>> {
        if k > self.levels() {
            return Err(Error::Invalid(format!("scale {k} of a {}-level pyramid", self.levels())));
        }
        let mut l = self.coarse.clone();
        for h in self.details[k..].iter().rev() {
            l = merge(&l, h)?;
        }
        Ok(l)
    }

    pub fn scaled(&self, a: f64) -> Self {
        LaplacianPyramid {
            coarse: self.coarse.map(|v| a * v),
            details: self.details.iter().map(|h| h.map(|v| a * v)).collect(),
            shape: self.shape.clone(),
        }
    }
}

fn as_chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape("decompose", format!("expected [H, W] or [C, H, W], got {s:?}"))),
    }
}

/// One decomposition step of a `[C, H, W]` map.
fn split(l: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let s = l.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (h2, w2) = (h / 2, w / 2);
    let x = l.data();
    let mut mean = vec![0.0; c * h2 * w2];
    let mut det = vec![0.0; c * 3 * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let at = |di: usize, dj: usize| x[(ch * h + 2 * i + di) * w + 2 * j + dj];
                let block = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                mean[(ch * h2 + i) * w2 + j] = block.iter().sum::<f64>() / 4.0;
                for (k, basis) in DETAIL_BASIS.iter().enumerate() {
                    det[((ch * 3 + k) * h2 + i) * w2 + j] = basis.iter().zip(&block).map(|(b, v)| b * v).sum();
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![c, h2, w2], mean),
        Tensor::from_parts(vec![c, 3, h2, w2], det),
    )
}

/// Inverse of [`split`].
fn merge(l: &Tensor<f64>, d: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = l.shape();
    let (c, h2, w2) = match *s {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Invalid(format!("malformed pyramid level {s:?}"))),
    };
    if d.shape() != [c, 3, h2, w2] {
        return Err(Error::Invalid(format!(
            "detail level {:?} does not match coarse level {s:?}",
            d.shape()
        )));
    }
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![0.0; c * h * w];
    let (lv, dv) = (l.data(), d.data());
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let m = lv[(ch * h2 + i) * w2 + j];
                let coef: [f64; 3] = std::array::from_fn(|k| dv[((ch * 3 + k) * h2 + i) * w2 + j]);
                for (e, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let detail: f64 = (0..3).map(|k| coef[k] * DETAIL_BASIS[k][e]).sum();
                    out[(ch * h + 2 * i + di) * w + 2 * j + dj] = m + detail;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// `levels` recursive 2×2 steps; extents must be divisible by `2^levels`.
pub fn decompose(image: &Tensor<f64>, levels: usize) -> Result<LaplacianPyramid> {
    let (c, h, w) = as_chw(image.shape())?;
    let div = 1usize.checked_shl(levels as u32).filter(|&d| d <= h.max(1) && d <= w.max(1));
    match div {
        Some(d) if h % d == 0 && w % d == 0 => {}
        _ => {
            return Err(Error::Invalid(format!(
                "{h}x{w} image is not divisible by 2^{levels}"
            )))
        }
    }
    let mut l = image.clone().reshape(&[c, h, w])?;
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (next, d) = split(&l);
        details.push(d);
        l = next;
    }
    Ok(LaplacianPyramid {
        coarse: l,
        details,
        shape: image.shape().to_vec(),
    })
}

pub fn reconstruct(p: &LaplacianPyramid) -> Result<Tensor<f64>> {
    let img = p.scale(0)?;
    let (c, h, w) = as_chw(&p.shape).map_err(|_| Error::Invalid(format!("malformed pyramid shape {:?}", p.shape)))?;
    if img.shape() != [c, h, w] {
        return Err(Error::Invalid(format!(
            "pyramid reconstructs {:?}, declared {:?}",
            img.shape(),
            p.shape
        )));
    }
    img.reshape(&p.shape)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log` of the Gaussian-kernel density `(1/N) Σ exp(−‖x − x_i‖²/σ)`,
/// times `(πσ)^(−d/2)` when `normalized`. Stable for far-away queries.
pub fn kde_log_density(x: &[f64], samples: &[Vec<f64>], sigma: f64, normalized: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("kernel density needs at least one sample".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("bandwidth must be positive, got {sigma}")));
    }
    let mut exps = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() != x.len() {
            return Err(Error::shape("kde", format!("sample of length {} for query of length {}", s.len(), x.len())));
        }
        exps.push(-squared_distance(x, s) / sigma);
    }
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
    let mut log = max + (sum / samples.len() as f64).ln();
    if normalized {
        log -= 0.5 * x.len() as f64 * (std::f64::consts::PI * sigma).ln();
    }
    if log.is_finite() {
        Ok(log)
    } else {
        Err(Error::NonFinite { op: "kde" })
    }
}

pub fn kde_density(x: &[f64], samples: &[Vec<f64>], sigma: f64, normalized: bool) -> Result<f64> {
    kde_log_density(x, samples, sigma, normalized).map(f64::exp)
}

/// Median pairwise squared distance, or 1 when it is zero or undefined.
pub fn median_bandwidth(samples: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            d.push(squared_distance(&samples[i], &samples[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Samples and bandwidth of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeLevel {
    pub samples: Vec<Vec<f64>>,
    pub sigma: f64,
}

/// Per-level kernel densities: `coarse` over `l_M` and `levels[m]` over the
/// concatenation `(l_(m+1), h_m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub levels: usize,
    pub shape: Vec<usize>,
    pub coarse: KdeLevel,
    pub detail_levels: Vec<KdeLevel>,
    pub normalized: bool,
}

fn joint(p: &LaplacianPyramid, m: usize) -> Result<Vec<f64>> {
    let mut v = p.scale(m + 1)?.into_data();
    v.extend_from_slice(p.details[m].data());
    Ok(v)
}

impl KdeModel {
    /// Fits on `images` of one shape. `sigmas` overrides the median
    /// heuristic: the coarse bandwidth first, then one per detail level.
    pub fn fit(images: &[Tensor<f64>], levels: usize, sigmas: Option<&[f64]>, normalized: bool) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Invalid("likelihood model needs at least one training image".into()))?;
        let shape = first.shape().to_vec();
        if let Some(s) = sigmas {
            if s.len() != levels + 1 {
                return Err(Error::Config(format!("{} bandwidths for {} levels", s.len(), levels + 1)));
            }
            if let Some(bad) = s.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("bandwidth must be positive, got {bad}")));
            }
        }
        let mut pyramids = Vec::with_capacity(images.len());
        for img in images {
            if img.shape() != shape.as_slice() {
                return Err(Error::shape("kde_fit", format!("{:?} vs {shape:?}", img.shape())));
            }
            pyramids.push(decompose(img, levels)?);
        }
        let sigma_at = |i: usize, samples: &[Vec<f64>]| sigmas.map_or_else(|| median_bandwidth(samples), |s| s[i]);
        let coarse: Vec<Vec<f64>> = pyramids.iter().map(|p| p.coarse.data().to_vec()).collect();
        let coarse = KdeLevel { sigma: sigma_at(0, &coarse), samples: coarse };
        let mut detail_levels = Vec::with_capacity(levels);
        for m in 0..levels {
            let samples = pyramids.iter().map(|p| joint(p, m)).collect::<Result<Vec<_>>>()?;
            detail_levels.push(KdeLevel { sigma: sigma_at(m + 1, &samples), samples });
        }
        Ok(KdeModel { levels, shape, coarse, detail_levels, normalized })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub coarse: f64,
    /// One term per detail level, finest first.
    pub levels: Vec<f64>,
    pub total: f64,
}

/// `log q_M(l_M) + Σ_m log q_m(l_(m+1), h_m)`.
pub fn log_likelihood(image: &Tensor<f64>, model: &KdeModel, levels: usize) -> Result<LogLikelihood> {
    if levels != model.levels || model.detail_levels.len() != levels {
        return Err(Error::Invalid(format!(
            "model has {} levels, asked for {levels}",
            model.levels
        )));
    }
    if image.shape() != model.shape.as_slice() {
        return Err(Error::shape("log_likelihood", format!("{:?} vs model {:?}", image.shape(), model.shape)));
    }
    let p = decompose(image, levels)?;
    let coarse = kde_log_density(p.coarse.data(), &model.coarse.samples, model.coarse.sigma, model.normalized)?;
    let terms = (0..levels)
        .map(|m| {
            let lvl = &model.detail_levels[m];
            kde_log_density(&joint(&p, m)?, &lvl.samples, lvl.sigma, model.normalized)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = coarse + terms.iter().sum::<f64>();
    Ok(LogLikelihood { coarse, levels: terms, total })
}

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::{Reduce, Tape};
use crate::error::{Error, Result};
use crate::params::{ParamFilter, ParamStore};
use crate::pyramid::Backbone;
use crate::tensor::Tensor;

const PSD_TOLERANCE: f64 = 1e-10;
const ROUNDING_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Invalid(format!("gaussian stats need at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Invalid("feature vectors have different lengths".into()));
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let x = DVector::from_column_slice(f) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

fn clamped_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -(PSD_TOLERANCE * max + 1e-14) {
        return Err(Error::Invalid(format!(
            "{what} is not positive semi-definite (eigenvalue {min:e}, max {max:e})"
        )));
    }
    // Rounding noise around zero eigenvalues is of order eps·max, and its
    // square root would otherwise dominate the trace term.
    let floor = ROUNDING_FLOOR * max;
    eig.eigenvalues.apply(|v| *v = if *v <= floor { 0.0 } else { *v });
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigenvalues(m, "covariance")?;
    let root = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians, taking the trace of the matrix
/// square root through the symmetric product `Σ_b^½ Σ_a Σ_b^½`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Invalid(format!(
            "fid dimension mismatch: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let root_b = sqrt_psd(&b.cov)?;
    let product = &root_b * &a.cov * &root_b;
    let trace_root: f64 = clamped_eigenvalues(&product, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let diff = &a.mean - &b.mean;
    let value = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * trace_root;
    if value < -1e-9 {
        return Err(Error::Invalid(format!("fid came out negative ({value:e})")));
    }
    Ok(value.max(0.0))
}

/// Averages each `[C, H, W]` image over a 4×4 grid of cells, flattened
/// channel-major.
pub fn embed_pooled(images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let (c, h, w) = match *img.shape() {
                [c, h, w] if h >= 4 && w >= 4 => (c, h, w),
                ref s => return Err(Error::Invalid(format!("cannot pool image of shape {s:?}"))),
            };
            let data = img.data();
            let mut out = Vec::with_capacity(c * 16);
            for ch in 0..c {
                for gy in 0..4 {
                    let (r0, r1) = (gy * h / 4, (gy + 1) * h / 4);
                    for gx in 0..4 {
                        let (c0, c1) = (gx * w / 4, (gx + 1) * w / 4);
                        let mut acc = 0.0f64;
                        for r in r0..r1 {
                            for col in c0..c1 {
                                acc += data[(ch * h + r) * w + col] as f64;
                            }
                        }
                        out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Global average of the deepest backbone feature map per image.
pub fn embed_backbone(images: &[Tensor<f32>], backbone: &Backbone, store: &ParamStore<f32>) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let mut tape = Tape::with_params(store, ParamFilter::Nothing);
            tape.set_training(false);
            let shape: Vec<usize> = std::iter::once(1).chain(img.shape().iter().copied()).collect();
            let x = tape.constant(img.clone().reshape(&shape)?);
            let feats = backbone.forward(&mut tape, x)?;
            let g = tape.global_pool(feats[3], Reduce::Mean)?;
            Ok(tape.value(g).to_f64_vec())
        })
        .collect()
}

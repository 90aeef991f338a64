use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::scalar::Scalar;

use super::{multi_stage_pyramid, FeaturePyramid, FmfV1, FmfV2, Oun, PyramidConfig, PyramidPool, Sfc};

/// Everything downstream of the backbone: base-feature fusion, stacked
/// stages, pyramid pooling and scale-wise concatenation.
#[derive(Clone, Debug)]
pub struct PyramidNet {
    pub config: PyramidConfig,
    pub fmf1: FmfV1,
    pub stem: Conv2d,
    pub ouns: Vec<Oun>,
    pub fmf2: Vec<FmfV2>,
    pub pool: PyramidPool,
    pub sfc: Sfc,
}

#[derive(Clone, Debug)]
pub struct PyramidOutput {
    pub x_ini: Var,
    pub stages: Vec<FeaturePyramid>,
    pub high: Vec<Var>,
    pub low: Vec<Var>,
    pub pyramid: FeaturePyramid,
    pub attention: Vec<Var>,
}

impl PyramidNet {
    /// Parameter names start with `prefix` followed by a dot.
    pub fn new(cfg: &PyramidConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let nc = cfg.scale_channels;
        let ch = &cfg.backbone_channels;
        let scales = cfg.oun_depth + 1;
        Ok(PyramidNet {
            config: cfg.clone(),
            fmf1: FmfV1::new(&format!("{prefix}.fmf1"), [ch[1], ch[2], ch[3]], cfg.fusion_width(), nc),
            stem: Conv2d::pointwise(format!("{prefix}.stem"), ch[0] + 1, nc),
            ouns: (0..cfg.num_ouns)
                .map(|l| Oun::new(&format!("{prefix}.oun{l}"), l, nc, cfg.oun_depth))
                .collect(),
            fmf2: (1..cfg.num_ouns)
                .map(|l| FmfV2::new(&format!("{prefix}.fmf2_{l}"), nc))
                .collect(),
            pool: PyramidPool::new(&format!("{prefix}.pool"), nc, cfg.pool_levels, cfg.pool_channels()),
            sfc: Sfc::new(
                &format!("{prefix}.sfc"),
                scales,
                cfg.num_ouns,
                nc,
                cfg.attention_reduction,
                nc + cfg.pool_channels(),
                cfg.pool_levels,
            )?,
        })
    }

    pub fn init<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut impl Rng) -> Result<()> {
        self.fmf1.init(store, rng)?;
        self.stem.init(store, rng)?;
        for o in &self.ouns {
            o.init(store, rng)?;
        }
        for f in &self.fmf2 {
            f.init(store, rng)?;
        }
        self.pool.init(store, rng)?;
        self.sfc.init(store, rng)
    }

    /// `features` are the backbone stages `b1..b4`; `noise` is one channel at
    /// the `b1` extents.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<'_, E>, features: [Var; 4], noise: Var) -> Result<PyramidOutput> {
        let b1 = tape.shape(features[0]).to_vec();
        match *tape.shape(noise) {
            [n, 1, h, w] if n == b1[0] && h == b1[2] && w == b1[3] => {}
            ref s => {
                return Err(Error::shape(
                    "generator noise",
                    format!("expected [{}, 1, {}, {}], got {s:?}", b1[0], b1[2], b1[3]),
                ))
            }
        }
        let base = self.fmf1.forward(tape, [features[1], features[2], features[3]])?;
        let base = tape.relu(base)?;
        let base = tape.upsample_nearest(base, 2)?;
        let with_noise = tape.concat(&[features[0], noise], 1)?;
        let stem = self.stem.forward(tape, with_noise)?;
        let stem = tape.relu(stem)?;
        let x_ini = tape.add(base, stem)?;

        let stages = multi_stage_pyramid(tape, x_ini, &self.ouns, &self.fmf2)?;
        let (high, low) = self.pool.forward(tape, x_ini)?;
        let skips = high
            .iter()
            .zip(&low)
            .map(|(&h, &l)| tape.concat(&[h, l], 1))
            .collect::<Result<Vec<_>>>()?;
        let out = self.sfc.forward(tape, &stages, &skips)?;
        Ok(PyramidOutput {
            x_ini,
            stages,
            high,
            low,
            pyramid: out.pyramid,
            attention: out.attention,
        })
    }
}

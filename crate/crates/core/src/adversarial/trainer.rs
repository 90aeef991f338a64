use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{augment, epoch_batches, AugmentConfig, RoadScene};
use crate::error::{Error, Result};
use crate::metrics::{confusion, iou, ConfusionCounts, SegMask};
use crate::params::{AdamConfig, AdamState, ParamFilter, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{descend, descend_with, domain_objective, generator_loss, sample_noise, target_alignment_loss, task_loss, GeneratorLoss, Model};

pub const LOG_HEADER: &str = "iter,d_loss,g_loss,task_loss,probe_iou";

/// Road class id used for the probe IoU.
const ROAD: u32 = 1;
const MAX_PROBE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Weight of the task loss.
    pub lambda_task: f64,
    pub adam: AdamConfig,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Discriminator updates per outer iteration.
    pub k_disc: usize,
    pub epochs: usize,
    pub seed: u64,
    pub generator_loss: GeneratorLoss,
    pub log_interval: usize,
    /// Geometric augmentation of both domains; `None` disables it.
    pub augment: Option<AugmentConfig>,
    /// `false` trains the source-only baseline: task loss on source
    /// features, generator and discriminator untouched.
    pub adversarial: bool,
    /// Reconstruction steps for the decoder before adversarial training.
    pub decoder_pretrain_steps: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda_task: 1.0,
            adam: AdamConfig::default(),
            batch_source: 5,
            batch_target: 5,
            k_disc: 1,
            epochs: 1,
            seed: 0,
            generator_loss: GeneratorLoss::NonSaturating,
            log_interval: 25,
            augment: None,
            adversarial: true,
            decoder_pretrain_steps: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lambda_task >= 0.0 && self.lambda_task.is_finite()) {
            return Err(Error::Config(format!("lambda_task must be finite and >= 0, got {}", self.lambda_task)));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        Ok(())
    }

    pub fn iterations(&self, source_len: usize) -> usize {
        self.epochs * source_len.div_ceil(self.batch_source.max(1))
    }
}

/// Held-out target scenes whose labels are used only to log progress.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub images: Tensor<f32>,
    pub masks: Vec<SegMask>,
}

impl ProbeSet {
    /// Uses at most the first 8 scenes.
    pub fn from_scenes(scenes: &[RoadScene]) -> Result<Self> {
        let scenes = &scenes[..scenes.len().min(MAX_PROBE)];
        if scenes.is_empty() {
            return Err(Error::Invalid("probe set is empty".into()));
        }
        Ok(ProbeSet {
            images: stack_images(scenes)?,
            masks: scenes.iter().map(|s| s.mask.clone()).collect(),
        })
    }

    /// Road IoU pooled over the probe images.
    pub fn iou<E: Scalar>(&self, model: &Model, store: &ParamStore<E>) -> Result<Option<f64>> {
        let pred = model.predict(store, &self.images.cast())?;
        pooled_iou(&pred, &self.masks)
    }
}

/// Road IoU with counts pooled over all pairs; `None` when nobody has road
/// in either mask.
pub fn pooled_iou(pred: &[SegMask], gt: &[SegMask]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!("{} predictions for {} masks", pred.len(), gt.len())));
    }
    let mut total = ConfusionCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        total += confusion(p, g, ROAD)?;
    }
    if total.tp + total.fp + total.fn_ == 0 {
        Ok(None)
    } else {
        iou(&total).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    /// Discriminator loss `−ℓ_d` averaged since the previous row.
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    /// Unweighted task loss averaged since the previous row.
    pub task_loss: f64,
    pub probe_iou: Option<f64>,
}

pub fn write_log_csv(out: &mut impl Write, rows: &[LogRow]) -> Result<()> {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_default()
    }
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            opt(r.d_loss),
            opt(r.g_loss),
            r.task_loss,
            opt(r.probe_iou)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<E: Scalar = f32> {
    pub store: ParamStore<E>,
    pub log: Vec<LogRow>,
    pub iterations: usize,
    pub optimizers: Optimizers<E>,
}

/// Adam moments of the three kinds of update.
#[derive(Clone, Debug, Default)]
pub struct Optimizers<E> {
    pub disc: AdamState<E>,
    pub gen: AdamState<E>,
    pub task: AdamState<E>,
}

#[derive(Default)]
struct Running {
    d: f64,
    g: f64,
    t: f64,
    n: usize,
}

struct Batch<E: Scalar> {
    source: Tensor<E>,
    labels: Vec<usize>,
    target: Option<Tensor<E>>,
}

/// `[N, 3, H, W]` batch of scene images.
pub fn stack_images<E: Scalar>(scenes: &[RoadScene]) -> Result<Tensor<E>> {
    let images = scenes
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.cast::<E>().reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&images)
}

fn labels_of(scenes: &[RoadScene]) -> Vec<usize> {
    scenes
        .iter()
        .flat_map(|s| s.mask.labels.iter().map(|&l| l as usize))
        .collect()
}

/// Cycles through the target set in reshuffled epochs.
struct TargetCursor {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<Vec<usize>>,
}

impl TargetCursor {
    fn next(&mut self) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            let mut b = epoch_batches(self.len, self.batch, self.seed, self.epoch, true)?;
            b.reverse();
            self.queue = b;
            self.epoch += 1;
        }
        Ok(self.queue.pop().expect("non-empty epoch"))
    }
}

fn diverged(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| if matches!(e, Error::NonFinite { .. }) { Error::Diverged { iteration } } else { e }
}

fn no_grad_tensor<E: Scalar>(
    store: &ParamStore<E>,
    f: impl FnOnce(&mut Tape<'_, E>) -> Result<Var>,
) -> Result<Tensor<E>> {
    let mut tape = Tape::with_params(store, ParamFilter::Nothing);
    let v = f(&mut tape)?;
    Ok(tape.value(v).clone())
}

/// Mean squared error between `a` and `b`.
fn mse<E: Scalar>(tape: &mut Tape<'_, E>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Alternating training. Each outer iteration performs `k_disc`
/// discriminator steps, one generator step and one task step, each with
/// its own optimizer moments; the
/// baseline performs the task step on source features only. The generator
/// step also moves the backbone so that target features stop looking real
/// to the discriminator, unless the decoder replaces features with images.
pub fn train<E: Scalar>(
    model: &Model,
    mut store: ParamStore<E>,
    source: &[RoadScene],
    target: &[RoadScene],
    probe: Option<&ProbeSet>,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Invalid("source dataset is empty".into()));
    }
    if cfg.adversarial && target.is_empty() {
        return Err(Error::Invalid("target dataset is empty".into()));
    }
    let size = model.input_size();
    if let Some(s) = source.iter().chain(target).find(|s| s.size() != size) {
        return Err(Error::Config(format!("scene {} is {}px, model expects {size}px", s.seed, s.size())));
    }
    let total = cfg.iterations(source.len());
    let mut log = Vec::new();
    if total == 0 {
        return Ok(TrainOutcome { store, log, iterations: 0, optimizers: Optimizers::default() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut targets = TargetCursor {
        len: target.len(),
        batch: cfg.batch_target,
        seed: cfg.seed ^ 0x7461_7267,
        epoch: 0,
        queue: Vec::new(),
    };

    if cfg.adversarial && model.decoder.is_some() {
        pretrain_decoder(model, &mut store, source, cfg)?;
    }

    let gen = model.gen_group();
    let task_group = if cfg.adversarial {
        model.task_group()
    } else {
        ParamFilter::prefixes(&["backbone.", "cls."])
    };
    let mut opt = Optimizers::<E>::default();
    let mut running = Running::default();
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(source.len(), cfg.batch_source, cfg.seed, epoch as u64, true)? {
            iter += 1;
            let pick = |scenes: &[RoadScene], idx: &[usize], rng: &mut ChaCha8Rng| -> Vec<RoadScene> {
                idx.iter()
                    .map(|&i| match &cfg.augment {
                        Some(a) => augment(&scenes[i], a, rng),
                        None => scenes[i].clone(),
                    })
                    .collect()
            };
            let src = pick(source, &idx, &mut rng);
            let tgt = if cfg.adversarial {
                let t = targets.next()?;
                pick(target, &t, &mut rng)
            } else {
                Vec::new()
            };
            let batch = Batch {
                source: stack_images(&src)?,
                labels: labels_of(&src),
                target: if tgt.is_empty() { None } else { Some(stack_images(&tgt)?) },
            };
            let n = src.len();
            let on_err = diverged(iter);

            if cfg.adversarial {
                for _ in 0..cfg.k_disc {
                    let noise = sample_noise::<E>(n, size, &mut rng);
                    let d = disc_step(model, &mut store, &mut opt.disc, &batch, noise, cfg).map_err(&on_err)?;
                    running.d += d;
                }
                let noise = sample_noise::<E>(n, size, &mut rng);
                let g = descend_with(&mut store, &gen, &cfg.adam, &mut opt.gen, true, |t| {
                    let x = t.constant(batch.source.clone());
                    let z = t.constant(noise.clone());
                    let f = model.features(t, x)?;
                    let out = model.generate(t, f, z)?;
                    let view = model.disc_view(t, out.x_fm)?;
                    let df = model.discriminator.forward(t, view)?;
                    let fool = generator_loss(t, &df, cfg.generator_loss)?;
                    if model.decoder.is_some() {
                        return Ok(fool);
                    }
                    let target = batch.target.as_ref().expect("adversarial batches carry targets");
                    let xt = t.constant(target.clone());
                    let ft = model.features(t, xt)?;
                    let dr = model.discriminator.forward(t, ft[3])?;
                    let align = target_alignment_loss(t, &dr, cfg.generator_loss)?;
                    t.add(fool, align)
                })
                .map_err(&on_err)?;
                running.g += g;
                let mut task = 0.0;
                descend_with(&mut store, &task_group, &cfg.adam, &mut opt.task, true, |t| {
                    let x = t.constant(batch.source.clone());
                    let z = t.constant(noise);
                    let f = model.features(t, x)?;
                    let ls = model.classify(t, f[3])?;
                    let out = model.generate(t, f, z)?;
                    let la = model.classify(t, out.x_fm)?;
                    let l = task_loss(t, ls, Some(la), &batch.labels)?;
                    task = t.value(l).item()?.as_f64();
                    t.scale(l, cfg.lambda_task)
                })
                .map_err(&on_err)?;
                running.t += task;
            } else {
                let mut task = 0.0;
                descend_with(&mut store, &task_group, &cfg.adam, &mut opt.task, true, |t| {
                    let x = t.constant(batch.source.clone());
                    let f = model.features(t, x)?;
                    let ls = model.classify(t, f[3])?;
                    let l = task_loss(t, ls, None, &batch.labels)?;
                    task = t.value(l).item()?.as_f64();
                    t.scale(l, cfg.lambda_task)
                })
                .map_err(&on_err)?;
                running.t += task;
            }
            running.n += 1;

            if iter % cfg.log_interval == 0 || iter == total {
                let k = running.n as f64;
                let probe_iou = match probe {
                    Some(p) => p.iou(model, &store)?,
                    None => None,
                };
                log.push(LogRow {
                    iter,
                    d_loss: cfg.adversarial.then(|| running.d / (k * cfg.k_disc.max(1) as f64)),
                    g_loss: cfg.adversarial.then(|| running.g / k),
                    task_loss: running.t / k,
                    probe_iou,
                });
                running = Running::default();
            }
        }
    }
    Ok(TrainOutcome { store, log, iterations: iter, optimizers: opt })
}

/// One discriminator update on target reals against generated features.
/// Returns the discriminator loss `−ℓ_d` before the update.
fn disc_step<E: Scalar>(
    model: &Model,
    store: &mut ParamStore<E>,
    opt: &mut AdamState<E>,
    batch: &Batch<E>,
    noise: Tensor<E>,
    cfg: &TrainerConfig,
) -> Result<f64> {
    let fake = no_grad_tensor(store, |t| {
        let x = t.constant(batch.source.clone());
        let z = t.constant(noise);
        let f = model.features(t, x)?;
        let out = model.generate(t, f, z)?;
        model.disc_view(t, out.x_fm)
    })?;
    let target = batch
        .target
        .as_ref()
        .ok_or_else(|| Error::Invalid("discriminator step without a target batch".into()))?;
    let real = if model.decoder.is_some() {
        target.clone()
    } else {
        no_grad_tensor(store, |t| {
            let x = t.constant(target.clone());
            Ok(model.features(t, x)?[3])
        })?
    };
    descend_with(store, &model.disc_group(), &cfg.adam, opt, false, |t| {
        let r = t.constant(real);
        let f = t.constant(fake);
        let dr = model.discriminator.forward(t, r)?;
        let df = model.discriminator.forward(t, f)?;
        let obj = domain_objective(t, &dr, &df)?;
        t.neg(obj)
    })
}

/// Fits the decoder to reconstruct source images from their conv4
/// features; nothing else changes.
fn pretrain_decoder<E: Scalar>(
    model: &Model,
    store: &mut ParamStore<E>,
    source: &[RoadScene],
    cfg: &TrainerConfig,
) -> Result<()> {
    let Some(dec) = &model.decoder else { return Ok(()) };
    let group = ParamFilter::prefixes(&["dec."]);
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.decoder_pretrain_steps {
        for idx in epoch_batches(source.len(), cfg.batch_source, cfg.seed ^ 0x6465_63, epoch, true)? {
            if step == cfg.decoder_pretrain_steps {
                break;
            }
            step += 1;
            let scenes: Vec<RoadScene> = idx.iter().map(|&i| source[i].clone()).collect();
            let images = stack_images::<E>(&scenes)?;
            descend(store, &group, &cfg.adam, false, |t| {
                let x = t.constant(images);
                let f = model.features(t, x)?;
                let y = dec.forward(t, f[3])?;
                mse(t, y, x)
            })
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { iteration: 0 },
                e => e,
            })?;
        }
        epoch += 1;
    }
    Ok(())
}

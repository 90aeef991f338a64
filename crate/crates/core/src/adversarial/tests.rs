use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::data::{generate_scene, Domain, RoadScene};
use crate::error::Error;
use crate::gradcheck::{weighted_sum, GradCheck};
use crate::nn::init_scalar;
use crate::params::{AdamConfig, ParamFilter, ParamStore};
use crate::pyramid::{Backbone, PyramidConfig, UpsampleMode};
use crate::tensor::Tensor;

const LN2: f64 = std::f64::consts::LN_2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn micro_config(input_size: usize) -> PyramidConfig {
    PyramidConfig {
        input_size,
        backbone_channels: vec![2, 2, 3, 3],
        num_ouns: 2,
        oun_depth: 2,
        scale_channels: 4,
        attention_reduction: 2,
        pool_levels: 2,
        upsample: UpsampleMode::Nearest,
    }
}

fn micro_options() -> ModelOptions {
    ModelOptions {
        disc_widths: [6, 5, 4],
        ..ModelOptions::desk()
    }
}

fn scenes(domain: Domain, seeds: std::ops::Range<u64>, size: usize) -> Vec<RoadScene> {
    let style = domain.style(size);
    seeds.map(|s| generate_scene(s, domain, &style, size).unwrap()).collect()
}

/// Backbone features of random images plus a noise map, on a fresh tape.
fn features_on<'p>(tape: &mut Tape<'p, f64>, cfg: &PyramidConfig, n: usize, seed: u64) -> [crate::autodiff::Var; 4] {
    let backbone = Backbone::new(cfg);
    let x = tape.constant(Tensor::uniform(&[n, 3, cfg.input_size, cfg.input_size], 0.0, 1.0, &mut rng(seed)));
    backbone.forward(tape, x).unwrap()
}

fn generator_store(cfg: &PyramidConfig, seed: u64) -> (Generator, ParamStore<f64>) {
    let g = Generator::new(cfg, "gen").unwrap();
    let mut store = ParamStore::new();
    Backbone::new(cfg).init(&mut store, &mut rng(seed)).unwrap();
    g.init(&mut store, &mut rng(seed + 1)).unwrap();
    (g, store)
}

#[test]
fn zero_residual_head_returns_conv4() {
    let cfg = micro_config(16);
    let (g, mut store) = generator_store(&cfg, 1);
    let w = store.get(&g.head.weight_name()).unwrap().shape().to_vec();
    store.set(&g.head.weight_name(), Tensor::zeros(&w)).unwrap();
    let mut tape = Tape::with_params(&store, ParamFilter::Nothing);
    let f = features_on(&mut tape, &cfg, 2, 3);
    let z = tape.constant(sample_noise(2, 16, &mut rng(4)));
    let out = g.forward(&mut tape, f, z).unwrap();
    assert_eq!(tape.value(out.x_fm), tape.value(f[3]));
    assert_eq!(tape.shape(out.x_fm), &[2, 3, 2, 2]);
}

#[test]
fn different_noise_changes_output() {
    let cfg = micro_config(16);
    let (g, store) = generator_store(&cfg, 2);
    let mut tape = Tape::with_params(&store, ParamFilter::Nothing);
    let f = features_on(&mut tape, &cfg, 2, 5);
    let z1 = tape.constant(sample_noise(2, 16, &mut rng(6)));
    let z2 = tape.constant(sample_noise(2, 16, &mut rng(7)));
    let a = g.forward(&mut tape, f, z1).unwrap().x_fm;
    let b = g.forward(&mut tape, f, z2).unwrap().x_fm;
    let diff = tape.value(a).zip_map(tape.value(b), |x, y| x - y).unwrap().max_abs();
    assert!(diff > 1e-9, "noise had no effect");
}

#[test]
fn noise_values_in_unit_interval() {
    let z = sample_noise::<f64>(3, 8, &mut rng(1));
    assert_eq!(z.shape(), &[3, 1, 8, 8]);
    assert!(z.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(z.data().iter().any(|&v| v < 0.0) && z.data().iter().any(|&v| v > 0.0));
}

#[test]
fn generator_rejects_noise_of_wrong_extent() {
    let cfg = micro_config(16);
    let (g, store) = generator_store(&cfg, 3);
    let mut tape = Tape::with_params(&store, ParamFilter::Nothing);
    let f = features_on(&mut tape, &cfg, 1, 5);
    let z = tape.constant(sample_noise(1, 8, &mut rng(6)));
    assert!(matches!(g.forward(&mut tape, f, z), Err(Error::Shape { .. })));
}

#[test]
fn minibatch_average_cases() {
    let one = rand64(&[2, 3], 1);
    assert_eq!(minibatch_average(&[one.clone()]).unwrap(), one);
    let zero = Tensor::<f64>::zeros(&[2, 2]);
    let two = Tensor::<f64>::full(&[2, 2], 2.0);
    assert_eq!(minibatch_average(&[zero, two]).unwrap(), Tensor::full(&[2, 2], 1.0));
    assert!(minibatch_average::<f64>(&[]).is_err());
    assert!(minibatch_average(&[rand64(&[2], 1), rand64(&[3], 1)]).is_err());
}

#[test]
fn batch_mean_pairing_matches_minibatch_average() {
    let d = Discriminator::new("disc", DiscriminatorMode::Fc, [3, 2, 2], [4, 4, 2]).unwrap();
    let x = rand64(&[5, 3, 2, 2], 9);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let paired = d.with_batch_mean(&mut tape, xv).unwrap();
    assert_eq!(tape.shape(paired), &[5, 6, 2, 2]);
    let samples: Vec<_> = (0..5).map(|i| x.batch_item(i).unwrap()).collect();
    let mean = minibatch_average(&samples).unwrap();
    let p = tape.value(paired);
    for i in 0..5 {
        for j in 0..12 {
            assert_eq!(p.data()[i * 24 + j], x.data()[i * 12 + j]);
            assert!((p.data()[i * 24 + 12 + j] - mean.data()[j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn discriminator_input_channels_are_doubled() {
    for c in [1, 3, 7] {
        let fc = Discriminator::new("disc", DiscriminatorMode::Fc, [c, 4, 4], [8, 8, 4]).unwrap();
        assert_eq!(fc.input_channels(), 2 * c);
        assert_eq!(fc.fc[0].inputs, 2 * c * 16);
        let patch = Discriminator::new("disc", DiscriminatorMode::Patch, [c, 4, 4], [8, 8, 4]).unwrap();
        assert_eq!(patch.convs[0].cin, 2 * c);
    }
    assert!(Discriminator::new("disc", DiscriminatorMode::Fc, [3, 4, 4], [8, 0, 4]).is_err());
}

#[test]
fn full_discriminator_widths() {
    let o = ModelOptions::full();
    assert_eq!(o.disc_widths, [4096, 4096, 1024]);
    assert_eq!(ModelOptions::desk().disc_widths, [256, 256, 64]);
}

fn zeroed_disc(mode: DiscriminatorMode) -> (Discriminator, ParamStore<f64>) {
    let d = Discriminator::new("disc", mode, [2, 4, 4], [5, 4, 3]).unwrap();
    let mut store = ParamStore::new();
    d.init(&mut store, &mut rng(1)).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::zeros(&shape)).unwrap();
    }
    (d, store)
}

#[test]
fn zero_weight_discriminator_is_undecided() {
    for mode in [DiscriminatorMode::Fc, DiscriminatorMode::Patch] {
        let (d, store) = zeroed_disc(mode);
        let mut tape = Tape::with_params(&store, ParamFilter::Nothing);
        let x = tape.constant(rand64(&[3, 2, 4, 4], 2));
        let out = d.forward(&mut tape, x).unwrap();
        for p in Discriminator::probabilities(&tape, &out) {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }
}

#[test]
fn patch_min_reduce_uses_worst_patch() {
    let d = Discriminator::new("disc", DiscriminatorMode::Patch, [2, 4, 4], [1, 1, 1])
        .unwrap()
        .with_reduce(PatchReduce::Min);
    let mut store = ParamStore::<f64>::new();
    d.init(&mut store, &mut rng(3)).unwrap();
    let mut tape = Tape::with_params(&store, ParamFilter::Nothing);
    let x = tape.constant(rand64(&[2, 2, 4, 4], 4));
    let out = d.forward(&mut tape, x).unwrap();
    let p = Discriminator::probabilities(&tape, &out);
    let mean_d = d.clone().with_reduce(PatchReduce::Mean);
    let out_mean = mean_d.forward(&mut tape, x).unwrap();
    let pm = Discriminator::probabilities(&tape, &out_mean);
    for (a, b) in p.iter().zip(&pm) {
        assert!(a <= b, "min-pooled {a} above mean {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn discriminator_probability_strictly_inside_unit_interval(seed in 0u64..1000, patch in any::<bool>()) {
        let mode = if patch { DiscriminatorMode::Patch } else { DiscriminatorMode::Fc };
        let d = Discriminator::new("disc", mode, [2, 4, 4], [8, 6, 4]).unwrap();
        let mut store = ParamStore::<f64>::new();
        d.init(&mut store, &mut rng(seed)).unwrap();
        let mut tape = Tape::with_params(&store, ParamFilter::Nothing);
        let x = tape.constant(Tensor::uniform(&[3, 2, 4, 4], -3.0, 3.0, &mut rng(seed + 1)));
        let out = d.forward(&mut tape, x).unwrap();
        for p in Discriminator::probabilities(&tape, &out) {
            prop_assert!(p > 0.0 && p < 1.0);
        }
        let real = tape.value(out.log_real).data().to_vec();
        let fake = tape.value(out.log_fake).data().to_vec();
        if !patch {
            for (r, f) in real.iter().zip(&fake) {
                prop_assert!((r.exp() + f.exp() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn domain_loss_never_positive(
        pt in prop::collection::vec(0.001f64..=1.0, 1..8),
        pf in prop::collection::vec(0.0f64..0.999, 1..8),
    ) {
        let l = domain_loss(&pt, &pf).unwrap();
        prop_assert!(l <= 0.0);
        let perfect = pt.iter().all(|&p| p == 1.0) && pf.iter().all(|&p| p == 0.0);
        prop_assert_eq!(l == 0.0, perfect);
    }
}

#[test]
fn domain_loss_closed_forms() {
    assert_eq!(domain_loss(&[1.0, 1.0], &[0.0]).unwrap(), 0.0);
    let half = domain_loss(&[0.5; 4], &[0.5; 3]).unwrap();
    assert!((half + 2.0 * LN2).abs() < 1e-12);
    assert!(domain_loss(&[0.4], &[0.5]).unwrap() < domain_loss(&[0.6], &[0.5]).unwrap());
    assert!(domain_loss(&[0.5], &[0.6]).unwrap() < domain_loss(&[0.5], &[0.4]).unwrap());
    assert!(matches!(domain_loss(&[1.2], &[0.5]), Err(Error::Domain { .. })));
    assert!(matches!(domain_loss(&[0.0], &[0.5]), Err(Error::NonFinite { .. })));
    assert!(domain_loss(&[], &[0.5]).is_err());
}

/// Discriminator outputs built directly from probability leaves.
fn outputs_from(tape: &mut Tape<'_, f64>, p: crate::autodiff::Var) -> DiscOutput {
    let log_real = tape.log(p).unwrap();
    let neg = tape.neg(p).unwrap();
    let q = tape.add_scalar(neg, 1.0).unwrap();
    let log_fake = tape.log(q).unwrap();
    DiscOutput { log_real, log_fake }
}

#[test]
fn domain_objective_matches_plain_loss() {
    let pr = [0.9, 0.3, 0.6];
    let pf = [0.2, 0.7];
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(Tensor::from_f64(&[3], &pr).unwrap());
    let f = tape.constant(Tensor::from_f64(&[2], &pf).unwrap());
    let dr = outputs_from(&mut tape, r);
    let df = outputs_from(&mut tape, f);
    let obj = domain_objective(&mut tape, &dr, &df).unwrap();
    let want = domain_loss(&pr, &pf).unwrap();
    assert!((tape.value(obj).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn generator_loss_gradients_at_low_confidence() {
    let grad = |kind: GeneratorLoss| {
        let mut tape = Tape::<f64>::new();
        let p = tape.variable(Tensor::from_f64(&[1], &[0.1]).unwrap());
        let out = outputs_from(&mut tape, p);
        let l = generator_loss(&mut tape, &out, kind).unwrap();
        tape.backward(l).unwrap();
        tape.grad(p).unwrap().data()[0]
    };
    let ns = grad(GeneratorLoss::NonSaturating);
    let sat = grad(GeneratorLoss::Saturating);
    assert!((ns + 10.0).abs() < 1e-9);
    assert!((sat + 1.0 / 0.9).abs() < 1e-9);
    assert!(ns < 0.0 && sat < 0.0);
    assert!((ns / sat - 9.0).abs() < 1e-9);
}

#[test]
fn target_alignment_pushes_real_probability_down() {
    let pr = [0.9, 0.3, 0.6];
    for kind in [GeneratorLoss::NonSaturating, GeneratorLoss::Saturating] {
        let mut tape = Tape::<f64>::new();
        let p = tape.variable(Tensor::from_f64(&[3], &pr).unwrap());
        let out = outputs_from(&mut tape, p);
        let l = target_alignment_loss(&mut tape, &out, kind).unwrap();
        let want = match kind {
            GeneratorLoss::NonSaturating => -pr.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 3.0,
            GeneratorLoss::Saturating => pr.iter().map(|p| p.ln()).sum::<f64>() / 3.0,
        };
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(p).unwrap().data().iter().all(|&g| g > 0.0), "{kind:?}");
    }
}

fn uniform_logits(tape: &mut Tape<'_, f64>) -> crate::autodiff::Var {
    tape.constant(Tensor::zeros(&[1, 2, 1, 1]))
}

#[test]
fn task_loss_closed_forms() {
    let mut tape = Tape::<f64>::new();
    let s = uniform_logits(&mut tape);
    let a = uniform_logits(&mut tape);
    let both = task_loss(&mut tape, s, Some(a), &[1]).unwrap();
    assert!((tape.value(both).item().unwrap() - 2.0 * LN2).abs() < 1e-12);
    let single = task_loss(&mut tape, s, None, &[0]).unwrap();
    assert!((tape.value(single).item().unwrap() - LN2).abs() < 1e-12);

    let sure = tape.constant(Tensor::from_f64(&[1, 2, 1, 2], &[-50.0, 50.0, 50.0, -50.0]).unwrap());
    let perfect = task_loss(&mut tape, sure, Some(sure), &[1, 0]).unwrap();
    assert!(tape.value(perfect).item().unwrap() < 1e-40);
    assert!(task_loss(&mut tape, s, None, &[2]).is_err());
}

#[test]
fn combined_objective_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let d = tape.constant(Tensor::scalar(-2.0 * LN2));
    let t = tape.constant(Tensor::scalar(2.0 * LN2));
    let zero = combined_objective(&mut tape, d, t, 1.0).unwrap();
    assert!(tape.value(zero).item().unwrap().abs() < 1e-15);
    let pure = combined_objective(&mut tape, d, t, 0.0).unwrap();
    assert_eq!(tape.value(pure).item().unwrap(), -2.0 * LN2);
    assert!(combined_objective(&mut tape, d, t, -1.0).is_err());
}

#[test]
fn combined_gradient_is_weighted_sum() {
    let x0 = Tensor::from_f64(&[1, 2, 1, 3], &[0.3, -0.2, 0.5, 0.1, -0.4, 0.2]).unwrap();
    let labels = [1, 0, 1];
    let lambda = 0.7;
    let run = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(x0.clone());
        let s = tape.sigmoid(x).unwrap();
        let p = tape.reshape(s, &[6]).unwrap();
        let out = outputs_from(&mut tape, p);
        let d = domain_objective(&mut tape, &out, &out).unwrap();
        let t = task_loss(&mut tape, x, None, &labels).unwrap();
        let l = match which {
            0 => d,
            1 => t,
            _ => combined_objective(&mut tape, d, t, lambda).unwrap(),
        };
        tape.backward(l).unwrap();
        tape.grad(x).unwrap().to_f64_vec()
    };
    let (gd, gt, gc) = (run(0), run(1), run(2));
    for i in 0..6 {
        assert!((gc[i] - (gd[i] + lambda * gt[i])).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let d = Discriminator::new("disc", DiscriminatorMode::Fc, [2, 4, 4], [5, 4, 3]).unwrap();
    let mut store = ParamStore::<f64>::new();
    d.init(&mut store, &mut rng(5)).unwrap();
    let before = store.clone();
    let adam = AdamConfig { lr: 0.0, ..AdamConfig::default() };
    let x = rand64(&[2, 2, 4, 4], 1);
    descend(&mut store, &ParamFilter::All, &adam, false, |t| {
        let xv = t.constant(x);
        let out = d.forward(t, xv)?;
        t.mean(out.log_real)
    })
    .unwrap();
    for (name, e) in before.iter() {
        assert_eq!(store.get(name).unwrap(), &e.value, "{name}");
    }
}

/// `D(x) = σ(w·x)` with a single weight.
fn logistic(tape: &mut Tape<'_, f64>, x: Tensor<f64>) -> DiscOutput {
    let w = tape.param("disc.w").unwrap();
    let xv = tape.constant(x);
    let z = tape.mul_scalar_var(xv, w).unwrap();
    let p = tape.sigmoid(z).unwrap();
    outputs_from(tape, p)
}

fn logistic_objective(store: &ParamStore<f64>, real: &Tensor<f64>, fake: &Tensor<f64>) -> f64 {
    let mut tape = Tape::with_params(store, ParamFilter::Nothing);
    let dr = logistic(&mut tape, real.clone());
    let df = logistic(&mut tape, fake.clone());
    let o = domain_objective(&mut tape, &dr, &df).unwrap();
    tape.value(o).item().unwrap()
}

#[test]
fn discriminator_step_increases_objective() {
    let mut store = ParamStore::<f64>::new();
    init_scalar(&mut store, "disc.w", 0.1).unwrap();
    let real = Tensor::from_f64(&[4], &[1.0, 1.5, 0.8, 1.2]).unwrap();
    let fake = Tensor::from_f64(&[4], &[-1.0, -0.5, 0.2, -1.4]).unwrap();
    let before = logistic_objective(&store, &real, &fake);
    let adam = AdamConfig { lr: 0.05, ..AdamConfig::default() };
    let (r, f) = (real.clone(), fake.clone());
    descend(&mut store, &ParamFilter::prefixes(&["disc."]), &adam, false, |t| {
        let dr = logistic(t, r);
        let df = logistic(t, f);
        let o = domain_objective(t, &dr, &df)?;
        t.neg(o)
    })
    .unwrap();
    assert!(logistic_objective(&store, &real, &fake) > before);
}

#[test]
fn generator_step_increases_fooling() {
    let mut store = ParamStore::<f64>::new();
    init_scalar(&mut store, "disc.w", 1.0).unwrap();
    init_scalar(&mut store, "gen.shift", -1.0).unwrap();
    let z = Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.0]).unwrap();
    let mean_d = |store: &ParamStore<f64>| {
        let s: f64 = store.get("gen.shift").unwrap().item().unwrap();
        let w: f64 = store.get("disc.w").unwrap().item().unwrap();
        z.data().iter().map(|&v: &f64| 1.0 / (1.0 + (-(w * (v + s))).exp())).sum::<f64>() / 4.0
    };
    let before = mean_d(&store);
    let disc_before = store.get("disc.w").unwrap().clone();
    let adam = AdamConfig { lr: 0.05, ..AdamConfig::default() };
    descend(&mut store, &ParamFilter::prefixes(&["gen."]), &adam, false, |t| {
        let s = t.param("gen.shift")?;
        let w = t.param("disc.w")?;
        let zv = t.constant(z.clone());
        let ones = t.constant(Tensor::ones(&[4]));
        let shift = t.mul_scalar_var(ones, s)?;
        let x = t.add(zv, shift)?;
        let logits = t.mul_scalar_var(x, w)?;
        let p = t.sigmoid(logits)?;
        let out = outputs_from(t, p);
        generator_loss(t, &out, GeneratorLoss::NonSaturating)
    })
    .unwrap();
    assert!(mean_d(&store) > before);
    assert_eq!(store.get("disc.w").unwrap(), &disc_before);
}

#[test]
fn descend_only_moves_its_group() {
    let cfg = micro_config(32);
    let model = Model::new(&cfg, &micro_options()).unwrap();
    let store0 = model.init::<f64>(3).unwrap();
    let src = stack_images::<f64>(&scenes(Domain::Source, 0..2, 32)).unwrap();
    let noise = sample_noise::<f64>(2, 32, &mut rng(1));
    let adam = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
    let g_loss = |t: &mut Tape<'_, f64>| {
        let x = t.constant(src.clone());
        let z = t.constant(noise.clone());
        let f = model.features(t, x)?;
        let out = model.generate(t, f, z)?;
        let df = model.discriminator.forward(t, out.x_fm)?;
        generator_loss(t, &df, GeneratorLoss::NonSaturating)
    };

    let mut store = store0.clone();
    descend(&mut store, &model.disc_group(), &adam, false, g_loss).unwrap();
    let mut moved_disc = false;
    for (name, e) in store0.iter() {
        let same = store.get(name).unwrap() == &e.value;
        if name.starts_with(DISC_PREFIX) {
            moved_disc |= !same;
        } else {
            assert!(same, "{name} changed during a discriminator step");
        }
    }
    assert!(moved_disc);

    let mut store = store0.clone();
    descend(&mut store, &model.gen_group(), &adam, true, g_loss).unwrap();
    let mut moved_gen = false;
    for (name, e) in store0.iter() {
        let same = store.get(name).unwrap() == &e.value;
        if GEN_PREFIXES.iter().any(|p| name.starts_with(p)) {
            moved_gen |= !same;
        } else {
            assert!(same, "{name} changed during a generator step");
        }
    }
    assert!(moved_gen);
}

#[test]
fn decoder_identity_and_gradient_flow() {
    let dec = Decoder::new("dec", 1, &[], 1, DecoderOutput::Linear).unwrap();
    let mut store = ParamStore::<f64>::new();
    dec.init(&mut store, &mut rng(1)).unwrap();
    store.set(&dec.out_weight_name(), Tensor::ones(&[1, 1, 1, 1])).unwrap();
    let x = rand64(&[2, 1, 3, 3], 2);
    let mut tape = Tape::with_params(&store, ParamFilter::Nothing);
    let xv = tape.constant(x.clone());
    let y = dec.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y), &x);

    let cfg = micro_config(32);
    let model = Model::new(&cfg, &ModelOptions { use_decoder: true, ..micro_options() }).unwrap();
    let store = model.init::<f64>(4).unwrap();
    let mut tape = Tape::with_params(&store, model.gen_group());
    let x = tape.constant(stack_images(&scenes(Domain::Source, 0..2, 32)).unwrap());
    let z = tape.constant(sample_noise(2, 32, &mut rng(3)));
    let f = model.features(&mut tape, x).unwrap();
    let out = model.generate(&mut tape, f, z).unwrap();
    let view = model.disc_view(&mut tape, out.x_fm).unwrap();
    assert_eq!(tape.shape(view), &[2, 3, 32, 32]);
    let df = model.discriminator.forward(&mut tape, view).unwrap();
    let l = generator_loss(&mut tape, &df, GeneratorLoss::NonSaturating).unwrap();
    tape.backward(l).unwrap();
    let grads = tape.param_grads();
    for name in ["gen.head.weight", "dec.out.weight", "backbone.conv1.weight"] {
        assert!(grads[name].max_abs() > 0.0, "{name} got no gradient");
    }
    assert!(!grads.keys().any(|k| k.starts_with(DISC_PREFIX)));
}

#[test]
fn generator_residual_gradcheck() {
    let cfg = micro_config(8);
    for seed in 0..5 {
        let g = Generator::new(&cfg, "gen").unwrap();
        let mut store = ParamStore::<f64>::new();
        g.init(&mut store, &mut rng(seed)).unwrap();
        let ch = &cfg.backbone_channels;
        let mut inputs: Vec<Tensor<f64>> = (0..4)
            .map(|i| Tensor::uniform(&[2, ch[i], 8 >> i, 8 >> i], 0.0, 1.0, &mut rng(seed * 10 + i as u64)))
            .collect();
        inputs.push(sample_noise(2, 8, &mut rng(seed + 100)));
        let report = GradCheck::default()
            .run(&store, &inputs, |t, v| {
                let out = g.forward(t, [v[0], v[1], v[2], v[3]], v[4])?;
                weighted_sum(t, out.x_fm)
            })
            .unwrap();
        assert!(report.passed(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn discriminator_and_loss_gradchecks() {
    let configs = [
        (DiscriminatorMode::Fc, PatchReduce::Mean),
        (DiscriminatorMode::Patch, PatchReduce::Mean),
        (DiscriminatorMode::Patch, PatchReduce::Min),
    ];
    for (mode, reduce) in configs {
        for seed in 0..5 {
            let d = Discriminator::new("disc", mode, [2, 4, 4], [5, 4, 3]).unwrap().with_reduce(reduce);
            let mut store = ParamStore::<f64>::new();
            d.init(&mut store, &mut rng(seed)).unwrap();
            let real = rand64(&[3, 2, 4, 4], seed + 20);
            let fake = rand64(&[3, 2, 4, 4], seed + 40);
            let gc = GradCheck::default();
            let report = gc
                .run(&store, &[real.clone(), fake.clone()], |t, v| {
                    let dr = d.forward(t, v[0])?;
                    let df = d.forward(t, v[1])?;
                    domain_objective(t, &dr, &df)
                })
                .unwrap();
            assert!(report.passed(1e-4), "{mode:?}/{reduce:?} domain seed {seed}: {report:?}");
            for kind in [GeneratorLoss::NonSaturating, GeneratorLoss::Saturating] {
                let report = gc
                    .run(&store, &[fake.clone()], |t, v| {
                        let df = d.forward(t, v[0])?;
                        generator_loss(t, &df, kind)
                    })
                    .unwrap();
                assert!(report.passed(1e-4), "{mode:?}/{reduce:?} {kind:?} seed {seed}: {report:?}");
            }
        }
    }
}

#[test]
fn task_loss_gradcheck_through_classifier() {
    for seed in 0..5 {
        let cls = Classifier::new("cls", 3, &[4, 3], 2).unwrap();
        let mut store = ParamStore::<f64>::new();
        cls.init(&mut store, &mut rng(seed)).unwrap();
        let labels: Vec<usize> = (0..2 * 16).map(|i| (i * 7 + seed as usize) % 3 % 2).collect();
        let report = GradCheck::default()
            .run(&store, &[rand64(&[2, 3, 1, 1], seed + 1), rand64(&[2, 3, 1, 1], seed + 2)], |t, v| {
                let ls = cls.forward(t, v[0])?;
                let la = cls.forward(t, v[1])?;
                task_loss(t, ls, Some(la), &labels)
            })
            .unwrap();
        assert!(report.passed(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn argmax_is_shift_invariant() {
    let logits = rand64(&[2, 3, 4, 5], 8);
    let shifted = logits.map(|v| v + 17.5);
    let a = argmax_masks(&logits).unwrap();
    assert_eq!(a, argmax_masks(&shifted).unwrap());
    assert!(a.iter().all(|m| m.width == 5 && m.height == 4 && m.labels.iter().all(|&l| l < 3)));
}

#[test]
fn predict_matches_input_extents() {
    let cfg = micro_config(32);
    let model = Model::new(&cfg, &micro_options()).unwrap();
    let store = model.init::<f32>(1).unwrap();
    let images = stack_images::<f32>(&scenes(Domain::Target, 0..3, 32)).unwrap();
    let masks = model.predict(&store, &images).unwrap();
    assert_eq!(masks.len(), 3);
    for m in &masks {
        assert_eq!((m.width, m.height), (32, 32));
        assert!(m.labels.iter().all(|&l| l < CLASSES as u32));
    }
    let wrong = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
    assert!(matches!(model.predict(&store, &wrong), Err(Error::Shape { .. })));
}

#[test]
fn predict_ignores_generator_and_discriminator() {
    let cfg = micro_config(32);
    let model = Model::new(&cfg, &micro_options()).unwrap();
    let store = model.init::<f32>(1).unwrap();
    let mut stripped = ParamStore::<f32>::new();
    for (name, e) in store.iter() {
        if !name.starts_with("gen.") && !name.starts_with(DISC_PREFIX) {
            stripped.insert_entry(name, e.clone()).unwrap();
        }
    }
    let images = stack_images::<f32>(&scenes(Domain::Source, 0..2, 32)).unwrap();
    assert_eq!(model.predict(&store, &images).unwrap(), model.predict(&stripped, &images).unwrap());
}

fn micro_run(cfg: &TrainerConfig) -> (Model, ParamStore<f32>, TrainOutcome<f32>) {
    let model = Model::new(&micro_config(32), &micro_options()).unwrap();
    let store = model.init::<f32>(cfg.seed).unwrap();
    let src = scenes(Domain::Source, 0..6, 32);
    let tgt = scenes(Domain::Target, 100..106, 32);
    let probe = ProbeSet::from_scenes(&scenes(Domain::Target, 200..204, 32)).unwrap();
    let out = train(&model, store.clone(), &src, &tgt, Some(&probe), cfg).unwrap();
    (model, store, out)
}

#[test]
fn zero_epochs_returns_initial_state() {
    let (_, store, out) = micro_run(&TrainerConfig { epochs: 0, ..TrainerConfig::default() });
    assert_eq!(out.store, store);
    assert!(out.log.is_empty());
    assert_eq!(out.iterations, 0);
}

#[test]
fn k_disc_updates_per_iteration() {
    let cfg = TrainerConfig { epochs: 1, batch_source: 6, k_disc: 2, ..TrainerConfig::default() };
    let (_, _, out) = micro_run(&cfg);
    assert_eq!(out.iterations, 1);
    let o = &out.optimizers;
    assert_eq!(o.disc.step("disc.fc1.weight"), 2);
    // generator and backbone move in both the generator and the task step
    for name in ["gen.head.weight", "backbone.conv1.weight"] {
        assert_eq!((o.gen.step(name), o.task.step(name)), (1, 1), "{name}");
    }
    assert_eq!((o.gen.step("cls.out.weight"), o.task.step("cls.out.weight")), (0, 1));
    assert_eq!(o.task.step("disc.fc1.weight") + o.gen.step("disc.fc1.weight"), 0);
    assert!(out.store.iter().all(|(_, e)| e.step == 0 && e.moments.is_none()));
}

#[test]
fn baseline_leaves_adversarial_parts_untouched() {
    let cfg = TrainerConfig { epochs: 1, adversarial: false, log_interval: 1, ..TrainerConfig::default() };
    let (_, store, out) = micro_run(&cfg);
    for (name, e) in store.iter() {
        let same = out.store.get(name).unwrap() == &e.value;
        assert_eq!(same, name.starts_with("gen.") || name.starts_with(DISC_PREFIX), "{name}");
    }
    assert!(out.log.iter().all(|r| r.d_loss.is_none() && r.g_loss.is_none() && r.probe_iou.is_some()));
    let mut csv = Vec::new();
    write_log_csv(&mut csv, &out.log).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert!(lines.next().unwrap().starts_with("1,,,"));
}

#[test]
fn training_is_deterministic_and_finite() {
    let cfg = TrainerConfig {
        epochs: 2,
        batch_source: 2,
        batch_target: 2,
        log_interval: 2,
        seed: 11,
        augment: Some(Default::default()),
        ..TrainerConfig::default()
    };
    let (_, _, a) = micro_run(&cfg);
    let (_, _, b) = micro_run(&cfg);
    assert_eq!(a.iterations, 6);
    assert_eq!(a.log, b.log);
    assert_eq!(a.store, b.store);
    assert_eq!(a.log.iter().map(|r| r.iter).collect::<Vec<_>>(), [2, 4, 6]);
    for r in &a.log {
        assert!(r.d_loss.unwrap().is_finite() && r.g_loss.unwrap().is_finite() && r.task_loss.is_finite());
    }
}

#[test]
fn non_finite_loss_aborts_with_iteration() {
    let model = Model::new(&micro_config(32), &micro_options()).unwrap();
    let mut store = model.init::<f32>(0).unwrap();
    let shape = store.get("cls.out.weight").unwrap().shape().to_vec();
    store.set("cls.out.weight", Tensor::full(&shape, f32::NAN)).unwrap();
    let src = scenes(Domain::Source, 0..2, 32);
    let cfg = TrainerConfig { adversarial: false, ..TrainerConfig::default() };
    let err = train(&model, store, &src, &[], None, &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { iteration: 1 }), "{err:?}");
}

#[test]
fn training_rejects_bad_inputs() {
    let model = Model::new(&micro_config(32), &micro_options()).unwrap();
    let store = model.init::<f32>(0).unwrap();
    let src = scenes(Domain::Source, 0..2, 32);
    let cfg = TrainerConfig::default();
    assert!(train(&model, store.clone(), &[], &src, None, &cfg).is_err());
    assert!(train(&model, store.clone(), &src, &[], None, &cfg).is_err());
    let big = scenes(Domain::Source, 0..1, 64);
    assert!(train(&model, store.clone(), &big, &src, None, &cfg).is_err());
    let bad = TrainerConfig { batch_source: 0, ..TrainerConfig::default() };
    assert!(matches!(train(&model, store, &src, &src, None, &bad), Err(Error::Config(_))));
}

#[test]
fn decoder_pretraining_only_moves_decoder() {
    let model = Model::new(&micro_config(32), &ModelOptions { use_decoder: true, ..micro_options() }).unwrap();
    let store = model.init::<f32>(2).unwrap();
    let src = scenes(Domain::Source, 0..4, 32);
    let tgt = scenes(Domain::Target, 10..14, 32);
    let cfg = TrainerConfig { epochs: 1, batch_source: 4, decoder_pretrain_steps: 3, ..TrainerConfig::default() };
    let out = train(&model, store, &src, &tgt, None, &cfg).unwrap();
    // three reconstruction steps, then one generator step
    assert_eq!(out.store.entry("dec.out.weight").unwrap().step, 3);
    assert_eq!(out.optimizers.gen.step("dec.out.weight"), 1);
    assert!(out.log.iter().all(|r| r.d_loss.unwrap().is_finite()));
}

#[test]
fn shift_toy_single_seed_converges() {
    let trace = shift_toy(&ShiftToyConfig::default()).unwrap();
    assert_eq!(trace.shifts.len(), 500);
    assert!((trace.final_shift() - 2.0).abs() < 0.1, "{}", trace.final_shift());
}

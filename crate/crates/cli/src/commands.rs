use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use roadseg::adversarial::{train as run_training, write_log_csv, Model, ProbeSet};
use roadseg::checkpoint::{self, CheckpointHeader};
use roadseg::data::{load_manifest, read_pgm, read_ppm, write_dataset, write_pgm, Domain, RoadScene};
use roadseg::likelihood::{log_likelihood, KdeModel};
use roadseg::metrics::{embed_pooled, evaluate, EvalItem, SegMask};
use roadseg::{Error, ParamStore, Result, RunConfig, Tensor};

const ROAD: u32 = 1;

fn with_path(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| with_path(path, e))
}

fn load_scenes(dir: &Path) -> Result<Vec<RoadScene>> {
    let manifest = load_manifest(dir)?;
    manifest.check_files()?;
    manifest.load_all()
}

fn load_model(ckpt: &Path) -> Result<(CheckpointHeader, Model, ParamStore<f32>)> {
    let bytes = std::fs::read(ckpt).map_err(|e| with_path(ckpt, e))?;
    let (header, store) = checkpoint::decode::<f32>(&bytes)?;
    let model = Model::new(&header.config.pyramid(), &header.config.model_options())?;
    Ok((header, model, store))
}

fn check_size(image: &Tensor<f32>, size: usize, path: &Path) -> Result<()> {
    let [_, h, w] = *image.shape() else {
        return Err(with_path(path, "expected a three-channel image"));
    };
    if h != size || w != size {
        return Err(Error::Config(format!(
            "{} is {w}x{h} but the checkpoint expects {size}x{size}",
            path.display()
        )));
    }
    Ok(())
}

fn mask_image(m: &SegMask) -> Result<Tensor<f32>> {
    Tensor::new(vec![1, m.height, m.width], m.labels.iter().map(|&l| l as f32).collect())
}

/// Pooled-pixel embeddings of predicted and ground-truth masks; `None`
/// below two pairs, where no covariance exists.
fn score(items: &[EvalItem], config: serde_json::Value) -> Result<serde_json::Value> {
    let features = if items.len() >= 2 {
        let pred = items.iter().map(|i| mask_image(&i.pred)).collect::<Result<Vec<_>>>()?;
        let gt = items.iter().map(|i| mask_image(&i.gt)).collect::<Result<Vec<_>>>()?;
        Some((embed_pooled(&pred)?, embed_pooled(&gt)?))
    } else {
        None
    };
    let fid = features.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
    Ok(serde_json::to_value(evaluate(items, ROAD, fid, config)?)?)
}

fn segment(model: &Model, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<SegMask> {
    let batch = image.clone().reshape(&[1, 3, image.shape()[1], image.shape()[2]])?;
    Ok(model.predict(store, &batch)?.remove(0))
}

pub fn datagen(out: &Path, count: usize, domain: Domain, seed: u64, size: usize) -> Result<()> {
    let entries = write_dataset(out, count, domain, seed, size)?;
    eprintln!("wrote {} {domain} scenes to {}", entries.len(), out.display());
    Ok(())
}

pub fn train(config: &Path, source: &Path, target: &Path, out: &Path, log: &Path, probe: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| with_path(config, e))?;
    let cfg = RunConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let source = load_scenes(source)?;
    // The baseline never reads target scenes, so the directory may be absent.
    let target = if cfg.adversarial || target.exists() { load_scenes(target)? } else { Vec::new() };
    let probe = match probe {
        Some(dir) => Some(ProbeSet::from_scenes(&load_scenes(dir)?)?),
        None => None,
    };
    let model = Model::new(&cfg.pyramid(), &cfg.model_options())?;
    let store = model.init::<f32>(cfg.seed)?;
    let outcome = run_training(&model, store, &source, &target, probe.as_ref(), &cfg.trainer())?;
    checkpoint::save(out, &outcome.store, &cfg, outcome.iterations)?;
    let file = File::create(log).map_err(|e| with_path(log, e))?;
    let mut w = BufWriter::new(file);
    write_log_csv(&mut w, &outcome.log)?;
    w.flush().map_err(|e| with_path(log, e))?;
    eprintln!(
        "trained {} iterations, {} log rows; checkpoint {}",
        outcome.iterations,
        outcome.log.len(),
        out.display()
    );
    Ok(())
}

pub fn infer(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (_, model, store) = load_model(ckpt)?;
    let img = read_ppm(image)?;
    check_size(&img, model.input_size(), image)?;
    write_pgm(out, &segment(&model, &store, &img)?)
}

pub fn eval(ckpt: &Path, manifest: &Path, report: &Path) -> Result<()> {
    let (header, model, store) = load_model(ckpt)?;
    let m = load_manifest(manifest)?;
    m.check_files()?;
    let mut items = Vec::with_capacity(m.len());
    for (i, e) in m.entries.iter().enumerate() {
        let scene = m.load(i)?;
        check_size(&scene.image, model.input_size(), &m.resolve(&e.image))?;
        let id = e.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        items.push(EvalItem { id, pred: segment(&model, &store, &scene.image)?, gt: scene.mask });
    }
    let config = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "iteration": header.iteration,
        "run": header.config,
    });
    write_json(report, score(&items, config)?)
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| with_path(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn metrics(pred: &Path, gt: &Path, report: &Path) -> Result<()> {
    let files = pgm_files(pred)?;
    if files.is_empty() {
        return Err(Error::Invalid(format!("no .pgm masks in {}", pred.display())));
    }
    let mut items = Vec::with_capacity(files.len());
    for p in files {
        let name = p.file_name().expect("listed file");
        let g = gt.join(name);
        if !g.is_file() {
            return Err(Error::Invalid(format!("no ground truth {} for {}", g.display(), p.display())));
        }
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        items.push(EvalItem { id, pred: read_pgm(&p)?, gt: read_pgm(&g)? });
    }
    let config = serde_json::json!({
        "pred": pred.display().to_string(),
        "gt": gt.display().to_string(),
    });
    write_json(report, score(&items, config)?)
}

pub fn loglik(train: &Path, image: &Path, levels: usize, report: &Path, sigma: Option<&[f64]>, normalized: bool) -> Result<()> {
    let scenes = load_scenes(train)?;
    let images: Vec<Tensor<f64>> = scenes.iter().map(|s| s.image.cast()).collect();
    let model = KdeModel::fit(&images, levels, sigma, normalized)?;
    let query: Tensor<f64> = read_ppm(image)?.cast();
    if query.shape() != images[0].shape() {
        return Err(Error::Config(format!(
            "{} has shape {:?}, training images have {:?}",
            image.display(),
            query.shape(),
            images[0].shape()
        )));
    }
    let ll = log_likelihood(&query, &model, levels)?;
    let value = serde_json::json!({
        "image": image.display().to_string(),
        "train_images": images.len(),
        "levels": levels,
        "normalized": normalized,
        "sigmas": std::iter::once(&model.coarse).chain(&model.detail_levels).map(|l| l.sigma).collect::<Vec<_>>(),
        "coarse": ll.coarse,
        "detail": ll.levels,
        "total": ll.total,
    });
    write_json(report, value)
}

pub fn inspect(ckpt: &Path) -> Result<()> {
    let bytes = std::fs::read(ckpt).map_err(|e| with_path(ckpt, e))?;
    let (header, _) = checkpoint::decode_header(&bytes)?;
    println!("{}", serde_json::to_string_pretty(&header)?);
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use roadseg::adversarial::Model;
use roadseg::data::{read_pgm, read_ppm};
use roadseg::{checkpoint, RunConfig};
use serde_json::Value;
use tempfile::TempDir;

/// Small architecture for the fast tests.
const MICRO: &str = r#"{
    "seed": 3, "image_size": 32, "backbone_channels": [4, 4, 8, 8], "num_ouns": 1,
    "oun_depth": 2, "scale_channels": 8, "attention_reduction": 2, "pool_levels": 2,
    "disc_widths": [8, 8, 4], "batch_source": 2, "batch_target": 2, "log_interval": 2,
    "epochs": 1, "lr": 0.001
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadseg")).args(args).output().expect("spawn roadseg")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = run(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn datagen(dir: &Path, count: usize, domain: &str, seed: u64, size: usize) {
    ok(&["datagen", "--out", p(dir), "--count", &count.to_string(), "--domain", domain,
        "--seed", &seed.to_string(), "--size", &size.to_string()]);
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(count: usize, size: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        datagen(&dir.path().join("src"), count, "source", 1, size);
        datagen(&dir.path().join("tgt"), count, "target", 2, size);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, json: &str) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, json).unwrap();
        path
    }

    fn train(&self, config: &Path, ckpt: &str, log: &str) -> Output {
        run(&["train", "--config", p(config), "--source", p(&self.path("src")), "--target",
            p(&self.path("tgt")), "--out", p(&self.path(ckpt)), "--log", p(&self.path(log))])
    }
}

fn with_key(base: &str, extra: &str) -> String {
    let trimmed = base.trim_end().trim_end_matches('}');
    format!("{trimmed}, {extra} }}")
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn datagen_empty_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path(), 0, "source", 0, 32);
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert_eq!(text.trim(), "[]");
}

#[test]
fn datagen_is_complete_and_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    datagen(a.path(), 5, "target", 9, 32);
    datagen(b.path(), 5, "target", 9, 32);
    let files = sorted_files(a.path());
    let count = |ext: &str| files.iter().filter(|f| f.extension().unwrap() == ext).count();
    assert_eq!((count("ppm"), count("pgm"), count("json")), (5, 5, 1));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 5);
    for f in &files {
        let other = b.path().join(f.file_name().unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(other).unwrap(), "{f:?}");
    }
}

#[test]
fn datagen_unwritable_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    let msg = fails_with(&["datagen", "--out", p(&file.join("sub")), "--count", "1", "--domain", "source"], 2);
    assert!(msg.contains("plain"), "{msg}");
}

#[test]
fn invalid_config_key_exits_2_naming_it() {
    let fx = Fixture::new(2, 32);
    let cfg = fx.config("bad.json", &with_key(MICRO, r#""learning_rate": 0.1"#));
    let out = fx.train(&cfg, "m.aspn", "log.csv");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!fx.path("m.aspn").exists());
}

#[test]
fn zero_epochs_saves_the_initialized_model() {
    let fx = Fixture::new(2, 32);
    let cfg_path = fx.config("zero.json", &MICRO.replace(r#""epochs": 1"#, r#""epochs": 0"#));
    let out = fx.train(&cfg_path, "init.aspn", "log.csv");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(fx.path("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "{log}");
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (header, store) = checkpoint::load::<f32>(&fx.path("init.aspn")).unwrap();
    assert_eq!(header.iteration, 0);
    assert_eq!(header.config, cfg);
    let model = Model::new(&cfg.pyramid(), &cfg.model_options()).unwrap();
    let init = model.init::<f32>(cfg.seed).unwrap();
    let names: Vec<_> = store.names().collect();
    assert_eq!(names, init.names().collect::<Vec<_>>());
    for (n, e) in init.iter() {
        assert_eq!(store.get(n).unwrap(), &e.value, "{n}");
    }

    // infer after the save/load cycle matches in-process prediction bitwise
    let image = fx.path("src").join("source_00000.ppm");
    ok(&["infer", "--ckpt", p(&fx.path("init.aspn")), "--image", p(&image), "--out", p(&fx.path("pred.pgm"))]);
    let img = read_ppm(&image).unwrap().reshape(&[1, 3, 32, 32]).unwrap();
    let direct = model.predict(&init, &img).unwrap().remove(0);
    assert_eq!(read_pgm(&fx.path("pred.pgm")).unwrap(), direct);
}

#[test]
fn training_logs_and_is_deterministic() {
    let fx = Fixture::new(9, 32);
    let cfg = fx.config("run.json", MICRO);
    for (ckpt, log) in [("a.aspn", "a.csv"), ("b.aspn", "b.csv")] {
        let out = fx.train(&cfg, ckpt, log);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let log = std::fs::read_to_string(fx.path("a.csv")).unwrap();
    // 9 scenes in batches of 2 give 5 iterations, logged at 2, 4 and 5
    assert_eq!(log.lines().count() - 1, 5usize.div_ceil(2));
    assert_eq!(log.lines().nth(3).unwrap().split(',').next(), Some("5"));
    assert_eq!(log, std::fs::read_to_string(fx.path("b.csv")).unwrap());
    assert_eq!(std::fs::read(fx.path("a.aspn")).unwrap(), std::fs::read(fx.path("b.aspn")).unwrap());

    let out = ok(&["inspect", "--ckpt", p(&fx.path("a.aspn"))]);
    let header: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(header["iteration"], 5);
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["config"]["seed"], 3);
    assert!(header["params"].as_array().unwrap().len() > 10);

    let report = fx.path("eval.json");
    ok(&["eval", "--ckpt", p(&fx.path("a.aspn")), "--manifest", p(&fx.path("tgt")), "--report", p(&report)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 9);
    assert!(report["aggregate"]["pri"].as_f64().unwrap() <= 1.0);
}

#[test]
fn nan_abort_exits_3_with_iteration() {
    let fx = Fixture::new(4, 32);
    let cfg = fx.config("nan.json", &MICRO.replace(r#""lr": 0.001"#, r#""lr": 1e300"#));
    let out = fx.train(&cfg, "m.aspn", "log.csv");
    let msg = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{msg}");
    assert!(msg.contains("iteration 1"), "{msg}");
}

#[test]
fn desk_epoch_over_32_scenes_is_fast() {
    let fx = Fixture::new(32, 64);
    let cfg = fx.config("desk.json", r#"{"epochs": 1, "log_interval": 2}"#);
    let start = Instant::now();
    let out = fx.train(&cfg, "desk.aspn", "desk.csv");
    let elapsed = start.elapsed();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elapsed < Duration::from_secs(60), "{elapsed:?}");
    let log = std::fs::read_to_string(fx.path("desk.csv")).unwrap();
    assert_eq!(log.lines().count() - 1, 7usize.div_ceil(2));
}

#[test]
fn infer_rejects_mismatched_image_size() {
    let fx = Fixture::new(1, 32);
    let cfg = fx.config("zero.json", &MICRO.replace(r#""epochs": 1"#, r#""epochs": 0"#));
    assert!(fx.train(&cfg, "m.aspn", "log.csv").status.success());
    let other = fx.path("big");
    datagen(&other, 1, "source", 0, 64);
    let msg = fails_with(&["infer", "--ckpt", p(&fx.path("m.aspn")), "--image",
        p(&other.join("source_00000.ppm")), "--out", p(&fx.path("x.pgm"))], 2);
    assert!(msg.contains("64x64"), "{msg}");
}

#[test]
fn damaged_checkpoints_exit_2() {
    let fx = Fixture::new(1, 32);
    let cfg = fx.config("zero.json", &MICRO.replace(r#""epochs": 1"#, r#""epochs": 0"#));
    assert!(fx.train(&cfg, "m.aspn", "log.csv").status.success());
    let bytes = std::fs::read(fx.path("m.aspn")).unwrap();
    std::fs::write(fx.path("cut.aspn"), &bytes[..bytes.len() - 3]).unwrap();
    let msg = fails_with(&["inspect", "--ckpt", p(&fx.path("cut.aspn"))], 2);
    assert!(msg.contains("payload shorter than header declares"), "{msg}");
    let mut v2 = bytes.clone();
    v2[4] = 9;
    std::fs::write(fx.path("v2.aspn"), &v2).unwrap();
    let image = fx.path("src").join("source_00000.ppm");
    let msg = fails_with(&["infer", "--ckpt", p(&fx.path("v2.aspn")), "--image", p(&image), "--out",
        p(&fx.path("x.pgm"))], 2);
    assert!(msg.contains("version 9"), "{msg}");
    let mut bad = bytes;
    bad[..4].copy_from_slice(b"NOPE");
    std::fs::write(fx.path("bad.aspn"), &bad).unwrap();
    fails_with(&["inspect", "--ckpt", p(&fx.path("bad.aspn"))], 2);
}

#[test]
fn metrics_on_identical_directories_are_perfect() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path(), 4, "source", 5, 32);
    let report = dir.path().join("report.json");
    ok(&["metrics", "--pred", p(dir.path()), "--gt", p(dir.path()), "--report", p(&report)]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let agg = &r["aggregate"];
    assert_eq!(agg["iou"], 1.0);
    assert_eq!(agg["voi"], 0.0);
    assert_eq!(agg["bde"], 0.0);
    assert_eq!(agg["pri"], 1.0);
    assert!(r["fid"].as_f64().unwrap().abs() < 1e-9, "{}", r["fid"]);
    assert_eq!(r["per_image"].as_array().unwrap().len(), 4);
    let empty = tempfile::tempdir().unwrap();
    fails_with(&["metrics", "--pred", p(empty.path()), "--gt", p(dir.path()), "--report", p(&report)], 2);
}

#[test]
fn loglik_reports_per_level_terms() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    datagen(&train, 4, "source", 0, 32);
    let query = dir.path().join("query");
    datagen(&query, 1, "target", 0, 32);
    let image = query.join("target_00000.ppm");
    let report = dir.path().join("ll.json");
    ok(&["loglik", "--train", p(&train), "--image", p(&image), "--levels", "2", "--report", p(&report)]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["detail"].as_array().unwrap().len(), 2);
    assert_eq!(r["sigmas"].as_array().unwrap().len(), 3);
    assert!(r["total"].as_f64().unwrap().is_finite());
    let score = |img: &Path| {
        ok(&["loglik", "--train", p(&train), "--image", p(img), "--levels", "2", "--report", p(&report),
            "--sigma", "0.5,0.5,0.5", "--unnormalized"]);
        let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        r["total"].as_f64().unwrap()
    };
    assert!(score(&train.join("source_00000.ppm")) > score(&image));
    fails_with(&["loglik", "--train", p(&train), "--image", p(&image), "--levels", "2", "--report",
        p(&report), "--sigma", "1.0"], 2);
}

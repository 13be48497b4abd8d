use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fopro_cli::compare_runs;
use fopro_core::data::Split;
use fopro_core::eval::MetricsReport;
use fopro_core::fpg::{sample_noise, FourierPromptGenerator};
use fopro_core::plot::{image_grid, log_amplitude_tile};
use fopro_core::rng::derived_rng;
use image::RgbImage;
use ndarray::{ArrayD, IxDyn};
use tempfile::TempDir;

fn tiny_config(method: &str, seed: u64, max_epochs: usize) -> String {
    format!(
        r#"name = "tiny"
method = "{method}"
seed = {seed}
batch_size = 16

[data]
kind = "synthetic"
full_counts = [70, 40, 30]
train_counts = [50, 16, 6]
val_per_class = 6
test_per_class = 6
resolution = 16
head_min = 40
tail_max = 10

[teacher]
kind = "toy"
channels = [8, 16]
strides = [1, 2]

[student]
channels = [4, 8]
strides = [1, 2]

[fpg]
noise_dim = 16

[schedule]
max_epochs = {max_epochs}
early_stop_patience = {max_epochs}
"#
    )
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, text: &str) -> PathBuf {
        let p = self.path(rel);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fopro"))
            .args(args)
            .current_dir(self.dir.path())
            .env("FOPRO_OUT_ROOT", self.path("runs"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "fopro {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            !out.status.success(),
            "fopro {args:?} unexpectedly succeeded"
        );
        String::from_utf8(out.stderr).unwrap()
    }

    /// Trains a tiny run to completion and returns its directory.
    fn train(&self, method: &str, seed: u64, epochs: usize, out: &str) -> PathBuf {
        let cfg = self.write(&format!("{out}.toml"), &tiny_config(method, seed, epochs));
        self.ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out]);
        self.path(out)
    }
}

fn report(path: &Path) -> MetricsReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn png(path: &Path) -> RgbImage {
    image::open(path).unwrap().to_rgb8()
}

#[test]
fn build_dataset_prints_and_saves_the_spec_counts() {
    let ws = Workspace::new();
    let cfg = ws.write("c.toml", &tiny_config("ce", 0, 1));
    let stdout = ws.ok(&["build-dataset", "--config", "c.toml", "--out", "ds"]);
    for (name, train) in [("class0", 50), ("class1", 16), ("class2", 6)] {
        let line = stdout.lines().find(|l| l.starts_with(name)).unwrap();
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1..4], [train.to_string().as_str(), "6", "6"], "{line}");
    }
    let counts = fs::read_to_string(ws.path("ds/counts.csv")).unwrap();
    assert_eq!(
        counts,
        "class,train,val,test,group\nclass0,50,6,6,head\nclass1,16,6,6,medium\nclass2,6,6,6,tail\n"
    );
    let first = fs::read(ws.path("ds/manifest.csv")).unwrap();
    ws.ok(&[
        "build-dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "ds",
    ]);
    assert_eq!(first, fs::read(ws.path("ds/manifest.csv")).unwrap());

    ws.ok(&["build-dataset", "--config", "c.toml"]);
    assert!(ws.path("runs/tiny-dataset/manifest.csv").exists());
}

#[test]
fn build_dataset_reproduces_the_isic_1_to_100_training_counts() {
    let ws = Workspace::new();
    let table = fopro_core::data::isic_table();
    let mut list = String::from("path,label\n");
    for (label, &n) in table.rows["full"].iter().enumerate() {
        for i in 0..n {
            list.push_str(&format!("img/{label}_{i}.jpg,{label}\n"));
        }
    }
    ws.write("source.csv", &list);
    ws.write(
        "isic.toml",
        "method = \"ce\"\n[data]\nkind = \"files\"\nisic_row = \"1:100\"\nsource_list = \"source.csv\"\n\
         [teacher]\nkind = \"toy\"\n",
    );
    ws.ok(&["build-dataset", "--config", "isic.toml", "--out", "isic"]);
    let mut reader = csv::Reader::from_path(ws.path("isic/counts.csv")).unwrap();
    let train: Vec<usize> = reader
        .records()
        .map(|r| r.unwrap()[1].parse().unwrap())
        .collect();
    assert_eq!(train, [12725, 4372, 3173, 1788, 717, 478, 103, 89]);
}

#[test]
fn build_dataset_surfaces_shortfalls() {
    let ws = Workspace::new();
    let text =
        tiny_config("ce", 0, 1).replace("full_counts = [70, 40, 30]", "full_counts = [70, 40, 15]");
    ws.write("c.toml", &text);
    let err = ws.fails(&["build-dataset", "--config", "c.toml", "--out", "ds"]);
    assert!(err.contains("class2") || err.contains("class 2"), "{err}");
}

#[test]
fn train_writes_a_self_contained_run() {
    let ws = Workspace::new();
    let run = ws.train("fopro_kd", 0, 6, "run");
    for f in [
        "config.toml",
        "manifest.csv",
        "teacher.safetensors",
        "metrics.jsonl",
        "last.safetensors",
        "best.safetensors",
        "report-test.json",
        "confusion-test.csv",
    ] {
        assert!(run.join(f).metadata().unwrap().len() > 0, "{f}");
    }
    for f in [
        "loss_curves.png",
        "validation_curves.png",
        "confusion-test.png",
    ] {
        let img = png(&run.join(f));
        assert!(img.width() > 1 && img.height() > 1, "{f}");
    }
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    // Re-evaluating the best checkpoint from the directory alone gives the
    // report written at the end of training.
    let written = fs::read(run.join("report-test.json")).unwrap();
    ws.ok(&["evaluate", run.to_str().unwrap()]);
    assert_eq!(written, fs::read(run.join("report-test.json")).unwrap());
}

#[test]
fn default_run_dir_comes_from_the_environment_root() {
    let ws = Workspace::new();
    ws.write("c.toml", &tiny_config("ce", 0, 1));
    ws.ok(&["train", "--config", "c.toml", "--seed", "3"]);
    let run = ws.path("runs/tiny-ce-seed3");
    assert!(run.join("report-test.json").exists());
    assert!(fs::read_to_string(run.join("config.toml"))
        .unwrap()
        .contains("seed = 3"));
}

#[test]
fn retraining_into_the_same_directory_is_idempotent() {
    let ws = Workspace::new();
    let run = ws.train("ekd", 1, 3, "run");
    let log = fs::read(run.join("metrics.jsonl")).unwrap();
    let rep = fs::read(run.join("report-test.json")).unwrap();
    ws.train("ekd", 1, 3, "run");
    assert_eq!(log, fs::read(run.join("metrics.jsonl")).unwrap());
    assert_eq!(rep, fs::read(run.join("report-test.json")).unwrap());
}

#[test]
fn interrupted_and_resumed_training_matches_an_uninterrupted_run() {
    let ws = Workspace::new();
    let full = ws.train("fopro_kd", 2, 8, "full");

    let cfg = ws.write("part.toml", &tiny_config("fopro_kd", 2, 8));
    let stdout = ws.ok(&[
        "train",
        "--config",
        "part.toml",
        "--out",
        "part",
        "--stop-after",
        "5",
    ]);
    assert!(stdout.contains("--resume"), "{stdout}");
    let part = ws.path("part");
    assert!(!part.join("report-test.json").exists());
    assert_eq!(
        fs::read_to_string(part.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    ws.ok(&["train", "--resume", "--out", "part"]);

    for f in ["metrics.jsonl", "report-test.json"] {
        assert_eq!(
            fs::read(full.join(f)).unwrap(),
            fs::read(part.join(f)).unwrap(),
            "{f}"
        );
    }
    // A config that differs from the snapshot is refused.
    let edited = tiny_config("fopro_kd", 3, 8);
    fs::write(&cfg, edited).unwrap();
    let err = ws.fails(&[
        "train",
        "--resume",
        "--config",
        "part.toml",
        "--out",
        "part",
    ]);
    assert!(err.contains("different config"), "{err}");
}

#[test]
fn evaluate_is_deterministic_and_balanced() {
    let ws = Workspace::new();
    let run = ws.train("bsm", 0, 2, "run");
    let dir = run.to_str().unwrap();
    ws.ok(&["evaluate", dir, "--split", "val"]);
    let first = fs::read(run.join("report-val.json")).unwrap();
    let csv = fs::read(run.join("confusion-val.csv")).unwrap();
    ws.ok(&["evaluate", dir, "--split", "val"]);
    assert_eq!(first, fs::read(run.join("report-val.json")).unwrap());
    assert_eq!(csv, fs::read(run.join("confusion-val.csv")).unwrap());

    // Validation and test splits hold the same number of images per class.
    for f in ["report-val.json", "report-test.json"] {
        let r = report(&run.join(f));
        assert!((r.accuracy - r.balanced_accuracy).abs() < 1e-12, "{f}");
    }
    ws.ok(&["evaluate", dir, "--last"]);
    assert!(run.join("report-test-last.json").exists());
    assert!(run.join("confusion-test-last.png").exists());
}

#[test]
fn evaluate_without_a_checkpoint_fails_explicitly() {
    let ws = Workspace::new();
    let run = ws.train("ce", 0, 1, "run");
    fs::remove_file(run.join("best.safetensors")).unwrap();
    let err = ws.fails(&["evaluate", run.to_str().unwrap()]);
    assert!(err.contains("best.safetensors"), "{err}");
    let err = ws.fails(&["evaluate", ws.path("missing").to_str().unwrap(), "--last"]);
    assert!(err.starts_with("error:"), "{err}");
}

/// Tile `(row, col)` of a grid written with a 2 px border.
fn tile(img: &RgbImage, row: u32, col: u32, side: u32) -> Vec<u8> {
    let (ox, oy) = (2 + col * (side + 2), 2 + row * (side + 2));
    (oy..oy + side)
        .flat_map(|y| (ox..ox + side).flat_map(move |x| img.get_pixel(x, y).0))
        .collect()
}

#[test]
fn inspect_prompts_exports_consistent_grids() {
    let ws = Workspace::new();
    let run = ws.train("fopro_kd", 0, 6, "run");
    ws.ok(&["inspect-prompts", run.to_str().unwrap(), "--samples", "3"]);
    let dir = run.join("prompts");
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("inspect.json")).unwrap()).unwrap();
    let alphas = meta["alphas"].as_array().unwrap().len() as u32;
    assert_eq!(meta["alphas"][alphas as usize - 1], 1.0);
    let side = 16 * meta["scale"].as_u64().unwrap() as u32;

    let (x, x_hat, panel, delta) = (
        png(&dir.join("x.png")),
        png(&dir.join("x_hat.png")),
        png(&dir.join("panel.png")),
        png(&dir.join("delta.png")),
    );
    assert_eq!(delta.dimensions(), x.dimensions());
    assert_eq!(x_hat.width(), alphas * (side + 2) + 2);
    for row in 0..3 {
        let image = tile(&x, row, 0, side);
        assert_eq!(image, tile(&x_hat, row, alphas - 1, side), "row {row}");
        assert_eq!(image, tile(&panel, row, 1, side));
        assert_eq!(tile(&delta, row, 0, side), tile(&panel, row, 0, side));
        assert_ne!(image, tile(&x_hat, row, 0, side));
    }
    // Same run, same samples.
    let before = fs::read(dir.join("panel.png")).unwrap();
    ws.ok(&["inspect-prompts", run.to_str().unwrap(), "--samples", "3"]);
    assert_eq!(before, fs::read(dir.join("panel.png")).unwrap());
}

#[test]
fn flat_generator_gives_a_flat_prompt_image() {
    let (c, h, w) = (3, 8, 8);
    let fpg = FourierPromptGenerator::from_params(
        ArrayD::zeros(IxDyn(&[4, c * h * w])),
        ArrayD::ones(IxDyn(&[c * h * w])),
        c,
        h,
        w,
    )
    .unwrap();
    let z = sample_noise(&mut derived_rng(0, &[]), 4);
    let tile = log_amplitude_tile(fpg.generate(&z).unwrap().delta());
    let img = image_grid(&[tile], 1, 1);
    let px = img.get_pixel(2, 2);
    assert!((2..2 + w as u32).all(|x| (2..2 + h as u32).all(|y| img.get_pixel(x, y) == px)));
}

#[test]
fn untrained_generator_gives_a_near_flat_prompt_image() {
    let ws = Workspace::new();
    let cfg = ws.write("c.toml", &tiny_config("fopro_kd", 0, 6));
    // One exploit epoch leaves the generator at its initialization.
    ws.ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "run",
        "--stop-after",
        "1",
    ]);
    ws.ok(&["inspect-prompts", "run", "--samples", "2"]);
    let delta = png(&ws.path("run/prompts/delta.png"));
    let px = tile(&delta, 0, 0, 16 * 6);
    let lo = *px.iter().min().unwrap();
    assert!(
        lo >= 204,
        "darkest prompt pixel {lo} is below 80% of the brightest"
    );
}

#[test]
fn inspect_prompts_needs_a_generator() {
    let ws = Workspace::new();
    let run = ws.train("ce", 0, 1, "run");
    let err = ws.fails(&["inspect-prompts", run.to_str().unwrap()]);
    assert!(err.contains("no prompt generator"), "{err}");
}

#[test]
fn compare_aggregates_seeds_and_sorts_methods() {
    let ws = Workspace::new();
    let fopro: Vec<PathBuf> = (0..3)
        .map(|s| ws.train("fopro_kd", s, 6, &format!("f{s}")))
        .collect();
    let ce = ws.train("ce", 0, 1, "ce0");

    let single = compare_runs(&[&ce], Split::Test).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].runs, 1);
    assert_eq!(single[0].std("balanced_accuracy"), None);

    let rows = compare_runs(&fopro, Split::Test).unwrap();
    assert_eq!(rows.len(), 1);
    let values: Vec<f64> = fopro
        .iter()
        .map(|d| report(&d.join("report-test.json")).mcc)
        .collect();
    let mean = values.iter().sum::<f64>() / 3.0;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((rows[0].mean("mcc").unwrap() - mean).abs() < 1e-12);
    assert!((rows[0].std("mcc").unwrap() - std).abs() < 1e-12);

    let mut all = fopro.clone();
    all.push(ce.clone());
    let rows = compare_runs(&all, Split::Test).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].mean("balanced_accuracy") >= rows[1].mean("balanced_accuracy"));

    let mut args = vec!["compare".to_string()];
    args.extend(all.iter().map(|p| p.to_str().unwrap().to_string()));
    args.extend(["--out".into(), "table.csv".into()]);
    let stdout = ws.ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    assert!(stdout.contains(" ± "), "{stdout}");
    let mut reader = csv::Reader::from_path(ws.path("table.csv")).unwrap();
    assert_eq!(&reader.headers().unwrap()[2], "balanced_accuracy_mean");
    let recs: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(&recs[0][0], rows[0].label.as_str());
    let csv_std: f64 = recs.iter().find(|r| &r[1] == "3").unwrap()[7]
        .parse()
        .unwrap();
    assert!((csv_std - std).abs() < 1e-12);
}

#[test]
fn compare_refuses_heterogeneous_class_sets() {
    let ws = Workspace::new();
    let a = ws.train("ce", 0, 1, "a");
    let text = tiny_config("ce", 0, 1)
        .replace("[data]\n", "[data]\nclass_names = [\"x\", \"y\", \"z\"]\n");
    ws.write("b.toml", &text);
    ws.ok(&["train", "--config", "b.toml", "--out", "b"]);
    let err = ws.fails(&["compare", a.to_str().unwrap(), "b"]);
    assert!(err.contains("class sets differ"), "{err}");
    let err = ws.fails(&["compare", ws.path("nowhere").to_str().unwrap()]);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn invalid_inputs_exit_nonzero_with_a_diagnostic() {
    let ws = Workspace::new();
    ws.write("c.toml", &tiny_config("ce", 0, 1));
    let err = ws.fails(&["--device", "cuda", "train", "--config", "c.toml"]);
    assert!(err.contains("cpu"), "{err}");
    ws.write(
        "bad.toml",
        &tiny_config("ce", 0, 1).replace("batch_size = 16", "batch_size = 0"),
    );
    let err = ws.fails(&["train", "--config", "bad.toml"]);
    assert!(err.contains("batch_size"), "{err}");
    ws.write(
        "typo.toml",
        &tiny_config("ce", 0, 1).replace("seed = 0", "sead = 0"),
    );
    let err = ws.fails(&["build-dataset", "--config", "typo.toml"]);
    assert!(err.contains("sead"), "{err}");
    ws.fails(&["train", "--resume"]);
    ws.fails(&["evaluate", "run", "--split", "holdout"]);
}

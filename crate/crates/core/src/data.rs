//! Long-tailed splits, shot grouping, imbalance handling, synthetic images
//! and manifest I/O.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derived_rng, tags};

pub const DEFAULT_VAL_PER_CLASS: usize = 50;
pub const DEFAULT_TEST_PER_CLASS: usize = 100;
pub const HEAD_MIN: usize = 700;
pub const TAIL_MAX: usize = 70;
/// Crop padding used by augmentation at desk scale.
pub const AUGMENT_PAD: usize = 4;

const ISIC_SPLITS_CSV: &str = include_str!("../data/isic_lt_splits.csv");
const SYNTHETIC_PREFIX: &str = "synthetic:";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("class {class}: needs {required} images ({train} train + {holdout} held out), only {available} available")]
    Shortfall {
        class: String,
        available: usize,
        required: usize,
        train: usize,
        holdout: usize,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub class_names: Vec<String>,
    pub full_counts: Vec<usize>,
    pub train_counts: Vec<usize>,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub imbalance_label: String,
    pub seed: u64,
}

impl LongTailSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn holdout_per_class(&self) -> usize {
        self.val_per_class + self.test_per_class
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let k = self.class_names.len();
        if k == 0 || self.full_counts.len() != k || self.train_counts.len() != k {
            return Err(DataError::InvalidSpec(format!(
                "{k} class names, {} full counts, {} train counts",
                self.full_counts.len(),
                self.train_counts.len()
            )));
        }
        if let Some(i) = self.train_counts.iter().position(|&c| c == 0) {
            return Err(DataError::InvalidSpec(format!(
                "class {} has a zero train count",
                self.class_names[i]
            )));
        }
        for i in 0..k {
            let required = self.train_counts[i] + self.holdout_per_class();
            if self.full_counts[i] < required {
                return Err(DataError::Shortfall {
                    class: self.class_names[i].clone(),
                    available: self.full_counts[i],
                    required,
                    train: self.train_counts[i],
                    holdout: self.holdout_per_class(),
                });
            }
        }
        Ok(())
    }
}

/// Published ISIC-LT rows: class names and per-class counts by row label
/// (`full`, `1:100`, `1:200`, `1:500`, `1:1000`, `1:2000`).
#[derive(Debug, Clone, PartialEq)]
pub struct IsicTable {
    pub class_names: Vec<String>,
    pub rows: BTreeMap<String, Vec<usize>>,
}

pub fn isic_table() -> IsicTable {
    let mut reader = csv::Reader::from_reader(ISIC_SPLITS_CSV.as_bytes());
    let headers = reader.headers().expect("fixture header");
    let class_names = headers.iter().skip(1).map(str::to_string).collect();
    let rows = reader
        .records()
        .map(|r| {
            let r = r.expect("fixture row");
            let counts = r
                .iter()
                .skip(1)
                .map(|v| v.parse().expect("fixture count"))
                .collect();
            (r[0].to_string(), counts)
        })
        .collect();
    IsicTable { class_names, rows }
}

impl IsicTable {
    /// Spec for an imbalance row, with the standard 50/100 holdout.
    pub fn spec(&self, label: &str, seed: u64) -> Result<LongTailSpec, DataError> {
        let train = self
            .rows
            .get(label)
            .filter(|_| label != "full")
            .ok_or_else(|| DataError::InvalidSpec(format!("no ISIC-LT row {label:?}")))?;
        Ok(LongTailSpec {
            class_names: self.class_names.clone(),
            full_counts: self.rows["full"].clone(),
            train_counts: train.clone(),
            val_per_class: DEFAULT_VAL_PER_CLASS,
            test_per_class: DEFAULT_TEST_PER_CLASS,
            imbalance_label: label.to_string(),
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::InvalidManifest(format!(
                "unknown split {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// File path relative to the image root, or a synthetic generator key.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// Unsplit source list: `(path, label)` pairs.
pub type SourceList = Vec<(String, usize)>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn counts(&self, split: Split, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for r in self.split(split) {
            c[r.label] += 1;
        }
        c
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "split"]).unwrap();
        for r in &self.rows {
            w.write_record([r.path.as_str(), &r.label.to_string(), &r.split.to_string()])
                .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn from_csv_str(text: &str) -> Result<Self, DataError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| DataError::InvalidManifest(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(DataError::InvalidManifest(format!(
                "header must be path,label,split, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| DataError::InvalidManifest(e.to_string()))?;
            let label = rec[1].parse().map_err(|_| {
                DataError::InvalidManifest(format!("row {}: bad label {:?}", i + 1, &rec[1]))
            })?;
            rows.push(ManifestRow {
                path: rec[0].to_string(),
                label,
                split: rec[2].parse()?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_csv_string()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_str(&text)
    }
}

/// Reads a `path,label` list (further columns are ignored).
pub fn read_source_list(path: &Path) -> Result<SourceList, DataError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| DataError::InvalidManifest(e.to_string()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::InvalidManifest(e.to_string()))?;
        if rec.len() < 2 {
            return Err(DataError::InvalidManifest(
                "source rows need path,label".into(),
            ));
        }
        let label = rec[1]
            .parse()
            .map_err(|_| DataError::InvalidManifest(format!("bad label {:?}", &rec[1])))?;
        out.push((rec[0].to_string(), label));
    }
    Ok(out)
}

/// Per class: shuffles with `LongTailSpec::seed`, takes validation, then test, then
/// the train target from what remains. Rows keep source order.
pub fn build_longtail_split(
    full: &[(String, usize)],
    spec: &LongTailSpec,
) -> Result<DatasetManifest, DataError> {
    spec.validate()?;
    let k = spec.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, (_, label)) in full.iter().enumerate() {
        if *label >= k {
            return Err(DataError::InvalidManifest(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        by_class[*label].push(i);
    }
    let mut assigned: Vec<Option<Split>> = vec![None; full.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        let required = spec.train_counts[c] + spec.holdout_per_class();
        if members.len() < required {
            return Err(DataError::Shortfall {
                class: spec.class_names[c].clone(),
                available: members.len(),
                required,
                train: spec.train_counts[c],
                holdout: spec.holdout_per_class(),
            });
        }
        let mut rng = derived_rng(spec.seed, &[tags::SPLIT, c as u64]);
        members.shuffle(&mut rng);
        let (val, rest) = members.split_at(spec.val_per_class);
        let (test, rest) = rest.split_at(spec.test_per_class);
        for &i in val {
            assigned[i] = Some(Split::Val);
        }
        for &i in test {
            assigned[i] = Some(Split::Test);
        }
        for &i in &rest[..spec.train_counts[c]] {
            assigned[i] = Some(Split::Train);
        }
    }
    let rows = full
        .iter()
        .zip(assigned)
        .filter_map(|((path, label), split)| {
            split.map(|split| ManifestRow {
                path: path.clone(),
                label: *label,
                split,
            })
        })
        .collect();
    Ok(DatasetManifest { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotGroup {
    Head,
    Medium,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotGrouping {
    pub head_min: usize,
    pub tail_max: usize,
    pub groups: Vec<ShotGroup>,
}

/// Head iff more than `head_min` train images, tail iff fewer than `tail_max`.
pub fn shot_grouping_with(
    train_counts: &[usize],
    head_min: usize,
    tail_max: usize,
) -> ShotGrouping {
    let groups = train_counts
        .iter()
        .map(|&n| {
            if n > head_min {
                ShotGroup::Head
            } else if n < tail_max {
                ShotGroup::Tail
            } else {
                ShotGroup::Medium
            }
        })
        .collect();
    ShotGrouping {
        head_min,
        tail_max,
        groups,
    }
}

pub fn shot_grouping(train_counts: &[usize]) -> ShotGrouping {
    shot_grouping_with(train_counts, HEAD_MIN, TAIL_MAX)
}

/// Draws a class uniformly, then an instance uniformly within it, with
/// replacement.
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
    len: usize,
}

impl ClassBalancedSampler {
    /// `labels[i]` is the class of training index `i`.
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self, DataError> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(DataError::InvalidManifest(format!(
                    "label {l} out of range"
                )));
            }
            by_class[l].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(DataError::InvalidManifest(format!(
                "class {c} has no training samples"
            )));
        }
        Ok(Self {
            by_class,
            len: labels.len(),
        })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let members = &self.by_class[rng.gen_range(0..self.by_class.len())];
        members[rng.gen_range(0..members.len())]
    }

    /// One epoch's worth of indices (length = train-set size).
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<usize> {
        (0..self.len).map(|_| self.draw(rng)).collect()
    }
}

/// `w_k` proportional to `1 / n_k`, scaled so that the weights sum to `K`.
pub fn reweighting_weights(train_counts: &[usize]) -> Result<Vec<f64>, DataError> {
    if train_counts.is_empty() || train_counts.contains(&0) {
        return Err(DataError::InvalidSpec(
            "reweighting needs positive counts".into(),
        ));
    }
    let inv: Vec<f64> = train_counts.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    let k = train_counts.len() as f64;
    Ok(inv.iter().map(|w| w * k / total).collect())
}

/// Generator key `synthetic:{seed}:{class}:{index}`.
pub fn synthetic_key(seed: u64, class: usize, index: usize) -> String {
    format!("{SYNTHETIC_PREFIX}{seed}:{class}:{index}")
}

fn parse_synthetic_key(key: &str) -> Option<(u64, usize, usize)> {
    let mut parts = key.strip_prefix(SYNTHETIC_PREFIX)?.split(':');
    let seed = parts.next()?.parse().ok()?;
    let class = parts.next()?.parse().ok()?;
    let index = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((seed, class, index))
}

/// Unsplit synthetic source list with `spec.full_counts` keys per class.
pub fn synthetic_source(spec: &LongTailSpec) -> Result<SourceList, DataError> {
    if spec.num_classes() < 2 {
        return Err(DataError::InvalidSpec(
            "synthetic data needs at least 2 classes".into(),
        ));
    }
    Ok(spec
        .full_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| (0..n).map(move |i| (synthetic_key(spec.seed, c, i), c)))
        .collect())
}

/// Splits the synthetic source of `spec`.
pub fn synthetic_dataset_generate(spec: &LongTailSpec) -> Result<DatasetManifest, DataError> {
    build_longtail_split(&synthetic_source(spec)?, spec)
}

fn class_color(class: usize) -> [f64; 3] {
    let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let (s, v) = (0.6, 0.85);
    let f = hue.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match hue as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Procedural RGB image in `[0, 1]`: an oriented sinusoidal texture whose
/// frequency and orientation depend on the class, over a jittered class
/// colour field, plus pixel noise.
pub fn synthetic_image(seed: u64, class: usize, index: usize, resolution: usize) -> Array3<f64> {
    let mut rng = derived_rng(seed, &[tags::SYNTHETIC, class as u64, index as u64]);
    let band = (class % 8) as f64;
    let freq = (2.0 + 1.5 * band) * (1.0 + 0.15 * (rng.gen::<f64>() - 0.5));
    let theta = (class as f64 * std::f64::consts::FRAC_PI_8) % std::f64::consts::PI
        + 0.3 * (rng.gen::<f64>() - 0.5);
    let phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let contrast = 0.15 + 0.15 * rng.gen::<f64>();
    let base = class_color(class);
    let color: Vec<f64> = base
        .iter()
        .map(|c| c + 0.25 * (rng.gen::<f64>() - 0.5))
        .collect();
    let (ct, st) = (theta.cos(), theta.sin());
    let n = resolution as f64;
    let mut img = Array3::zeros((3, resolution, resolution));
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 * ct + y as f64 * st) / n;
            let wave = (std::f64::consts::TAU * freq * u + phase).sin();
            for c in 0..3 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                img[[c, y, x]] =
                    (0.5 * color[c] + 0.25 + contrast * wave + 0.06 * noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Reads an image file, converts to RGB and resizes to a square resolution.
pub fn load_image(path: &Path, resolution: usize) -> Result<Array3<f64>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    Ok(Array3::from_shape_fn(
        (3, resolution, resolution),
        |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

/// Pixels of a manifest row: synthetic keys are generated, other paths are
/// read relative to `root`.
pub fn materialize(
    row: &ManifestRow,
    resolution: usize,
    root: &Path,
) -> Result<Array3<f64>, DataError> {
    if row.path.starts_with(SYNTHETIC_PREFIX) {
        let (seed, class, index) = parse_synthetic_key(&row.path).ok_or_else(|| {
            DataError::InvalidManifest(format!("malformed synthetic key {:?}", row.path))
        })?;
        Ok(synthetic_image(seed, class, index, resolution))
    } else {
        load_image(&root.join(&row.path), resolution)
    }
}

/// One split held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSplit {
    /// `N x 3 x H x W`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let images = self.images.select(Axis(0), indices);
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    resolution: usize,
    root: &Path,
) -> Result<LoadedSplit, DataError> {
    let rows: Vec<&ManifestRow> = manifest.split(split).collect();
    let mut images = Array4::zeros((rows.len(), 3, resolution, resolution));
    for (i, row) in rows.iter().enumerate() {
        images
            .index_axis_mut(Axis(0), i)
            .assign(&materialize(row, resolution, root)?);
    }
    Ok(LoadedSplit {
        images,
        labels: rows.iter().map(|r| r.label).collect(),
    })
}

/// Random crop from a zero-padded copy, then a horizontal flip with
/// probability 1/2.
pub fn augment(img: &Array3<f64>, pad: usize, rng: &mut impl Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut padded = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    padded
        .slice_mut(s![.., pad..pad + h, pad..pad + w])
        .assign(img);
    let dy = rng.gen_range(0..=2 * pad);
    let dx = rng.gen_range(0..=2 * pad);
    let crop = padded.slice(s![.., dy..dy + h, dx..dx + w]);
    if rng.gen_bool(0.5) {
        crop.slice(s![.., .., ..;-1]).to_owned()
    } else {
        crop.to_owned()
    }
}

//! Declarative run configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    isic_table, LongTailSpec, DEFAULT_TEST_PER_CLASS, DEFAULT_VAL_PER_CLASS, HEAD_MIN, TAIL_MAX,
};
use crate::fpg::DEFAULT_NOISE_DIM;
use crate::losses::LossWeights;
use crate::nn::BackboneSpec;
use crate::train::optim::OptimizerKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn field(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: name.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy.
    Ce,
    /// Class-balanced resampling with cross-entropy.
    Rs,
    /// Inverse-frequency loss reweighting.
    Rw,
    /// Balanced softmax.
    Bsm,
    /// Balanced softmax plus feature distillation on the clean image.
    Ekd,
    /// Balanced softmax plus distillation through learned Fourier prompts,
    /// alternating with prompt exploration.
    FoproKd,
    /// Linear classifier on the frozen teacher.
    LinearProbe,
    /// Teacher with a fresh head, all parameters trained.
    FineTune,
}

impl Method {
    pub fn uses_student(self) -> bool {
        !matches!(self, Method::LinearProbe | Method::FineTune)
    }

    pub fn distills(self) -> bool {
        matches!(self, Method::Ekd | Method::FoproKd)
    }

    pub fn uses_prompts(self) -> bool {
        self == Method::FoproKd
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Rs => "rs",
            Method::Rw => "rw",
            Method::Bsm => "bsm",
            Method::Ekd => "ekd",
            Method::FoproKd => "fopro_kd",
            Method::LinearProbe => "linear_probe",
            Method::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    /// Images listed in a `path,label` source file.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Defaults to `class0`, `class1`, ... (or the ISIC names with `isic_row`).
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Per-class size of the unsplit pool; with `isic_row`, the published
    /// full counts are used instead.
    #[serde(default)]
    pub full_counts: Vec<usize>,
    #[serde(default)]
    pub train_counts: Vec<usize>,
    /// Row of the shipped ISIC-LT table supplying names and counts.
    #[serde(default)]
    pub isic_row: Option<String>,
    #[serde(default = "default_val")]
    pub val_per_class: usize,
    #[serde(default = "default_test")]
    pub test_per_class: usize,
    #[serde(default)]
    pub imbalance_label: String,
    /// Seed of the split and of synthetic image generation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// `path,label` list for `kind = "files"`.
    #[serde(default)]
    pub source_list: Option<String>,
    /// Directory that manifest paths are relative to.
    #[serde(default)]
    pub image_root: Option<String>,
    /// Prebuilt manifest; when absent the split is rebuilt from the class counts.
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default = "default_head_min")]
    pub head_min: usize,
    #[serde(default = "default_tail_max")]
    pub tail_max: usize,
}

fn default_val() -> usize {
    DEFAULT_VAL_PER_CLASS
}
fn default_test() -> usize {
    DEFAULT_TEST_PER_CLASS
}
fn default_resolution() -> usize {
    32
}
fn default_head_min() -> usize {
    HEAD_MIN
}
fn default_tail_max() -> usize {
    TAIL_MAX
}

impl DataConfig {
    pub fn longtail_spec(&self) -> Result<LongTailSpec, ConfigError> {
        let mut spec = if let Some(row) = &self.isic_row {
            isic_table()
                .spec(row, self.seed)
                .map_err(|e| field("data.isic_row", e.to_string()))?
        } else {
            let k = self.full_counts.len();
            LongTailSpec {
                class_names: if self.class_names.is_empty() {
                    (0..k).map(|i| format!("class{i}")).collect()
                } else {
                    self.class_names.clone()
                },
                full_counts: self.full_counts.clone(),
                train_counts: self.train_counts.clone(),
                val_per_class: self.val_per_class,
                test_per_class: self.test_per_class,
                imbalance_label: self.imbalance_label.clone(),
                seed: self.seed,
            }
        };
        spec.val_per_class = self.val_per_class;
        spec.test_per_class = self.test_per_class;
        if !self.imbalance_label.is_empty() {
            spec.imbalance_label = self.imbalance_label.clone();
        }
        spec.validate().map_err(|e| field("data", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Random frozen CNN calibrated on a 1/f-noise source domain.
    Toy,
    /// Teacher checkpoint supplied by the user.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    #[serde(default = "default_teacher_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

fn default_teacher_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_student_channels() -> Vec<usize> {
    vec![8, 16, 32]
}
fn default_strides() -> Vec<usize> {
    vec![1, 2, 2]
}

impl TeacherConfig {
    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec::new(&self.channels, &self.strides)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    #[serde(default = "default_student_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_strides")]
    pub strides: Vec<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            channels: default_student_channels(),
            strides: default_strides(),
        }
    }
}

impl StudentConfig {
    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec::new(&self.channels, &self.strides)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Cosine annealing over `max_epochs`.
    #[serde(default)]
    pub cosine: bool,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_clip() -> f64 {
    10.0
}

impl OptimizerConfig {
    /// Adam at 3e-4.
    pub fn adaptive() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            momentum: default_momentum(),
            weight_decay: 0.0,
            cosine: false,
            grad_clip: default_clip(),
        }
    }

    /// Momentum SGD at 0.01 with cosine annealing.
    pub fn momentum_sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            cosine: true,
            ..Self::adaptive()
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adaptive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpgConfig {
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    #[serde(default = "default_fpg_lr")]
    pub lr: f64,
}

fn default_noise_dim() -> usize {
    DEFAULT_NOISE_DIM
}
fn default_fpg_lr() -> f64 {
    1e-3
}

impl Default for FpgConfig {
    fn default() -> Self {
        Self {
            noise_dim: default_noise_dim(),
            lr: default_fpg_lr(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Exploit,
    Explore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    pub exploit_epochs_per_cycle: usize,
    pub explore_epochs_per_cycle: usize,
    /// Explore epochs count toward this budget.
    pub max_epochs: usize,
    /// Exploit epochs without validation-accuracy improvement before stopping.
    pub early_stop_patience: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            exploit_epochs_per_cycle: 5,
            explore_epochs_per_cycle: 1,
            max_epochs: 100,
            early_stop_patience: 20,
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.exploit_epochs_per_cycle == 0 || self.explore_epochs_per_cycle == 0 {
            return Err(field("schedule", "epochs per cycle must be positive"));
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(field(
                "schedule",
                "max_epochs and early_stop_patience must be positive",
            ));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(field(
                "schedule.early_stop_patience",
                "must not exceed max_epochs",
            ));
        }
        Ok(())
    }

    /// Phase of `epoch` (0-based); without exploration every epoch exploits.
    pub fn phase(&self, epoch: usize, explore: bool) -> Phase {
        let cycle = self.exploit_epochs_per_cycle + self.explore_epochs_per_cycle;
        if explore && epoch % cycle >= self.exploit_epochs_per_cycle {
            Phase::Explore
        } else {
            Phase::Exploit
        }
    }

    pub fn sequence(&self, explore: bool) -> Vec<Phase> {
        (0..self.max_epochs)
            .map(|e| self.phase(e, explore))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Random crop (4-pixel pad) and horizontal flip on training images.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Hash-check phase isolation after every optimizer step.
    #[serde(default)]
    pub debug_phase_isolation: bool,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub fpg: FpgConfig,
    #[serde(default)]
    pub schedule: PhaseSchedule,
}

/// False for NaN.
fn positive(v: f64) -> bool {
    v > 0.0
}

fn default_name() -> String {
    "run".into()
}
fn default_batch() -> usize {
    32
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size < 2 {
            return Err(field(
                "batch_size",
                "must be at least 2 (batch statistics need two samples)",
            ));
        }
        self.loss
            .validate()
            .map_err(|e| field("loss", e.to_string()))?;
        self.schedule.validate()?;
        if !positive(self.optimizer.lr) {
            return Err(field("optimizer.lr", "must be positive"));
        }
        if !positive(self.optimizer.grad_clip) {
            return Err(field("optimizer.grad_clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(field("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !positive(self.fpg.lr) || self.fpg.noise_dim == 0 {
            return Err(field("fpg", "lr and noise_dim must be positive"));
        }
        for (name, spec) in [
            ("teacher", self.teacher.backbone()),
            ("student", self.student.backbone()),
        ] {
            if spec.channels.is_empty() || spec.channels.len() != spec.strides.len() {
                return Err(field(
                    name,
                    "channels and strides must be nonempty and of equal length",
                ));
            }
            if spec.channels.contains(&0) || spec.strides.contains(&0) {
                return Err(field(name, "channels and strides must be positive"));
            }
        }
        if self.teacher.kind == TeacherKind::Checkpoint && self.teacher.checkpoint.is_none() {
            return Err(field(
                "teacher.checkpoint",
                "required when teacher.kind = \"checkpoint\"",
            ));
        }
        if self.data.kind == DataKind::Files
            && self.data.source_list.is_none()
            && self.data.manifest.is_none()
        {
            return Err(field(
                "data.source_list",
                "required for file data without a prebuilt manifest",
            ));
        }
        if self.data.resolution < 4 {
            return Err(field("data.resolution", "must be at least 4"));
        }
        let spec = self.data.longtail_spec()?;
        if spec.num_classes() < 2 {
            return Err(field("data", "at least 2 classes required"));
        }
        Ok(())
    }
}

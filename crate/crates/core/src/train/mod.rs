//! Alternating exploitation (student) / exploration (prompt generator)
//! training with early stopping, checkpoints and a metrics log.

pub mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fopro_autograd::{Gradients, Graph, Param, Tensor};
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    ConfigError, DataConfig, DataKind, ExperimentConfig, FpgConfig, Method, OptimizerConfig, Phase,
    PhaseSchedule, StudentConfig, TeacherConfig, TeacherKind,
};
pub use optim::{clip_global_norm, cosine_lr, global_norm, Optimizer, OptimizerKind};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{
    augment, build_longtail_split, load_split, read_source_list, shot_grouping_with,
    synthetic_dataset_generate, ClassBalancedSampler, DataError, DatasetManifest, LoadedSplit,
    ShotGrouping, Split, AUGMENT_PAD,
};
use crate::eval::{argmax_rows, ConfusionMatrix, EvalError, MetricsReport};
use crate::fpg::{sample_noise, FourierPromptGenerator, FpgError};
use crate::losses::{
    balance_loss, balanced_softmax_loss, bn_regularization, cross_entropy, ekd_loss,
    exploitation_loss, exploration_loss, inversion_loss, weighted_cross_entropy, BnStatistics,
    LossError,
};
use crate::models::{ModelError, StudentHandle, TeacherHandle, TransferMode};
use crate::nn::{
    export_state, import_state, named_params, named_params_mut, state_hash, RunningUpdate,
};
use crate::rng::{derived_rng, tags};
use crate::spectral::{
    decompose, mix_amplitude, mix_amplitude_var, reconstruct, reconstruct_var, ImageBatch,
    SpectralError,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TEACHER_FILE: &str = "teacher.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
const EVAL_BATCH: usize = 64;
/// Slack on the analytic loss bounds for rounding.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Fpg(#[from] FpgError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss in {phase:?} epoch {epoch}, batch {batch}: {components}")]
    NonFinite {
        phase: Phase,
        epoch: usize,
        batch: usize,
        components: String,
    },
    #[error("phase isolation violated: {0}")]
    PhaseIsolation(String),
    #[error("loss bound violated: {0}")]
    LossBound(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Progress that, together with the checkpointed weights and optimizer
/// moments, fully determines the remaining run (all randomness is derived
/// from the seed and the epoch index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub next_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub exploit_epochs_since_best: usize,
    pub stopped_early: bool,
    pub isolation_checks: u64,
}

impl TrainingState {
    fn new() -> Self {
        Self {
            next_epoch: 0,
            best_val_accuracy: None,
            best_epoch: None,
            exploit_epochs_since_best: 0,
            stopped_early: false,
            isolation_checks: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub mcc: f64,
    pub macro_f1: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub batches: usize,
    pub loss: Stat,
    pub target_loss: Option<Stat>,
    pub distill_loss: Option<Stat>,
    pub bn_loss: Option<Stat>,
    pub balance_loss: Option<Stat>,
    pub inversion_loss: Option<Stat>,
    pub grad_norm_max: f64,
    pub val: Option<ValidationMetrics>,
    pub learner_hash: String,
    pub fpg_hash: Option<String>,
    pub teacher_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop (as if interrupted) once this many epochs have completed.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub state: TrainingState,
}

#[derive(Default)]
struct Accumulator {
    loss: Vec<f64>,
    target: Vec<f64>,
    distill: Vec<f64>,
    bn: Vec<f64>,
    bal: Vec<f64>,
    inv: Vec<f64>,
    grad_norm_max: f64,
}

fn gradients_by_name(grads: &Gradients, params: &[(String, &Param)]) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .filter_map(|(n, p)| grads.get(p).map(|g| (n.clone(), g.clone())))
        .collect()
}

fn finite_or(
    phase: Phase,
    epoch: usize,
    batch: usize,
    loss: f64,
    parts: &[(&str, Option<f64>)],
) -> Result<(), TrainError> {
    let all_finite = loss.is_finite() && parts.iter().all(|(_, v)| v.is_none_or(f64::is_finite));
    if all_finite {
        return Ok(());
    }
    let mut components = format!("total={loss}");
    for (name, v) in parts {
        if let Some(v) = v {
            components.push_str(&format!(", {name}={v}"));
        }
    }
    Err(TrainError::NonFinite {
        phase,
        epoch,
        batch,
        components,
    })
}

pub struct Trainer {
    config: ExperimentConfig,
    run_dir: Option<PathBuf>,
    class_names: Vec<String>,
    grouping: ShotGrouping,
    class_counts: Vec<usize>,
    class_weights: Vec<f64>,
    train_data: LoadedSplit,
    val_data: LoadedSplit,
    test_data: LoadedSplit,
    sampler: Option<ClassBalancedSampler>,
    teacher: TeacherHandle,
    teacher_running: BnStatistics,
    teacher_hash: String,
    student: Option<StudentHandle>,
    fpg: Option<FourierPromptGenerator>,
    learner_opt: Optimizer,
    fpg_opt: Optimizer,
    state: TrainingState,
    best_student: Option<StudentHandle>,
    best_teacher: Option<TeacherHandle>,
}

/// Builds or reads the split described by the config.
pub fn resolve_manifest(config: &ExperimentConfig) -> Result<DatasetManifest, TrainError> {
    if let Some(path) = &config.data.manifest {
        return Ok(DatasetManifest::read(Path::new(path))?);
    }
    let spec = config.data.longtail_spec()?;
    Ok(match config.data.kind {
        DataKind::Synthetic => synthetic_dataset_generate(&spec)?,
        DataKind::Files => {
            let list = read_source_list(Path::new(
                config.data.source_list.as_deref().unwrap_or_default(),
            ))?;
            build_longtail_split(&list, &spec)?
        }
    })
}

fn build_teacher(config: &ExperimentConfig) -> Result<TeacherHandle, TrainError> {
    Ok(match config.teacher.kind {
        TeacherKind::Toy => TeacherHandle::toy(
            config.teacher.backbone(),
            config.data.resolution,
            &mut derived_rng(config.seed, &[tags::TEACHER]),
        )?,
        TeacherKind::Checkpoint => {
            TeacherHandle::load(Path::new(config.teacher.checkpoint.as_deref().unwrap()))?
        }
    })
}

impl Trainer {
    /// Fresh run. With a run directory, writes the config snapshot,
    /// manifest and teacher, and starts an empty metrics log.
    pub fn new(config: ExperimentConfig, run_dir: Option<&Path>) -> Result<Self, TrainError> {
        config.validate()?;
        let teacher = build_teacher(&config)?;
        let manifest = resolve_manifest(&config)?;
        let trainer = Self::assemble(config, run_dir, teacher, manifest.clone())?;
        if let Some(dir) = &trainer.run_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            // Checkpoints from an earlier run in the same directory would be
            // picked up by resume or evaluation.
            for stale in [LAST_CHECKPOINT, BEST_CHECKPOINT] {
                let path = dir.join(stale);
                if path.exists() {
                    fs::remove_file(&path).map_err(io_err(&path))?;
                }
            }
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, trainer.config.to_toml_string()).map_err(io_err(&cfg_path))?;
            manifest.write(&dir.join(MANIFEST_FILE))?;
            // The pretrained teacher, before any transfer-mode head or training.
            let pretrained = if trainer.config.method.uses_student() {
                trainer.teacher.clone()
            } else {
                build_teacher(&trainer.config)?
            };
            pretrained.save(&dir.join(TEACHER_FILE))?;
            let log = dir.join(METRICS_FILE);
            File::create(&log).map_err(io_err(&log))?;
        }
        Ok(trainer)
    }

    fn assemble(
        config: ExperimentConfig,
        run_dir: Option<&Path>,
        mut teacher: TeacherHandle,
        manifest: DatasetManifest,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let spec = config.data.longtail_spec()?;
        let k = spec.num_classes();
        let root = PathBuf::from(config.data.image_root.clone().unwrap_or_else(|| ".".into()));
        let res = config.data.resolution;
        let train_data = load_split(&manifest, Split::Train, res, &root)?;
        let val_data = load_split(&manifest, Split::Val, res, &root)?;
        let test_data = load_split(&manifest, Split::Test, res, &root)?;
        let class_counts = manifest.counts(Split::Train, k);
        if class_counts.contains(&0) {
            return Err(
                DataError::InvalidManifest("every class needs training samples".into()).into(),
            );
        }
        let grouping =
            shot_grouping_with(&class_counts, config.data.head_min, config.data.tail_max);
        let class_weights = crate::data::reweighting_weights(&class_counts)?;
        let sampler = (config.method == Method::Rs)
            .then(|| ClassBalancedSampler::new(&train_data.labels, k))
            .transpose()?;

        let mut init = derived_rng(config.seed, &[tags::INIT]);
        let student = if config.method.uses_student() {
            teacher.lock_for_distillation()?;
            let s = StudentHandle::for_teacher(config.student.backbone(), k, &teacher, &mut init)?;
            s.check_compatible(&teacher)?;
            Some(s)
        } else {
            let mode = if config.method == Method::LinearProbe {
                TransferMode::LinearProbe
            } else {
                TransferMode::FineTune
            };
            teacher.set_transfer_mode(mode, k, &mut init)?;
            None
        };
        let fpg = config.method.uses_prompts().then(|| {
            FourierPromptGenerator::new(
                config.fpg.noise_dim,
                3,
                res,
                res,
                &mut derived_rng(config.seed, &[tags::INIT, 1]),
            )
        });
        let learner_opt = Optimizer::new(
            config.optimizer.kind,
            config.optimizer.momentum,
            config.optimizer.weight_decay,
        );
        Ok(Self {
            teacher_running: teacher.running_statistics(),
            teacher_hash: state_hash(&teacher),
            class_names: spec.class_names,
            grouping,
            class_counts,
            class_weights,
            train_data,
            val_data,
            test_data,
            sampler,
            teacher,
            student,
            fpg,
            learner_opt,
            fpg_opt: Optimizer::adam(0.0),
            state: TrainingState::new(),
            best_student: None,
            best_teacher: None,
            run_dir: run_dir.map(Path::to_path_buf),
            config,
        })
    }

    /// Continues the run in `run_dir` from its last checkpoint.
    pub fn resume(run_dir: &Path) -> Result<Self, TrainError> {
        let config = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
        let last = run_dir.join(LAST_CHECKPOINT);
        if !last.exists() {
            return Err(TrainError::Resume(format!(
                "no checkpoint at {}",
                last.display()
            )));
        }
        let ckpt = Checkpoint::load(&last)?;
        if ckpt.meta("config_hash")? != config.hash() {
            return Err(TrainError::Resume(
                "checkpoint was written by a different config".into(),
            ));
        }
        let teacher = TeacherHandle::load(&run_dir.join(TEACHER_FILE))?;
        let manifest = DatasetManifest::read(&run_dir.join(MANIFEST_FILE))?;
        let mut t = Self::assemble(config, Some(run_dir), teacher.clone(), manifest.clone())?;
        t.restore(&ckpt)?;
        let best = run_dir.join(BEST_CHECKPOINT);
        if best.exists() {
            let mut b = Self::assemble(t.config.clone(), Some(run_dir), teacher, manifest)?;
            b.restore(&Checkpoint::load(&best)?)?;
            t.best_student = b.student;
            t.best_teacher = (!t.config.method.uses_student()).then_some(b.teacher);
        }
        let log = run_dir.join(METRICS_FILE);
        let kept: Vec<String> = match File::open(&log) {
            Ok(f) => BufReader::new(f)
                .lines()
                .take(t.state.next_epoch)
                .collect::<Result<_, _>>()
                .map_err(io_err(&log))?,
            Err(_) => Vec::new(),
        };
        if kept.len() != t.state.next_epoch {
            return Err(TrainError::Resume(format!(
                "metrics log has {} records, checkpoint is at epoch {}",
                kept.len(),
                t.state.next_epoch
            )));
        }
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&log, text).map_err(io_err(&log))?;
        Ok(t)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn teacher(&self) -> &TeacherHandle {
        &self.teacher
    }

    pub fn student(&self) -> Option<&StudentHandle> {
        self.student.as_ref()
    }

    pub fn fpg(&self) -> Option<&FourierPromptGenerator> {
        self.fpg.as_ref()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn grouping(&self) -> &ShotGrouping {
        &self.grouping
    }

    pub fn split(&self, split: Split) -> &LoadedSplit {
        match split {
            Split::Train => &self.train_data,
            Split::Val => &self.val_data,
            Split::Test => &self.test_data,
        }
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        self.config
            .schedule
            .phase(epoch, self.config.method.uses_prompts())
    }

    /// Hash of the model being trained (the student, or the teacher in the
    /// transfer methods).
    pub fn learner_hash(&self) -> String {
        match &self.student {
            Some(s) => state_hash(s),
            None => state_hash(&self.teacher),
        }
    }

    pub fn teacher_hash(&self) -> String {
        state_hash(&self.teacher)
    }

    pub fn fpg_hash(&self) -> Option<String> {
        self.fpg.as_ref().map(state_hash)
    }

    fn lr(&self, epoch: usize) -> f64 {
        let o = &self.config.optimizer;
        if o.cosine {
            cosine_lr(o.lr, epoch, self.config.schedule.max_epochs)
        } else {
            o.lr
        }
    }

    /// Batches of training indices for an epoch; a trailing batch of one is
    /// dropped (batch statistics need two samples).
    fn epoch_batches(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let order = match &self.sampler {
            Some(s) => s.epoch(rng),
            None => {
                let mut o: Vec<usize> = (0..self.train_data.len()).collect();
                o.shuffle(rng);
                o
            }
        };
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn batch_images(&self, indices: &[usize], rng: &mut impl Rng) -> (Array4<f64>, Vec<usize>) {
        let (mut images, labels) = self.train_data.gather(indices);
        if self.config.augment {
            for mut img in images.outer_iter_mut() {
                let a = augment(&img.to_owned(), AUGMENT_PAD, rng);
                img.assign(&a);
            }
        }
        (images, labels)
    }

    /// `x_hat` for a batch: prompted reconstruction for `fopro_kd`, the clean
    /// image otherwise. Draws `z` then one `alpha` per sample.
    fn prompted(&self, x: &Array4<f64>, rng: &mut impl Rng) -> Result<Array4<f64>, TrainError> {
        let Some(fpg) = &self.fpg else {
            return Ok(x.clone());
        };
        let z = sample_noise(rng, fpg.noise_dim());
        let prompt = fpg.generate(&z)?;
        let alpha: Vec<f64> = (0..x.dim().0).map(|_| rng.gen::<f64>()).collect();
        let s = decompose(&ImageBatch::new(x.clone())?)?;
        let a_hat = mix_amplitude(&s.amplitude, &prompt, &alpha)?;
        Ok(reconstruct(&a_hat, &s.phase)?.into_inner())
    }

    fn check_isolation(
        &mut self,
        phase: Phase,
        before: &(String, Option<String>, String),
    ) -> Result<(), TrainError> {
        if !self.config.debug_phase_isolation {
            return Ok(());
        }
        let (learner, fpg, teacher) = before;
        if self.config.method.uses_student() && &self.teacher_hash() != teacher {
            return Err(TrainError::PhaseIsolation(format!(
                "teacher changed during {phase:?}"
            )));
        }
        match phase {
            Phase::Exploit if &self.fpg_hash() != fpg => {
                return Err(TrainError::PhaseIsolation(
                    "prompt generator changed during exploitation".into(),
                ))
            }
            Phase::Explore if &self.learner_hash() != learner => {
                return Err(TrainError::PhaseIsolation(
                    "student changed during exploration".into(),
                ))
            }
            _ => {}
        }
        self.state.isolation_checks += 1;
        Ok(())
    }

    fn snapshot_hashes(&self) -> (String, Option<String>, String) {
        if self.config.debug_phase_isolation {
            (self.learner_hash(), self.fpg_hash(), self.teacher_hash())
        } else {
            Default::default()
        }
    }

    /// Student (or transfer-mode teacher) update on every training batch.
    pub fn run_exploit_epoch(&mut self, epoch: usize) -> Result<EpochRecord, TrainError> {
        let mut data_rng = derived_rng(self.config.seed, &[tags::EPOCH, epoch as u64, 0]);
        let mut prompt_rng = derived_rng(self.config.seed, &[tags::EPOCH, epoch as u64, 1]);
        let lr = self.lr(epoch);
        let w = self.config.loss;
        let method = self.config.method;
        let distill = method.distills() && w.lambda_f > 0.0;
        let mut acc = Accumulator::default();
        let batches = self.epoch_batches(&mut data_rng);
        for (b, indices) in batches.iter().enumerate() {
            let (x, labels) = self.batch_images(indices, &mut data_rng);
            let before = self.snapshot_hashes();
            let target = if distill {
                let x_hat = self.prompted(&x, &mut prompt_rng)?;
                Some(self.teacher.features(&ImageBatch::new(x_hat)?)?)
            } else {
                None
            };
            let g = Graph::new();
            let input = g.constant(x.into_dyn());
            let (logits, projection, updates, trainable) = match &self.student {
                Some(s) => {
                    let out = s.forward_var(&g, input, true)?;
                    (
                        out.logits,
                        Some(out.projection),
                        out.updates,
                        named_params(s),
                    )
                }
                None => {
                    let out = self.teacher.classify_var(&g, input, true)?;
                    let fine_tune = self.teacher.mode() == TransferMode::FineTune;
                    let params = named_params(&self.teacher)
                        .into_iter()
                        .filter(|(n, _)| fine_tune || n.starts_with("head."))
                        .collect();
                    (out.logits, None, out.updates, params)
                }
            };
            let l_t = match method {
                Method::Ce | Method::Rs | Method::LinearProbe | Method::FineTune => {
                    cross_entropy(logits, &labels)?
                }
                Method::Rw => weighted_cross_entropy(logits, &labels, &self.class_weights)?,
                Method::Bsm | Method::Ekd | Method::FoproKd => {
                    balanced_softmax_loss(logits, &labels, &self.class_counts)?
                }
            };
            let l_f = match (target, projection) {
                (Some(t), Some(y)) => Some(ekd_loss(y, g.constant(t.into_dyn()))?),
                _ => None,
            };
            let loss = match l_f {
                Some(l_f) => exploitation_loss(l_t, l_f, &w),
                None => l_t,
            };
            let (lv, tv, fv) = (loss.scalar(), l_t.scalar(), l_f.map(|v| v.scalar()));
            finite_or(
                Phase::Exploit,
                epoch,
                b,
                lv,
                &[("target", Some(tv)), ("distill", fv)],
            )?;
            if let Some(f) = fv {
                if !(-BOUND_SLACK..=4.0 + BOUND_SLACK).contains(&f) {
                    return Err(TrainError::LossBound(format!(
                        "distillation loss {f} outside [0, 4]"
                    )));
                }
                acc.distill.push(f);
            }
            acc.loss.push(lv);
            acc.target.push(tv);
            let grads = g.backward(loss);
            let mut grads = gradients_by_name(&grads, &trainable);
            drop(trainable);
            drop(g);
            acc.grad_norm_max = acc.grad_norm_max.max(clip_global_norm(
                &mut grads,
                self.config.optimizer.grad_clip,
            ));
            self.apply_learner_step(&grads, &updates, lr)?;
            self.check_isolation(Phase::Exploit, &before)?;
        }
        self.finish_record(epoch, Phase::Exploit, lr, batches.len(), acc)
    }

    fn apply_learner_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        updates: &[RunningUpdate],
        lr: f64,
    ) -> Result<(), TrainError> {
        match &mut self.student {
            Some(s) => {
                self.learner_opt.step(named_params_mut(s), grads, lr);
                s.apply_updates(updates);
            }
            None => {
                self.learner_opt
                    .step(named_params_mut(&mut self.teacher), grads, lr);
                self.teacher.apply_updates(updates)?;
            }
        }
        Ok(())
    }

    /// Prompt-generator update on every training batch; student and teacher
    /// stay fixed.
    pub fn run_explore_epoch(&mut self, epoch: usize) -> Result<EpochRecord, TrainError> {
        let (Some(fpg), Some(_)) = (&self.fpg, &self.student) else {
            return Err(TrainError::PhaseIsolation(format!(
                "method {} has no exploration phase",
                self.config.method.name()
            )));
        };
        let (c, h, wd) = fpg.prompt_shape();
        let mut data_rng = derived_rng(self.config.seed, &[tags::EPOCH, epoch as u64, 0]);
        let mut prompt_rng = derived_rng(self.config.seed, &[tags::EPOCH, epoch as u64, 1]);
        let w = self.config.loss;
        let lr = self.config.fpg.lr;
        let bal_floor = -(self.teacher.feature_dim() as f64).ln();
        let mut acc = Accumulator::default();
        let batches = self.epoch_batches(&mut data_rng);
        for (b, indices) in batches.iter().enumerate() {
            let (x, _) = self.batch_images(indices, &mut data_rng);
            let before = self.snapshot_hashes();
            let fpg = self.fpg.as_ref().unwrap();
            let bsz = x.dim().0;
            let z = sample_noise(&mut prompt_rng, fpg.noise_dim());
            let alpha: Vec<f64> = (0..bsz).map(|_| prompt_rng.gen::<f64>()).collect();
            let batch = ImageBatch::new(x)?;
            let (_, y) = self.student.as_ref().unwrap().student_forward(&batch)?;
            let s = decompose(&batch)?;
            let g = Graph::new();
            let delta = fpg.generate_var(&g, &z, true)?.reshape(&[1, c, h, wd]);
            let alpha_v =
                g.constant(ArrayD::from_shape_vec(IxDyn(&[bsz, 1, 1, 1]), alpha).unwrap());
            let a_hat = mix_amplitude_var(g.constant(s.amplitude.into_dyn()), delta, alpha_v);
            let x_hat = reconstruct_var(a_hat, g.constant(s.phase.into_dyn()));
            let t = self.teacher.forward_var(&g, x_hat, true)?;
            let l_bn = bn_regularization(&t.captured, &self.teacher_running)?;
            let l_bal = balance_loss(t.features)?;
            let l_inv = inversion_loss(l_bn, l_bal, &w);
            let l_f = ekd_loss(g.constant(y.into_dyn()), t.features)?;
            let loss = exploration_loss(l_f, l_inv, &w);
            let (lv, bn, bal, inv, f) = (
                loss.scalar(),
                l_bn.scalar(),
                l_bal.scalar(),
                l_inv.scalar(),
                l_f.scalar(),
            );
            finite_or(
                Phase::Explore,
                epoch,
                b,
                lv,
                &[
                    ("bn", Some(bn)),
                    ("balance", Some(bal)),
                    ("inversion", Some(inv)),
                    ("distill", Some(f)),
                ],
            )?;
            if bn < 0.0 || !(bal_floor - BOUND_SLACK..=BOUND_SLACK).contains(&bal) {
                return Err(TrainError::LossBound(format!(
                    "bn loss {bn}, balance loss {bal}"
                )));
            }
            if !(-BOUND_SLACK..=4.0 + BOUND_SLACK).contains(&f) {
                return Err(TrainError::LossBound(format!(
                    "distillation loss {f} outside [0, 4]"
                )));
            }
            acc.loss.push(lv);
            acc.bn.push(bn);
            acc.bal.push(bal);
            acc.inv.push(inv);
            acc.distill.push(f);
            let grads = g.backward(loss);
            let mut grads = gradients_by_name(&grads, &named_params(fpg));
            drop(g);
            acc.grad_norm_max = acc.grad_norm_max.max(clip_global_norm(
                &mut grads,
                self.config.optimizer.grad_clip,
            ));
            let fpg = self.fpg.as_mut().unwrap();
            self.fpg_opt.step(named_params_mut(fpg), &grads, lr);
            self.check_isolation(Phase::Explore, &before)?;
        }
        self.finish_record(epoch, Phase::Explore, lr, batches.len(), acc)
    }

    fn finish_record(
        &mut self,
        epoch: usize,
        phase: Phase,
        lr: f64,
        batches: usize,
        acc: Accumulator,
    ) -> Result<EpochRecord, TrainError> {
        let teacher_hash = self.teacher_hash();
        if self.config.method.uses_student() && teacher_hash != self.teacher_hash {
            return Err(TrainError::PhaseIsolation(
                "teacher parameters or statistics changed".into(),
            ));
        }
        let val = match phase {
            Phase::Exploit => {
                let r = self.evaluate(Split::Val)?;
                Some(ValidationMetrics {
                    accuracy: r.accuracy,
                    balanced_accuracy: r.balanced_accuracy,
                    mcc: r.mcc,
                    macro_f1: r.macro_f1,
                })
            }
            Phase::Explore => None,
        };
        Ok(EpochRecord {
            epoch,
            phase,
            lr,
            batches,
            loss: Stat::of(&acc.loss).unwrap_or_default(),
            target_loss: Stat::of(&acc.target),
            distill_loss: Stat::of(&acc.distill),
            bn_loss: Stat::of(&acc.bn),
            balance_loss: Stat::of(&acc.bal),
            inversion_loss: Stat::of(&acc.inv),
            grad_norm_max: acc.grad_norm_max,
            val,
            learner_hash: self.learner_hash(),
            fpg_hash: self.fpg_hash(),
            teacher_hash,
        })
    }

    /// Eval-mode logits of the current learner.
    pub fn predict(&self, images: &Array4<f64>) -> Result<Array2<f64>, TrainError> {
        predict_with(self.student.as_ref(), &self.teacher, images)
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricsReport, TrainError> {
        self.report_for(self.student.as_ref(), &self.teacher, split)
    }

    /// Metrics of the best-validation model (the current one if no
    /// validation has run yet).
    pub fn evaluate_best(&self, split: Split) -> Result<MetricsReport, TrainError> {
        match (&self.best_student, &self.best_teacher) {
            (Some(s), _) => self.report_for(Some(s), &self.teacher, split),
            (None, Some(t)) => self.report_for(None, t, split),
            _ => self.evaluate(split),
        }
    }

    fn report_for(
        &self,
        student: Option<&StudentHandle>,
        teacher: &TeacherHandle,
        split: Split,
    ) -> Result<MetricsReport, TrainError> {
        let data = self.split(split);
        let logits = predict_with(student, teacher, &data.images)?;
        let cm = ConfusionMatrix::from_predictions(
            &data.labels,
            &argmax_rows(&logits),
            self.class_names.len(),
        )?;
        Ok(MetricsReport::compute(
            &cm,
            &self.grouping,
            &self.class_names,
        )?)
    }

    /// Runs epochs until the budget is spent, early stopping triggers, or
    /// `options.stop_after_epochs` is reached.
    pub fn train(&mut self, options: &TrainOptions) -> Result<TrainSummary, TrainError> {
        let mut records = Vec::new();
        while self.state.next_epoch < self.config.schedule.max_epochs && !self.state.stopped_early {
            if options
                .stop_after_epochs
                .is_some_and(|n| self.state.next_epoch >= n)
            {
                break;
            }
            let epoch = self.state.next_epoch;
            let record = match self.phase(epoch) {
                Phase::Exploit => self.run_exploit_epoch(epoch)?,
                Phase::Explore => self.run_explore_epoch(epoch)?,
            };
            let mut improved = false;
            if let Some(val) = &record.val {
                if self
                    .state
                    .best_val_accuracy
                    .is_none_or(|b| val.accuracy > b)
                {
                    self.state.best_val_accuracy = Some(val.accuracy);
                    self.state.best_epoch = Some(epoch);
                    self.state.exploit_epochs_since_best = 0;
                    self.best_student = self.student.clone();
                    self.best_teacher = self.student.is_none().then(|| self.teacher.clone());
                    improved = true;
                } else {
                    self.state.exploit_epochs_since_best += 1;
                    if self.state.exploit_epochs_since_best
                        >= self.config.schedule.early_stop_patience
                    {
                        self.state.stopped_early = true;
                    }
                }
            }
            self.state.next_epoch = epoch + 1;
            log::info!(
                "epoch {epoch} {:?}: loss {:.4}{}",
                record.phase,
                record.loss.mean,
                record
                    .val
                    .as_ref()
                    .map_or(String::new(), |v| format!(", val acc {:.4}", v.accuracy))
            );
            self.persist(&record, improved)?;
            records.push(record);
        }
        Ok(TrainSummary {
            records,
            state: self.state.clone(),
        })
    }

    fn persist(&self, record: &EpochRecord, improved: bool) -> Result<(), TrainError> {
        let Some(dir) = &self.run_dir else {
            return Ok(());
        };
        let log = dir.join(METRICS_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log)
            .map_err(io_err(&log))?;
        writeln!(
            f,
            "{}",
            serde_json::to_string(record).expect("record serializes")
        )
        .map_err(io_err(&log))?;
        let ckpt = self.to_checkpoint();
        ckpt.save(&dir.join(LAST_CHECKPOINT))?;
        if improved {
            ckpt.save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        match &self.student {
            Some(s) => ckpt.insert_all(export_state(s, "student")),
            None => ckpt.insert_all(export_state(&self.teacher, "teacher")),
        }
        if let Some(f) = &self.fpg {
            ckpt.insert_all(export_state(f, "fpg"));
        }
        ckpt.insert_all(self.learner_opt.export("opt.learner"));
        ckpt.insert_all(self.fpg_opt.export("opt.fpg"));
        let arch = serde_json::json!({
            "method": self.config.method.name(),
            "teacher": self.teacher.arch(),
            "student": self.student.as_ref().map(|s| s.arch().clone()),
            "fpg": self.fpg.as_ref().map(|f| {
                let (c, h, w) = f.prompt_shape();
                [f.noise_dim(), c, h, w]
            }),
        });
        ckpt.metadata.insert("kind".into(), "run".into());
        ckpt.metadata.insert("arch".into(), arch.to_string());
        ckpt.metadata
            .insert("config".into(), self.config.to_toml_string());
        ckpt.metadata
            .insert("config_hash".into(), self.config.hash());
        ckpt.metadata.insert(
            "state".into(),
            serde_json::to_string(&self.state).expect("state serializes"),
        );
        ckpt
    }

    /// Restores weights, optimizer moments and progress from a checkpoint
    /// of the same configuration.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let corrupt = |m: String| TrainError::Resume(m);
        if ckpt.meta("config_hash")? != self.config.hash() {
            return Err(corrupt(
                "checkpoint was written by a different config".into(),
            ));
        }
        match &mut self.student {
            Some(s) => import_state(s, "student", &ckpt.tensors).map_err(corrupt)?,
            None => import_state(&mut self.teacher, "teacher", &ckpt.tensors).map_err(corrupt)?,
        }
        if let Some(f) = &mut self.fpg {
            import_state(f, "fpg", &ckpt.tensors).map_err(corrupt)?;
        }
        self.learner_opt
            .import(&ckpt.section("opt.learner"))
            .map_err(corrupt)?;
        self.fpg_opt
            .import(&ckpt.section("opt.fpg"))
            .map_err(corrupt)?;
        self.state = serde_json::from_str(ckpt.meta("state")?)
            .map_err(|e| corrupt(format!("training state: {e}")))?;
        Ok(())
    }

    /// Loads the best (or last) checkpoint of a finished run directory for
    /// evaluation.
    pub fn load_run(run_dir: &Path, best: bool) -> Result<Self, TrainError> {
        let config = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
        let path = run_dir.join(if best {
            BEST_CHECKPOINT
        } else {
            LAST_CHECKPOINT
        });
        if !path.exists() {
            return Err(TrainError::Resume(format!(
                "missing checkpoint {}",
                path.display()
            )));
        }
        let teacher = TeacherHandle::load(&run_dir.join(TEACHER_FILE))?;
        let manifest = DatasetManifest::read(&run_dir.join(MANIFEST_FILE))?;
        let mut t = Self::assemble(config, Some(run_dir), teacher, manifest)?;
        t.restore(&Checkpoint::load(&path)?)?;
        Ok(t)
    }
}

fn predict_with(
    student: Option<&StudentHandle>,
    teacher: &TeacherHandle,
    images: &Array4<f64>,
) -> Result<Array2<f64>, TrainError> {
    let n = images.dim().0;
    let k = match student {
        Some(s) => s.num_classes(),
        None => teacher.head().map(|h| h.output_dim()).ok_or_else(|| {
            ModelError::ContractViolation("teacher has no classifier head".into())
        })?,
    };
    let mut out = Array2::zeros((n, k));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let chunk = images.slice_axis(Axis(0), (start..end).into()).to_owned();
        let logits = match student {
            Some(s) => s.student_forward(&ImageBatch::new(chunk)?)?.0,
            None => {
                let g = Graph::new();
                let l = teacher
                    .classify_var(&g, g.constant(chunk.into_dyn()), false)?
                    .logits
                    .value();
                (*l).clone().into_dimensionality().unwrap()
            }
        };
        out.slice_axis_mut(Axis(0), (start..end).into())
            .assign(&logits);
        start = end;
    }
    Ok(out)
}

/// Parses a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let f = File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l)
                .map_err(|e| TrainError::Resume(format!("corrupt metrics record: {e}")))
        })
        .collect()
}

//! Frozen teacher with batch-norm statistics capture, and the student
//! (backbone, classifier, two-layer projection head).

use std::path::Path;

use fopro_autograd::{Graph, Tensor, Var};
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::losses::BnStatistics;
use crate::nn::{
    export_state, import_state, join, parameter_count, BackboneSpec, BnMode, CapturedLayer,
    ConvBackbone, Linear, Module, RunningUpdate,
};
use crate::spectral::{decompose, reconstruct, ImageBatch};

/// Images used to calibrate a toy teacher's input constants and BN statistics.
pub const TOY_CALIBRATION_IMAGES: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Only a fresh linear classifier on frozen features trains.
    LinearProbe,
    /// Every parameter trains.
    FineTune,
    /// Student fully trainable, teacher frozen.
    DistillStudent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherArch {
    pub backbone: BackboneSpec,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

pub struct TeacherOutput<'g> {
    /// Globally pooled pre-classification features, `B x C_t`.
    pub features: Var<'g>,
    /// One entry per BN layer in forward order; empty without capture.
    pub captured: Vec<CapturedLayer<'g>>,
}

pub struct ClassifierOutput<'g> {
    pub logits: Var<'g>,
    pub updates: Vec<RunningUpdate>,
}

#[derive(Debug, Clone)]
pub struct TeacherHandle {
    backbone: ConvBackbone,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    head: Option<Linear>,
    mode: TransferMode,
    distillation_locked: bool,
}

fn check_images(x: &[usize], channels: usize) -> Result<(), ModelError> {
    if x.len() != 4 || x[1] != channels || x[0] == 0 {
        return Err(ModelError::InvalidArgument(format!(
            "expected a nonempty B x {channels} x H x W batch, got {x:?}"
        )));
    }
    Ok(())
}

fn to_array2(t: &Tensor) -> Array2<f64> {
    t.clone().into_dimensionality().unwrap()
}

impl TeacherHandle {
    pub fn new(
        backbone: ConvBackbone,
        input_mean: Vec<f64>,
        input_std: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let c = backbone.spec().in_channels;
        if input_mean.len() != c
            || input_std.len() != c
            || input_std.iter().any(|s| s.is_nan() || *s <= 0.0)
        {
            return Err(ModelError::InvalidArgument(format!(
                "need {c} input means and {c} positive input stds"
            )));
        }
        Ok(Self {
            backbone,
            input_mean,
            input_std,
            head: None,
            mode: TransferMode::DistillStudent,
            distillation_locked: false,
        })
    }

    /// Randomly initialized teacher whose input constants and BN running
    /// statistics describe a 1/f-noise source domain.
    pub fn toy(
        spec: BackboneSpec,
        resolution: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let mut backbone = ConvBackbone::new(spec.clone(), rng);
        let images = pink_noise_images(TOY_CALIBRATION_IMAGES, spec.in_channels, resolution, rng);
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for ch in images.axis_iter(Axis(1)) {
            let m = ch.mean().unwrap();
            mean.push(m);
            std.push(
                (ch.mapv(|v| (v - m) * (v - m)).mean().unwrap())
                    .sqrt()
                    .max(1e-6),
            );
        }
        let mut teacher = Self::new(backbone.clone(), mean, std)?;
        backbone.calibrate(&teacher.normalize(&images.into_dyn()));
        teacher.backbone = backbone;
        Ok(teacher)
    }

    pub fn arch(&self) -> TeacherArch {
        TeacherArch {
            backbone: self.backbone.spec().clone(),
            input_mean: self.input_mean.clone(),
            input_std: self.input_std.clone(),
        }
    }

    pub fn backbone(&self) -> &ConvBackbone {
        &self.backbone
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn mode(&self) -> TransferMode {
        self.mode
    }

    pub fn head(&self) -> Option<&Linear> {
        self.head.as_ref()
    }

    fn normalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.input_mean[c], self.input_std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    fn normalize_var<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        let c = self.input_mean.len();
        let m = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, c, 1, 1]), self.input_mean.clone()).unwrap(),
        );
        let inv = g.constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, c, 1, 1]),
                self.input_std.iter().map(|s| 1.0 / s).collect(),
            )
            .unwrap(),
        );
        (x - m) * inv
    }

    /// Pooled features of the normalized input, with parameters frozen and
    /// BN layers normalizing by their running statistics. With `capture`
    /// every BN layer also reports its batch mean and variance.
    pub fn forward_var<'g>(
        &self,
        g: &'g Graph,
        x_hat: Var<'g>,
        capture: bool,
    ) -> Result<TeacherOutput<'g>, ModelError> {
        let shape = x_hat.shape();
        check_images(&shape, self.backbone.spec().in_channels)?;
        if capture && shape[0] < 2 {
            return Err(ModelError::InvalidArgument(
                "statistics capture needs a batch of at least 2 for the variance".into(),
            ));
        }
        let mode = if capture {
            BnMode::Capture
        } else {
            BnMode::Eval
        };
        let out = self
            .backbone
            .forward(g, self.normalize_var(g, x_hat), mode, false);
        Ok(TeacherOutput {
            features: out.features,
            captured: out.captured,
        })
    }

    /// Value-only teacher pass with statistics capture.
    pub fn teacher_forward(
        &self,
        x_hat: &ImageBatch,
    ) -> Result<(Array2<f64>, BnStatistics), ModelError> {
        let g = Graph::new();
        let out = self.forward_var(&g, g.constant(x_hat.data().clone().into_dyn()), true)?;
        Ok((
            to_array2(&out.features.value()),
            BnStatistics::from_captured(&out.captured),
        ))
    }

    /// Pooled features without capture.
    pub fn features(&self, x: &ImageBatch) -> Result<Array2<f64>, ModelError> {
        let g = Graph::new();
        let out = self.forward_var(&g, g.constant(x.data().clone().into_dyn()), false)?;
        Ok(to_array2(&out.features.value()))
    }

    /// Running statistics of every BN layer, in forward order.
    pub fn running_statistics(&self) -> BnStatistics {
        BnStatistics {
            layers: self
                .backbone
                .bn_layers()
                .iter()
                .map(|bn| crate::losses::LayerStatistics {
                    mean: bn.running_mean.iter().copied().collect(),
                    var: bn.running_var.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Marks the teacher as the frozen model of a distillation run; a later
    /// request to fine-tune it is refused.
    pub fn lock_for_distillation(&mut self) -> Result<(), ModelError> {
        if self.mode == TransferMode::FineTune {
            return Err(ModelError::ContractViolation(
                "a fine-tuned teacher cannot serve as the frozen distillation teacher".into(),
            ));
        }
        self.distillation_locked = true;
        self.mode = TransferMode::DistillStudent;
        self.head = None;
        Ok(())
    }

    /// `LinearProbe` and `FineTune` attach a fresh `C_t x K` head.
    pub fn set_transfer_mode(
        &mut self,
        mode: TransferMode,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<(), ModelError> {
        if mode == TransferMode::FineTune && self.distillation_locked {
            return Err(ModelError::ContractViolation(
                "the teacher must stay frozen during distillation".into(),
            ));
        }
        self.head = match mode {
            TransferMode::DistillStudent => None,
            _ => {
                if num_classes < 2 {
                    return Err(ModelError::InvalidArgument(
                        "a classifier needs at least 2 classes".into(),
                    ));
                }
                Some(Linear::new(self.feature_dim(), num_classes, rng))
            }
        };
        self.mode = mode;
        Ok(())
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let head = self.head.as_ref().map_or(0, parameter_count);
        match self.mode {
            TransferMode::DistillStudent => 0,
            TransferMode::LinearProbe => head,
            TransferMode::FineTune => head + parameter_count(&self.backbone),
        }
    }

    /// Logits of the attached head. In fine-tune mode with `train` the
    /// backbone trains and uses batch statistics.
    pub fn classify_var<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        train: bool,
    ) -> Result<ClassifierOutput<'g>, ModelError> {
        let head = self.head.as_ref().ok_or_else(|| {
            ModelError::ContractViolation("no classifier head; set a transfer mode first".into())
        })?;
        check_images(&x.shape(), self.backbone.spec().in_channels)?;
        let fine_tune = self.mode == TransferMode::FineTune;
        let bn = if train && fine_tune {
            BnMode::Train
        } else {
            BnMode::Eval
        };
        let out = self
            .backbone
            .forward(g, self.normalize_var(g, x), bn, train && fine_tune);
        Ok(ClassifierOutput {
            logits: head.forward(g, out.features, train),
            updates: out.updates,
        })
    }

    pub fn apply_updates(&mut self, updates: &[RunningUpdate]) -> Result<(), ModelError> {
        if updates.is_empty() {
            return Ok(());
        }
        if self.mode != TransferMode::FineTune {
            return Err(ModelError::ContractViolation(
                "only a fine-tuned teacher updates BN statistics".into(),
            ));
        }
        self.backbone.apply_updates(updates);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_all(export_state(&self.backbone, "backbone"));
        if let Some(h) = &self.head {
            ckpt.insert_all(export_state(h, "head"));
        }
        ckpt.metadata.insert("kind".into(), "teacher".into());
        ckpt.metadata
            .insert("arch".into(), serde_json::to_string(&self.arch()).unwrap());
        ckpt
    }

    /// Rebuilds a frozen teacher (no head) from a checkpoint written by
    /// [`TeacherHandle::save`] or an equivalent external file.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let arch: TeacherArch = serde_json::from_str(ckpt.meta("arch")?)
            .map_err(|e| ModelError::InvalidArgument(format!("teacher arch metadata: {e}")))?;
        // Initial values are overwritten by the import.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut backbone = ConvBackbone::new(arch.backbone, &mut rng);
        import_state(&mut backbone, "backbone", &ckpt.tensors)
            .map_err(ModelError::InvalidArgument)?;
        Self::new(backbone, arch.input_mean, arch.input_std)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for TeacherHandle {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a fopro_autograd::Param)>) {
        self.backbone.params(&join(prefix, "backbone"), out);
        if let Some(h) = &self.head {
            h.params(&join(prefix, "head"), out);
        }
    }

    fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut fopro_autograd::Param)>,
    ) {
        self.backbone.params_mut(&join(prefix, "backbone"), out);
        if let Some(h) = &mut self.head {
            h.params_mut(&join(prefix, "head"), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.buffers(&join(prefix, "backbone"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.buffers_mut(&join(prefix, "backbone"), out);
    }
}

/// Random images with a `1/f` amplitude spectrum, mapped into `[0, 1]`.
pub fn pink_noise_images(
    n: usize,
    channels: usize,
    resolution: usize,
    rng: &mut impl Rng,
) -> Array4<f64> {
    let white = Array4::from_shape_fn((n, channels, resolution, resolution), |_| {
        StandardNormal.sample(rng)
    });
    let spec = decompose(&ImageBatch::new(white).unwrap()).unwrap();
    let wrap = |k: usize| k.min(resolution - k) as f64;
    let mut amp = spec.amplitude;
    for ((_, _, u, v), a) in amp.indexed_iter_mut() {
        let f = (wrap(u).powi(2) + wrap(v).powi(2)).sqrt().max(1.0);
        *a /= f;
    }
    let mut x = reconstruct(&amp, &spec.phase).unwrap().into_inner();
    for mut img in x.outer_iter_mut() {
        for mut plane in img.outer_iter_mut() {
            let m = plane.mean().unwrap();
            let s = plane
                .mapv(|v| (v - m) * (v - m))
                .mean()
                .unwrap()
                .sqrt()
                .max(1e-12);
            plane.mapv_inplace(|v| (0.5 + 0.2 * (v - m) / s).clamp(0.0, 1.0));
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentArch {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    /// Output dimension of the projection head; equals the teacher's `C_t`.
    pub projection_dim: usize,
}

pub struct StudentOutput<'g> {
    pub logits: Var<'g>,
    /// `MLP(g(x))`, `B x C_t`.
    pub projection: Var<'g>,
    pub updates: Vec<RunningUpdate>,
}

#[derive(Debug, Clone)]
pub struct StudentHandle {
    arch: StudentArch,
    backbone: ConvBackbone,
    classifier: Linear,
    proj_hidden: Linear,
    proj_out: Linear,
    mode: TransferMode,
}

impl StudentHandle {
    /// The projection hidden size equals `projection_dim`.
    pub fn new(arch: StudentArch, rng: &mut impl Rng) -> Result<Self, ModelError> {
        if arch.num_classes < 2 || arch.projection_dim == 0 {
            return Err(ModelError::InvalidArgument(
                "student needs at least 2 classes and a nonzero projection".into(),
            ));
        }
        let backbone = ConvBackbone::new(arch.backbone.clone(), rng);
        let d = backbone.feature_dim();
        let classifier = Linear::new(d, arch.num_classes, rng);
        let proj_hidden = Linear::new(d, arch.projection_dim, rng);
        let proj_out = Linear::new(arch.projection_dim, arch.projection_dim, rng);
        Ok(Self {
            arch,
            backbone,
            classifier,
            proj_hidden,
            proj_out,
            mode: TransferMode::DistillStudent,
        })
    }

    /// Student whose projection matches `teacher`'s feature dimension.
    pub fn for_teacher(
        backbone: BackboneSpec,
        num_classes: usize,
        teacher: &TeacherHandle,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        Self::new(
            StudentArch {
                backbone,
                num_classes,
                projection_dim: teacher.feature_dim(),
            },
            rng,
        )
    }

    pub fn check_compatible(&self, teacher: &TeacherHandle) -> Result<(), ModelError> {
        if self.arch.projection_dim != teacher.feature_dim() {
            return Err(ModelError::ContractViolation(format!(
                "student projection has dimension {}, teacher features {}",
                self.arch.projection_dim,
                teacher.feature_dim()
            )));
        }
        Ok(())
    }

    pub fn arch(&self) -> &StudentArch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn mode(&self) -> TransferMode {
        self.mode
    }

    pub fn zero_classifier(&mut self) {
        let d = self.classifier.input_dim();
        self.classifier = Linear::zeros(d, self.arch.num_classes);
    }

    pub fn set_transfer_mode(&mut self, mode: TransferMode) {
        self.mode = mode;
    }

    pub fn trainable_parameter_count(&self) -> usize {
        match self.mode {
            TransferMode::LinearProbe => parameter_count(&self.classifier),
            _ => parameter_count(self),
        }
    }

    /// One backbone pass feeding both heads. `train` selects batch-statistic
    /// BN and trainable parameters (only the classifier in linear-probe mode).
    pub fn forward_var<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        train: bool,
    ) -> Result<StudentOutput<'g>, ModelError> {
        check_images(&x.shape(), self.arch.backbone.in_channels)?;
        let body = train && self.mode != TransferMode::LinearProbe;
        let bn = if body { BnMode::Train } else { BnMode::Eval };
        let out = self.backbone.forward(g, x, bn, body);
        let logits = self.classifier.forward(g, out.features, train);
        let hidden = self.proj_hidden.forward(g, out.features, body).relu();
        let projection = self.proj_out.forward(g, hidden, body);
        Ok(StudentOutput {
            logits,
            projection,
            updates: out.updates,
        })
    }

    /// Value-only eval pass: `(logits, projection)`.
    pub fn student_forward(
        &self,
        x: &ImageBatch,
    ) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
        let g = Graph::new();
        let out = self.forward_var(&g, g.constant(x.data().clone().into_dyn()), false)?;
        Ok((
            to_array2(&out.logits.value()),
            to_array2(&out.projection.value()),
        ))
    }

    pub fn apply_updates(&mut self, updates: &[RunningUpdate]) {
        if !updates.is_empty() {
            self.backbone.apply_updates(updates);
        }
    }

    /// Replaces every parameter and buffer from `state` (names as produced by
    /// `export_state(student, "")`).
    pub fn load_state(
        &mut self,
        state: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<(), ModelError> {
        import_state(self, "", state).map_err(ModelError::InvalidArgument)
    }
}

impl Module for StudentHandle {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a fopro_autograd::Param)>) {
        self.backbone.params(&join(prefix, "backbone"), out);
        self.classifier.params(&join(prefix, "classifier"), out);
        self.proj_hidden.params(&join(prefix, "projection.0"), out);
        self.proj_out.params(&join(prefix, "projection.1"), out);
    }

    fn params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut fopro_autograd::Param)>,
    ) {
        self.backbone.params_mut(&join(prefix, "backbone"), out);
        self.classifier.params_mut(&join(prefix, "classifier"), out);
        self.proj_hidden
            .params_mut(&join(prefix, "projection.0"), out);
        self.proj_out.params_mut(&join(prefix, "projection.1"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.buffers(&join(prefix, "backbone"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.buffers_mut(&join(prefix, "backbone"), out);
    }
}

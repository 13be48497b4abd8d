//! Layers shared by the teacher, the student and the prompt generator.

use std::collections::BTreeMap;

use fopro_autograd::{Graph, Param, Tensor, Var};
use ndarray::{Array1, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Named access to parameters and non-trainable buffers.
pub trait Module {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);
    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a Tensor)>) {}
    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut Tensor)>) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<M: Module + ?Sized>(m: &M) -> Vec<(String, &Param)> {
    let mut out = Vec::new();
    m.params("", &mut out);
    out
}

pub fn named_params_mut<M: Module + ?Sized>(m: &mut M) -> Vec<(String, &mut Param)> {
    let mut out = Vec::new();
    m.params_mut("", &mut out);
    out
}

pub fn named_buffers<M: Module + ?Sized>(m: &M) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    m.buffers("", &mut out);
    out
}

pub fn parameter_count<M: Module + ?Sized>(m: &M) -> usize {
    named_params(m).iter().map(|(_, p)| p.len()).sum()
}

/// SHA-256 over every parameter and buffer (names, shapes and exact bits).
pub fn state_hash<M: Module + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    let mut feed = |name: &str, t: &Tensor| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    };
    for (name, p) in named_params(m) {
        feed(&name, p.value());
    }
    for (name, b) in named_buffers(m) {
        feed(&name, b);
    }
    hex::encode(h.finalize())
}

/// Every parameter and buffer as owned `(name, tensor)` pairs.
pub fn export_state<M: Module + ?Sized>(m: &M, prefix: &str) -> Vec<(String, Tensor)> {
    let mut params = Vec::new();
    m.params(prefix, &mut params);
    let mut buffers = Vec::new();
    m.buffers(prefix, &mut buffers);
    params
        .into_iter()
        .map(|(n, p)| (n, p.value().clone()))
        .chain(buffers.into_iter().map(|(n, b)| (n, b.clone())))
        .collect()
}

/// Overwrites every parameter and buffer of `m` from `state`; each name must
/// be present with a matching shape.
pub fn import_state<M: Module + ?Sized>(
    m: &mut M,
    prefix: &str,
    state: &BTreeMap<String, Tensor>,
) -> Result<(), String> {
    let lookup = |name: &str, shape: &[usize]| -> Result<Tensor, String> {
        let t = state
            .get(name)
            .ok_or_else(|| format!("missing tensor {name}"))?;
        if t.shape() != shape {
            return Err(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            ));
        }
        Ok(t.clone())
    };
    let mut params = Vec::new();
    m.params_mut(prefix, &mut params);
    for (name, p) in params {
        let t = lookup(&name, p.value().shape())?;
        p.set(t);
    }
    let mut buffers = Vec::new();
    m.buffers_mut(prefix, &mut buffers);
    for (name, b) in buffers {
        *b = lookup(&name, b.shape())?;
    }
    Ok(())
}

fn bind<'g>(g: &'g Graph, p: &Param, trainable: bool) -> Var<'g> {
    if trainable {
        g.param(p)
    } else {
        g.frozen(p)
    }
}

/// Fully connected layer, `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// PyTorch-style uniform initialization in `+-1/sqrt(in)`.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            weight: Param::new(ArrayD::from_shape_fn(IxDyn(&[input, output]), |_| {
                dist.sample(rng)
            })),
            bias: Param::new(ArrayD::from_shape_fn(IxDyn(&[output]), |_| {
                dist.sample(rng)
            })),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Param::new(ArrayD::zeros(IxDyn(&[input, output]))),
            bias: Param::new(ArrayD::zeros(IxDyn(&[output]))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, trainable: bool) -> Var<'g> {
        x.matmul(bind(g, &self.weight, trainable)) + bind(g, &self.bias, trainable)
    }
}

impl Module for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Bias-free 2-D convolution (always followed by batch norm here).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal initialization.
    pub fn new(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (input * kernel * kernel) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Self {
            weight: Param::new(ArrayD::from_shape_fn(
                IxDyn(&[output, input, kernel, kernel]),
                |_| dist.sample(rng),
            )),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, trainable: bool) -> Var<'g> {
        x.conv2d(
            bind(g, &self.weight, trainable),
            None,
            self.stride,
            self.padding,
        )
    }
}

impl Module for Conv2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
    }
}

/// How a batch-norm layer normalizes and what it reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; report a running-stat update.
    Train,
    /// Normalize with running statistics.
    Eval,
    /// Normalize with running statistics and also report the batch
    /// mean/variance of the layer input on the graph.
    Capture,
}

/// Per-layer batch statistics recorded during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CapturedLayer<'g> {
    pub mean: Var<'g>,
    /// Biased (population) variance over N, H, W.
    pub var: Var<'g>,
}

/// Running-statistic update produced by a training-mode pass.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    pub mean: Array1<f64>,
    /// Biased batch variance; the unbiased correction is applied on update.
    pub var: Array1<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnOutput<'g> {
    pub out: Var<'g>,
    pub captured: Option<CapturedLayer<'g>>,
    pub update: Option<RunningUpdate>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn batch_moments<'g>(x: Var<'g>) -> (Var<'g>, Var<'g>, Var<'g>) {
        let mean = x.mean_axes_keep(&[0, 2, 3]);
        let centered = x - mean;
        let var = centered.square().mean_axes_keep(&[0, 2, 3]);
        (mean, centered, var)
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        mode: BnMode,
        trainable: bool,
    ) -> BnOutput<'g> {
        let c = self.channels();
        let shape = x.shape();
        let gamma = bind(g, &self.gamma, trainable).reshape(&[1, c, 1, 1]);
        let beta = bind(g, &self.beta, trainable).reshape(&[1, c, 1, 1]);
        match mode {
            BnMode::Train => {
                let (mean, centered, var) = Self::batch_moments(x);
                let normed = centered / (var + self.eps).sqrt();
                let count = shape[0] * shape[2] * shape[3];
                let update = RunningUpdate {
                    mean: flatten(&mean.value()),
                    var: flatten(&var.value()),
                    count,
                };
                BnOutput {
                    out: normed * gamma + beta,
                    captured: None,
                    update: Some(update),
                }
            }
            BnMode::Eval | BnMode::Capture => {
                let rm = g.constant(
                    self.running_mean
                        .clone()
                        .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
                        .unwrap(),
                );
                let inv = g.constant(
                    self.running_var
                        .mapv(|v| 1.0 / (v + self.eps).sqrt())
                        .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
                        .unwrap(),
                );
                let out = (x - rm) * inv * gamma + beta;
                let captured = (mode == BnMode::Capture).then(|| {
                    let (mean, _, var) = Self::batch_moments(x);
                    CapturedLayer {
                        mean: mean.reshape(&[c]),
                        var: var.reshape(&[c]),
                    }
                });
                BnOutput {
                    out,
                    captured,
                    update: None,
                }
            }
        }
    }

    /// Exponential running average with the unbiased variance correction.
    pub fn apply_update(&mut self, update: &RunningUpdate) {
        let n = update.count as f64;
        let correction = if update.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(update.mean.iter()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(update.var.iter()) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

fn flatten(t: &Tensor) -> Array1<f64> {
    Array1::from_iter(t.iter().copied())
}

impl Module for BatchNorm2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Architecture of a conv -> BN -> ReLU stack with global average pooling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl BackboneSpec {
    pub fn new(channels: &[usize], strides: &[usize]) -> Self {
        Self {
            in_channels: 3,
            channels: channels.to_vec(),
            strides: strides.to_vec(),
            kernel: 3,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self
            .channels
            .last()
            .expect("backbone needs at least one block")
    }
}

#[derive(Debug, Clone)]
pub struct ConvBackbone {
    spec: BackboneSpec,
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm2d>,
}

pub struct BackboneOutput<'g> {
    /// Globally pooled features, `B x C`.
    pub features: Var<'g>,
    pub captured: Vec<CapturedLayer<'g>>,
    pub updates: Vec<RunningUpdate>,
}

impl ConvBackbone {
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Self {
        assert_eq!(
            spec.channels.len(),
            spec.strides.len(),
            "one stride per block"
        );
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut input = spec.in_channels;
        for (&c, &s) in spec.channels.iter().zip(&spec.strides) {
            convs.push(Conv2d::new(input, c, spec.kernel, s, rng));
            bns.push(BatchNorm2d::new(c));
            input = c;
        }
        Self { spec, convs, bns }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn bn_layers(&self) -> &[BatchNorm2d] {
        &self.bns
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        mode: BnMode,
        trainable: bool,
    ) -> BackboneOutput<'g> {
        let mut h = x;
        let mut captured = Vec::new();
        let mut updates = Vec::new();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let z = conv.forward(g, h, trainable);
            let out = bn.forward(g, z, mode, trainable);
            captured.extend(out.captured);
            updates.extend(out.update);
            h = out.out.relu();
        }
        let s = h.shape();
        let features = h.mean_axes_keep(&[2, 3]).reshape(&[s[0], s[1]]);
        BackboneOutput {
            features,
            captured,
            updates,
        }
    }

    pub fn apply_updates(&mut self, updates: &[RunningUpdate]) {
        assert_eq!(updates.len(), self.bns.len(), "one update per BN layer");
        for (bn, u) in self.bns.iter_mut().zip(updates) {
            bn.apply_update(u);
        }
    }

    /// Sets every layer's running statistics to the batch statistics of
    /// `x`, layer by layer, so that a later eval pass on `x` reproduces them.
    pub fn calibrate(&mut self, x: &Tensor) {
        let g = Graph::new();
        let input = g.constant(x.clone());
        let out = self.forward(&g, input, BnMode::Train, false);
        for (bn, u) in self.bns.iter_mut().zip(&out.updates) {
            bn.running_mean = u.mean.clone().into_dyn();
            bn.running_var = u.var.clone().into_dyn();
        }
    }
}

impl Module for ConvBackbone {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, (c, b)) in self.convs.iter().zip(&self.bns).enumerate() {
            c.params(&join(prefix, &format!("conv{i}")), out);
            b.params(&join(prefix, &format!("bn{i}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, (c, b)) in self.convs.iter_mut().zip(self.bns.iter_mut()).enumerate() {
            c.params_mut(&join(prefix, &format!("conv{i}")), out);
            b.params_mut(&join(prefix, &format!("bn{i}")), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.bns.iter().enumerate() {
            b.buffers(&join(prefix, &format!("bn{i}")), out);
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.buffers_mut(&join(prefix, &format!("bn{i}")), out);
        }
    }
}

/// Per-channel statistics over axes (0, 2, 3) computed directly from values.
pub fn channel_moments(x: &Tensor) -> (Array1<f64>, Array1<f64>) {
    let c = x.shape()[1];
    let mut means = Array1::zeros(c);
    let mut vars = Array1::zeros(c);
    for ch in 0..c {
        let lane = x.index_axis(Axis(1), ch);
        let n = lane.len() as f64;
        let m = lane.sum() / n;
        means[ch] = m;
        vars[ch] = lane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    (means, vars)
}

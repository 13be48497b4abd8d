//! Training objectives.
//!
//! Tensor-valued losses are graph operations; the scalar combinations are
//! generic over [`LossScalar`] so they work on plain `f64` and on graph
//! values alike.

use std::ops::{Add, Mul, Sub};

use fopro_autograd::{Graph, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::CapturedLayer;

/// Norm floor for L2 normalization.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("numeric degeneracy: {0}")]
    Degenerate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Distillation weight in the exploitation loss.
    pub lambda_f: f64,
    /// Balance-term weight in the inversion loss.
    pub mu: f64,
    /// Adversarial strength in the exploration loss, in `[0, 1]`.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 3.0,
            mu: 10.0,
            gamma: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..).contains(&self.lambda_f) || !(0.0..).contains(&self.mu) {
            return Err(LossError::InvalidArgument(
                "lambda_f and mu must be nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LossError::InvalidArgument(format!(
                "gamma = {} must lie in [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Scalar algebra shared by `f64` and graph values.
pub trait LossScalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
}

impl LossScalar for f64 {}
impl LossScalar for Var<'_> {}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatistics {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Per-BN-layer (mean, variance) pairs in fixed layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BnStatistics {
    pub layers: Vec<LayerStatistics>,
}

impl BnStatistics {
    pub fn from_captured(captured: &[CapturedLayer<'_>]) -> Self {
        Self {
            layers: captured
                .iter()
                .map(|c| LayerStatistics {
                    mean: Array1::from_iter(c.mean.value().iter().copied()),
                    var: Array1::from_iter(c.var.value().iter().copied()),
                })
                .collect(),
        }
    }
}

/// `sum_l ||mu_l(x) - mu_l||^2 + ||var_l(x) - var_l||^2`.
pub fn bn_regularization<'g>(
    batch: &[CapturedLayer<'g>],
    running: &BnStatistics,
) -> Result<Var<'g>, LossError> {
    if batch.len() != running.layers.len() || batch.is_empty() {
        return Err(LossError::ContractViolation(format!(
            "batch statistics cover {} layers, running statistics {}",
            batch.len(),
            running.layers.len()
        )));
    }
    let mut total: Option<Var<'g>> = None;
    for (i, (b, r)) in batch.iter().zip(&running.layers).enumerate() {
        if b.mean.shape() != [r.mean.len()] || b.var.shape() != [r.var.len()] {
            return Err(LossError::ContractViolation(format!(
                "layer {i}: batch statistics have {:?} channels, running {}",
                b.mean.shape(),
                r.mean.len()
            )));
        }
        let g = b.mean.graph();
        let rm = g.constant(r.mean.clone().into_dyn());
        let rv = g.constant(r.var.clone().into_dyn());
        let term = (b.mean - rm).square().sum() + (b.var - rv).square().sum();
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Value-only form of [`bn_regularization`].
pub fn bn_regularization_value(
    batch: &BnStatistics,
    running: &BnStatistics,
) -> Result<f64, LossError> {
    let g = Graph::new();
    let captured: Vec<CapturedLayer<'_>> = batch
        .layers
        .iter()
        .map(|l| CapturedLayer {
            mean: g.constant(l.mean.clone().into_dyn()),
            var: g.constant(l.var.clone().into_dyn()),
        })
        .collect();
    Ok(bn_regularization(&captured, running)?.scalar())
}

/// Batch mean of `sum_i p_i log p_i` with `p = softmax(features)`.
pub fn balance_loss<'g>(features: Var<'g>) -> Result<Var<'g>, LossError> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(LossError::InvalidArgument(format!(
            "balance loss needs B x C features with C >= 2, got {shape:?}"
        )));
    }
    let logp = features.log_softmax();
    Ok((logp.exp() * logp).sum() * (1.0 / shape[0] as f64))
}

/// `L_BN + mu * L_bal`.
pub fn inversion_loss<T: LossScalar>(bn: T, bal: T, weights: &LossWeights) -> T {
    bn + bal * weights.mu
}

/// Mean over the batch of `2 - 2 <y/|y|, t/|t|>`, in `[0, 4]`.
pub fn ekd_loss<'g>(y: Var<'g>, t: Var<'g>) -> Result<Var<'g>, LossError> {
    let ys = y.shape();
    if ys.len() != 2 || ys != t.shape() {
        return Err(LossError::InvalidArgument(format!(
            "projection {ys:?} and teacher representation {:?} must both be B x C",
            t.shape()
        )));
    }
    let normalize = |v: Var<'g>, what: &str| -> Result<Var<'g>, LossError> {
        let norm = v.square().sum_axes_keep(&[1]).sqrt();
        if norm.value().iter().any(|n| !(NORMALIZE_EPS..).contains(n)) {
            return Err(LossError::Degenerate(format!("{what} has a zero-norm row")));
        }
        Ok(v / norm.clamp_min(NORMALIZE_EPS))
    };
    let yn = normalize(y, "projection")?;
    let tn = normalize(t, "teacher representation")?;
    let cos = (yn * tn).sum_axes_keep(&[1]);
    Ok((2.0 - cos * 2.0).mean())
}

fn check_labels(logits: &Var<'_>, labels: &[usize]) -> Result<usize, LossError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(LossError::InvalidArgument(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(LossError::InvalidArgument(format!(
            "label {l} out of range for {} classes",
            s[1]
        )));
    }
    Ok(s[1])
}

/// Mean softmax cross-entropy.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>, LossError> {
    check_labels(&logits, labels)?;
    Ok(-(logits.log_softmax().pick(labels).mean()))
}

/// Class-weighted cross-entropy normalized by the summed sample weights.
pub fn weighted_cross_entropy<'g>(
    logits: Var<'g>,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<Var<'g>, LossError> {
    let k = check_labels(&logits, labels)?;
    if class_weights.len() != k {
        return Err(LossError::InvalidArgument(format!(
            "{} class weights for {k} classes",
            class_weights.len()
        )));
    }
    let w: Vec<f64> = labels.iter().map(|&l| class_weights[l]).collect();
    let total: f64 = w.iter().sum();
    let g = logits.graph();
    let wv = g.constant(ArrayD::from_shape_vec(IxDyn(&[w.len()]), w).unwrap());
    Ok(-((logits.log_softmax().pick(labels) * wv).sum() * (1.0 / total)))
}

/// Cross-entropy on `z_k + log n_k`.
///
/// The offsets are taken relative to the largest count, which leaves the
/// loss unchanged (softmax is shift invariant) and makes equal counts an
/// exact no-op.
pub fn balanced_softmax_loss<'g>(
    logits: Var<'g>,
    labels: &[usize],
    class_counts: &[usize],
) -> Result<Var<'g>, LossError> {
    let k = check_labels(&logits, labels)?;
    if class_counts.len() != k {
        return Err(LossError::InvalidArgument(format!(
            "{} class counts for {k} classes",
            class_counts.len()
        )));
    }
    if let Some(c) = class_counts.iter().position(|&c| c == 0) {
        return Err(LossError::InvalidArgument(format!(
            "class {c} has zero count"
        )));
    }
    let max = *class_counts.iter().max().unwrap() as f64;
    let offsets = ArrayD::from_shape_vec(
        IxDyn(&[1, k]),
        class_counts
            .iter()
            .map(|&n| (n as f64 / max).ln())
            .collect(),
    )
    .unwrap();
    let adjusted = logits + logits.graph().constant(offsets);
    cross_entropy(adjusted, labels)
}

/// `L_t + lambda_f * L_f`.
pub fn exploitation_loss<T: LossScalar>(target: T, distill: T, weights: &LossWeights) -> T {
    target + distill * weights.lambda_f
}

/// `-gamma * lambda_f * L_f + L_inv`; minimizing it maximizes `L_f`.
pub fn exploration_loss<T: LossScalar>(distill: T, inv: T, weights: &LossWeights) -> T {
    inv - distill * (weights.gamma * weights.lambda_f)
}

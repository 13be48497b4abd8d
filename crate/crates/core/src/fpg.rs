//! Fourier Prompt Generator: one linear layer from noise to a full-resolution
//! three-channel amplitude prompt.

use fopro_autograd::{Graph, Param, Tensor, Var};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::nn::{join, Module};
use crate::spectral::{hermitian_project, hermitian_project_var, FourierPrompt, SpectralError};

pub const DEFAULT_NOISE_DIM: usize = 128;
pub const WEIGHT_INIT_STD: f64 = 0.01;
pub const BIAS_INIT: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum FpgError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// i.i.d. standard-normal generator input.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector(Array1<f64>);

impl NoiseVector {
    pub fn new(z: Array1<f64>) -> Self {
        Self(z)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn sample_noise(rng: &mut impl Rng, dim: usize) -> NoiseVector {
    NoiseVector(Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng)))
}

/// Weight `D_z x (C*H*W)` and bias `C*H*W`.
#[derive(Debug, Clone)]
pub struct FourierPromptGenerator {
    pub weight: Param,
    pub bias: Param,
    channels: usize,
    height: usize,
    width: usize,
}

impl FourierPromptGenerator {
    /// Weight ~ N(0, 0.01^2), bias = 1: the first prompts are close to flat.
    pub fn new(
        noise_dim: usize,
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let out = channels * height * width;
        let dist = Normal::new(0.0, WEIGHT_INIT_STD).unwrap();
        Self {
            weight: Param::new(ArrayD::from_shape_fn(IxDyn(&[noise_dim, out]), |_| {
                dist.sample(rng)
            })),
            bias: Param::new(ArrayD::from_elem(IxDyn(&[out]), BIAS_INIT)),
            channels,
            height,
            width,
        }
    }

    pub fn from_params(
        weight: Tensor,
        bias: Tensor,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, FpgError> {
        let out = channels * height * width;
        if weight.ndim() != 2 || weight.shape()[1] != out || bias.shape() != [out] {
            return Err(FpgError::InvalidArgument(format!(
                "weight {:?} / bias {:?} do not produce a {channels}x{height}x{width} prompt",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            channels,
            height,
            width,
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn prompt_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn check_noise(&self, z: &NoiseVector) -> Result<(), FpgError> {
        if z.dim() != self.noise_dim() {
            return Err(FpgError::InvalidArgument(format!(
                "noise has dimension {}, generator expects {}",
                z.dim(),
                self.noise_dim()
            )));
        }
        Ok(())
    }

    /// `hermitian_project(reshape(z W + b))` without recording gradients.
    pub fn generate(&self, z: &NoiseVector) -> Result<FourierPrompt, FpgError> {
        self.check_noise(z)?;
        let w = self
            .weight
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let raw = z.values().dot(&w) + self.bias.value();
        let raw = Array3::from_shape_vec(
            (self.channels, self.height, self.width),
            raw.into_raw_vec_and_offset().0,
        )
        .unwrap();
        Ok(hermitian_project(&raw)?)
    }

    /// Graph version; the prompt is `C x H x W`. Parameters receive
    /// gradients only when `trainable` is set.
    pub fn generate_var<'g>(
        &self,
        g: &'g Graph,
        z: &NoiseVector,
        trainable: bool,
    ) -> Result<Var<'g>, FpgError> {
        self.check_noise(z)?;
        let (w, b) = if trainable {
            (g.param(&self.weight), g.param(&self.bias))
        } else {
            (g.frozen(&self.weight), g.frozen(&self.bias))
        };
        let zv = g.constant(
            z.values()
                .clone()
                .into_shape_with_order(IxDyn(&[1, z.dim()]))
                .unwrap(),
        );
        let raw = (zv.matmul(w) + b).reshape(&[self.channels, self.height, self.width]);
        Ok(hermitian_project_var(raw))
    }
}

impl Module for FourierPromptGenerator {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

//! Fourier-prompted knowledge distillation for long-tailed classification.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod fpg;
pub mod losses;
pub mod models;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod spectral;
pub mod train;

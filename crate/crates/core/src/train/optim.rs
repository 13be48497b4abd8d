//! First-order optimizers with serializable state, and gradient clipping.

use std::collections::BTreeMap;

use fopro_autograd::{Param, Tensor};
use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    adam: AdamHyper,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn adam(weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam, 0.0, weight_decay)
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, momentum, weight_decay)
    }

    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            adam: AdamHyper::default(),
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter that has a gradient. Coupled L2 weight
    /// decay is added to the gradient.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Param)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, param) in params {
            let Some(g) = grads.get(&name) else { continue };
            let g = if self.weight_decay != 0.0 {
                g + &(param.value() * self.weight_decay)
            } else {
                g.clone()
            };
            let shape = g.raw_dim();
            match self.kind {
                OptimizerKind::Sgd => {
                    let update = if self.momentum != 0.0 {
                        let v = self
                            .first
                            .entry(name)
                            .or_insert_with(|| ArrayD::zeros(shape));
                        let mu = self.momentum;
                        Zip::from(&mut *v)
                            .and(&g)
                            .for_each(|v, &g| *v = mu * *v + g);
                        v.clone()
                    } else {
                        g
                    };
                    Zip::from(param.value_mut())
                        .and(&update)
                        .for_each(|p, &u| *p -= lr * u);
                }
                OptimizerKind::Adam => {
                    let AdamHyper { beta1, beta2, eps } = self.adam;
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| ArrayD::zeros(shape.clone()));
                    Zip::from(&mut *m)
                        .and(&g)
                        .for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    let v = self
                        .second
                        .entry(name)
                        .or_insert_with(|| ArrayD::zeros(shape));
                    Zip::from(&mut *v)
                        .and(&g)
                        .for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    Zip::from(param.value_mut())
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &m, &v| {
                            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                        });
                }
            }
        }
    }

    /// State tensors under `prefix`; the step count is a one-element tensor.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}.steps"),
            ArrayD::from_elem(IxDyn(&[1]), self.steps as f64),
        )];
        out.extend(
            self.first
                .iter()
                .map(|(k, v)| (format!("{prefix}.m.{k}"), v.clone())),
        );
        out.extend(
            self.second
                .iter()
                .map(|(k, v)| (format!("{prefix}.v.{k}"), v.clone())),
        );
        out
    }

    /// Restores state written by [`Optimizer::export`] (keys already stripped
    /// of the prefix).
    pub fn import(&mut self, section: &BTreeMap<String, Tensor>) -> Result<(), String> {
        let steps = section
            .get("steps")
            .ok_or("optimizer state lacks a step count")?;
        self.steps = steps.iter().next().copied().unwrap_or(0.0) as u64;
        self.first.clear();
        self.second.clear();
        for (k, v) in section {
            if let Some(name) = k.strip_prefix("m.") {
                self.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.second.insert(name.to_string(), v.clone());
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// `lr0 * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_run(mut opt: Optimizer, lr: f64, steps: usize) -> f64 {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        for _ in 0..steps {
            let grads = BTreeMap::from([("p".to_string(), p.value() * 2.0)]);
            opt.step(vec![("p".into(), &mut p)], &grads, lr);
        }
        p.value().iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn optimizers_minimize_a_quadratic() {
        assert!(quadratic_run(Optimizer::adam(0.0), 0.1, 300) < 1e-2);
        assert!(quadratic_run(Optimizer::sgd(0.9, 0.0), 0.01, 500) < 1e-3);
        assert!(quadratic_run(Optimizer::sgd(0.0, 0.0), 0.1, 100) < 1e-6);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let grads = BTreeMap::from([("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), 123.0))]);
        Optimizer::adam(0.0).step(vec![("p".into(), &mut p)], &grads, 0.01);
        assert!((p.value()[[0]] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn state_roundtrip_continues_identically() {
        let mut a = Optimizer::adam(0.0);
        let mut pa = Param::new(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let g = BTreeMap::from([("w".to_string(), ArrayD::from_elem(IxDyn(&[3]), 0.5))]);
        a.step(vec![("w".into(), &mut pa)], &g, 0.1);
        let section: BTreeMap<String, Tensor> = a
            .export("opt")
            .into_iter()
            .map(|(k, v)| (k.strip_prefix("opt.").unwrap().to_string(), v))
            .collect();
        let mut b = Optimizer::adam(0.0);
        b.import(&section).unwrap();
        assert_eq!(a, b);
        let mut pb = pa.clone();
        a.step(vec![("w".into(), &mut pa)], &g, 0.1);
        b.step(vec![("w".into(), &mut pb)], &g, 0.1);
        assert_eq!(pa.value(), pb.value());
    }

    #[test]
    fn clipping_and_cosine() {
        let mut g = BTreeMap::from([("a".to_string(), ArrayD::from_elem(IxDyn(&[4]), 10.0))]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 20.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
    }
}

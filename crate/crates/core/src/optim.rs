//! Parameter update rules with per-group learning rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("train.optimizer.{k}"), "must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.optimizer.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.optimizer.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// Plain gradient descent or AdamW with decoupled weight decay. Only
/// parameters present in the gradient map are touched.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimConfig,
    steps: BTreeMap<ParamId, u64>,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            steps: BTreeMap::new(),
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd() -> Self {
        Self::new(&OptimConfig {
            kind: OptimKind::Sgd,
            ..OptimConfig::default()
        })
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradientMap<T>, lr: impl Fn(Group) -> f64) {
        for (id, g) in grads.iter() {
            let rate = lr(store.get(id).group);
            match self.cfg.kind {
                OptimKind::Sgd => {
                    let r = T::of(rate);
                    for (p, &gi) in store.tensor_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= r * gi;
                    }
                }
                OptimKind::Adamw => self.adamw(store, id, g, rate),
            }
        }
    }

    fn adamw(&mut self, store: &mut ParamStore<T>, id: ParamId, g: &Tensor<T>, rate: f64) {
        let c = &self.cfg;
        let t = self.steps.entry(id).or_insert(0);
        *t += 1;
        let (m, v) = self
            .moments
            .entry(id)
            .or_insert_with(|| (Tensor::zeros(g.dims().to_vec()), Tensor::zeros(g.dims().to_vec())));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(*t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(*t as i32));
        let (r, eps, wd) = (T::of(rate), T::of(c.eps), T::of(c.weight_decay));
        let p = store.tensor_mut(id).data_mut();
        for (((p, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= r * (mhat / (vhat.sqrt() + eps) + wd * *p);
        }
    }
}

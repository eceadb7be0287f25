//! SGD (with momentum and weight decay) and Adam. Frozen parameters and
//! buffers are never touched.

use serde::{Deserialize, Serialize};
use super::params::{ParamKind, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

/// Optimizer with per-parameter slot tensors (momentum, or Adam moments),
/// keyed by parameter name so the state can be checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    /// `slots[k]` holds the state tensors for parameter `names[k]`.
    pub names: Vec<String>,
    pub slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn sgd(cfg: SgdConfig) -> Self {
        Self::new(OptimizerKind::Sgd(cfg))
    }

    pub fn adam(cfg: AdamConfig) -> Self {
        Self::new(OptimizerKind::Adam(cfg))
    }

    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            names: Vec::new(),
            slots: Vec::new(),
        }
    }

    fn slot_count(&self) -> usize {
        match self.kind {
            OptimizerKind::Sgd(_) => 1,
            OptimizerKind::Adam(_) => 2,
        }
    }

    fn slot_index(&mut self, name: &str, shape: &[usize]) -> usize {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return i;
        }
        self.names.push(name.to_string());
        let n = self.slot_count();
        self.slots.push((0..n).map(|_| Tensor::zeros(shape)).collect());
        self.names.len() - 1
    }

    /// Apply one update with learning rate `lr` to every trainable,
    /// unfrozen parameter. Aborts before touching anything if a gradient is
    /// not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for e in store.entries() {
            if e.kind == ParamKind::Weight && !e.frozen {
                if let Some(bad) = e.grad.data.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in `{}` at element {bad} (step {})",
                        e.name, self.step
                    )));
                }
            }
        }
        self.step += 1;
        let step = self.step;
        for e in store.entries_mut() {
            if e.kind != ParamKind::Weight || e.frozen {
                continue;
            }
            let k = self.slot_index(&e.name, &e.value.shape);
            let slots = &mut self.slots[k];
            match self.kind {
                OptimizerKind::Sgd(c) => {
                    let (mom, wd) = (T::from_f64(c.momentum), T::from_f64(c.weight_decay));
                    let lr = T::from_f64(lr);
                    let vel = &mut slots[0].data;
                    for ((w, g), v) in e.value.data.iter_mut().zip(&e.grad.data).zip(vel.iter_mut()) {
                        let d = *g + wd * *w;
                        *v = mom * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam(c) => {
                    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
                    let wd = T::from_f64(c.weight_decay);
                    let bc1 = 1.0 - c.beta1.powi(step as i32);
                    let bc2 = 1.0 - c.beta2.powi(step as i32);
                    let step_size = T::from_f64(lr / bc1);
                    let bc2_sqrt = T::from_f64(bc2.sqrt());
                    let eps = T::from_f64(c.eps);
                    let (ms, vs) = slots.split_at_mut(1);
                    let (m, v) = (&mut ms[0].data, &mut vs[0].data);
                    for (i, (w, g)) in e.value.data.iter_mut().zip(&e.grad.data).enumerate() {
                        let g = *g + wd * *w;
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        *w -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Optimizer<U> {
        Optimizer {
            kind: self.kind,
            step: self.step,
            names: self.names.clone(),
            slots: self.slots.iter().map(|s| s.iter().map(Tensor::cast).collect()).collect(),
        }
    }
}

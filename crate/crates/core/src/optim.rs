//! Adam with a linearly decaying learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 6e-5,
            batch_size: 36,
            dropout: 0.1,
            max_epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return Err(Error::Config(
                "adam betas must be in [0, 1) and epsilon > 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate after `completed_epochs` full epochs:
    /// `lr0 * (1 - e / E)`, never negative.
    pub fn lr_at(&self, completed_epochs: usize) -> f64 {
        let frac = completed_epochs as f64 / self.max_epochs as f64;
        (self.lr * (1.0 - frac)).max(0.0)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            entries: Vec::new(),
        }
    }

    /// Pair a store-ordered gradient vector with the store's names.
    pub fn aligned(store: &ParamStore<T>, grads: Vec<Tensor<T>>) -> Self {
        debug_assert_eq!(store.len(), grads.len());
        Gradients {
            entries: store.names().iter().cloned().zip(grads).collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.entries.push((name.into(), grad));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn at(&self, i: usize, name: &str) -> Option<&Tensor<T>> {
        match self.entries.get(i) {
            Some((n, t)) if n == name => Some(t),
            _ => self.get(name),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Euclidean norm over every entry.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected Adam update. `step` counts updates from 1;
/// `completed_epochs` drives the linear learning-rate decay.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    step: u64,
    completed_epochs: usize,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Invalid("adam step index starts at 1".into()));
    }
    let lr = cfg.lr_at(completed_epochs);
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let names = store.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let g = grads
            .at(i, name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != store.tensor_at(i).shape() {
            return Err(Error::shape(
                "adam_step",
                store.tensor_at(i).shape(),
                g.shape(),
            ));
        }
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ib1, ib2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (lr_t, c1t, c2t, eps) = (T::of(lr), T::of(c1), T::of(c2), T::of(cfg.epsilon));
        let (p, m, v) = store.slot_mut(i);
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = b1t * *mv + ib1 * gv;
            *vv = b2t * *vv + ib2 * gv * gv;
            let mhat = *mv / c1t;
            let vhat = *vv / c2t;
            *pv -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

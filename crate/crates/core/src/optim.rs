//! AdamW with decoupled weight decay, and a per-epoch cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moments for every parameter of one store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update. Per element, with bias-corrected moments `m̂`, `v̂`:
    ///
    /// `w ← w·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`
    ///
    /// The shrink uses `wd = 0` for parameters flagged as non-decaying.
    /// Parameters whose gradient is `None` are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "adamw: {} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::contract(format!("adamw: learning rate {lr} must be non-negative")));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (T::c(1.0 - c.beta1.powi(t)), T::c(1.0 - c.beta2.powi(t)));
        let (b1, b2, eps, lr_t) = (T::c(c.beta1), T::c(c.beta2), T::c(c.eps), T::c(lr));
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            if g.len() != p.value.len() || m.len() != g.len() {
                return Err(Error::contract(format!(
                    "adamw: gradient of `{}` has {} elements, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            let shrink = T::one() - T::c(if p.decay { lr * c.weight_decay } else { 0.0 });
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let adaptive = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = *w * shrink - lr_t * adaptive;
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`adamw.m.<param>`, `adamw.v.<param>`).
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            out.push((format!("adamw.m.{}", p.name), Tensor::new(p.value.shape(), m.clone()).expect("moment shape")));
            out.push((format!("adamw.v.{}", p.name), Tensor::new(p.value.shape(), v.clone()).expect("moment shape")));
        }
        out
    }

    /// Inverse of [`state_tensors`](Self::state_tensors).
    pub fn restore<'a>(
        config: AdamWConfig,
        step: u64,
        store: &ParamStore<T>,
        mut get: impl FnMut(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<Self> {
        let mut s = Self::new(config, store);
        s.step = step;
        for ((p, m), v) in store.iter().zip(&mut s.m).zip(&mut s.v) {
            for (kind, slot) in [("m", m), ("v", v)] {
                let name = format!("adamw.{kind}.{}", p.name);
                let t = get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::dim("adamw restore", p.value.shape(), t.shape()));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Epochs over which the rate decays.
    pub t_max: usize,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self { lr_max: 5e-4, lr_min: 1e-5, t_max: 120 }
    }
}

impl CosineSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::config("schedule.t_max", "must be at least 1"));
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::config("schedule", format!("need 0 ≤ lr_min ≤ lr_max, got {} / {}", self.lr_min, self.lr_max)));
        }
        Ok(())
    }
}

/// `η_min + ½(η_max − η_min)(1 + cos(π·epoch/T_max))`, evaluated as a convex
/// combination so both endpoints come out exact.
pub fn cosine_lr(s: &CosineSchedule, epoch: usize) -> Result<f64> {
    if epoch > s.t_max {
        return Err(Error::contract(format!("epoch {epoch} outside 0..={}", s.t_max)));
    }
    s.validate()?;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / s.t_max as f64).cos());
    Ok(s.lr_max * w + s.lr_min * (1.0 - w))
}

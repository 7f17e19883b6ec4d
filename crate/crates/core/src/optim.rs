//! Adam with bias correction and L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Slot, SlotKind};
use crate::tensor::{check_finite, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One Adam update of `param` in place; `step` is the 1-based update count.
pub fn adam_update<T: Element>(
    param: &mut [T],
    grad: &[T],
    moments: &mut Moments<T>,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::shape("adam_step", "parameter, gradient and moment lengths differ"));
    }
    check_finite("adam_step gradient", grad)?;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let (lr, wd, eps) = (T::of(cfg.lr), T::of(cfg.weight_decay), T::of(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i] + wd * param[i];
        let m = b1 * moments.m[i] + (T::one() - b1) * g;
        let v = b2 * moments.v[i] + (T::one() - b2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        param[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    check_finite("adam_step", param)
}

/// Adam optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments<T>>) {
        self.step = step;
        self.moments = moments;
    }

    /// Updates every parameter slot that holds a gradient, replacing the
    /// tensor with a fresh leaf. Slots without gradients are left alone.
    pub fn step(&mut self, slots: &mut [Slot<'_, T>]) -> Result<()> {
        self.step += 1;
        for slot in slots.iter_mut().filter(|s| s.kind == SlotKind::Param) {
            let Some(grad) = slot.tensor.grad() else { continue };
            let mut data = slot.tensor.to_vec();
            let moments = self.moments.entry(slot.name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); data.len()],
                v: vec![T::zero(); data.len()],
            });
            adam_update(&mut data, &grad, moments, self.step, &self.config)?;
            *slot.tensor = Tensor::parameter(data, slot.tensor.shape())?;
        }
        Ok(())
    }
}

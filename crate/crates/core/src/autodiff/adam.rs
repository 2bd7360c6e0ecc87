//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// First and second moment estimates for a named parameter set.
#[derive(Default)]
pub struct AdamState {
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters are visited in name order; every
    /// parameter must have a gradient of matching length.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if grad.len() != param.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: param.shape().to_vec(),
                    rhs: vec![grad.len()],
                });
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let data = param.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers in name order, for checkpointing.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f32], &[f32])> {
        self.slots.iter().map(|(k, s)| (k.as_str(), s.m.as_slice(), s.v.as_slice()))
    }

    /// Rebuild from checkpointed moment buffers.
    pub fn from_entries(step: u64, entries: impl IntoIterator<Item = (String, Vec<f32>, Vec<f32>)>) -> Self {
        let slots = entries
            .into_iter()
            .map(|(name, m, v)| (name, Slot { m, v }))
            .collect();
        AdamState { step, slots }
    }
}

//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update at learning rate `lr`. Frozen parameters are never written;
    /// every gradient is cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && p.value.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, p) in store.iter_mut() {
            if !p.frozen {
                let g = p.value.take_grad().expect("checked above");
                let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                    *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
                }
            }
            p.value.clear_grad();
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64, total: u64) -> Result<f64> {
    if warmup > total {
        return Err(Error::Config(alloc::format!("warmup {warmup} exceeds total {total}")));
    }
    let step = step.min(total);
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(peak);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (core::f64::consts::PI * progress).cos()))
}

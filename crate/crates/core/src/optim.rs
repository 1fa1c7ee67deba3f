//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MissError, Result};
use crate::graph::Tensor;
use crate::params::ParamStore;

/// `lr · ½(1 + cos(π t / total))`: `lr` at `t = 0`, zero at `t = total`.
pub fn cosine_lr(lr: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (t.min(total) as f64) / total as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter that has an entry in `grads`; the rest
    /// of `params` is left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.expect(name)?;
            if p.dim() != g.dim() {
                return Err(MissError::shape(format!("gradient for '{name}' {:?} vs parameter {:?}", g.dim(), p.dim())));
            }
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps) + weight_decay * *p;
                *p -= lr * update;
            });
        }
        Ok(())
    }
}

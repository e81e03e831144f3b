//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay non-negative");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip norm must be positive");
            }
        }
        Ok(())
    }
}

/// What one optimizer step saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// Scales the gradients of `ids` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids
        .iter()
        .flat_map(|&id| store.grad(id).data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for &id in ids {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

impl AdamW {
    /// Optimizes every trainable tensor of `store`.
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = store.trainable_ids();
        let zeros: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        Ok(AdamW { config, ids, m: zeros.clone(), v: zeros, t: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clip, decay, then the bias-corrected Adam update.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepInfo> {
        for &id in &self.ids {
            if !store.grad(id).is_finite() {
                return Err(Error::NanGradient { param: store.get(id).name.clone() });
            }
        }
        let (grad_norm, clipped) = match self.config.clip_norm {
            Some(c) => {
                let n = clip_global_norm(store, &self.ids, c);
                (n, n > c)
            }
            None => {
                let n = self.ids.iter().flat_map(|&id| store.grad(id).data()).map(|g| g * g).sum::<f64>().sqrt();
                (n, false)
            }
        };

        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                *w *= decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}

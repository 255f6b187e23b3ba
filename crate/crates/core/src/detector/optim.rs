//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm limit; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, a)| vec![0.0; a.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Global L2 norm of the gradients.
    pub fn grad_norm(grads: &[(ParamId, Vec<f64>)]) -> f64 {
        grads.iter().flat_map(|(_, g)| g.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// One update. Parameters without a gradient still decay and advance
    /// their moments with a zero gradient. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> f64 {
        let norm = Self::grad_norm(grads);
        let c = self.config;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let mut full: Vec<Option<&[f64]>> = vec![None; store.len()];
        for (id, g) in grads {
            full[id.index()] = Some(g);
        }
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = full[i].map_or(0.0, |g| g[j] * scale);
                p[j] -= c.lr * c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Array;

    #[test]
    fn scalar_closed_form_update() {
        let mut store = ParamStore::new();
        let id = store.add("p", Array::from_vec(vec![1.0]));
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[(id, vec![2.0])]);
        let p = store.get(id).data()[0];
        assert!((p - 0.9).abs() < 1e-8, "{p}");
        assert!((opt.m[0][0] - 0.2).abs() < 1e-15);
        assert!((opt.v[0][0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("p", Array::from_vec(vec![1.0, -3.0]));
        let mut opt = AdamW::new(OptimizerConfig { lr: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, &[(id, vec![5.0, 1.0])]);
        assert_eq!(store.get(id).data(), &[1.0, -3.0]);
    }

    #[test]
    fn clipping_bounds_the_applied_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Array::from_vec(vec![0.0, 0.0]));
        let mut opt = AdamW::new(OptimizerConfig { weight_decay: 0.0, ..Default::default() }, &store);
        let norm = opt.step(&mut store, &[(id, vec![30.0, 40.0])]);
        assert_eq!(norm, 50.0);
        assert!((opt.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((opt.m[0][1] - 0.1 * 0.8).abs() < 1e-15);
    }
}

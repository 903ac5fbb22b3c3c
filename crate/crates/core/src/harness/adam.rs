use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of steps taken so far.
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

/// Euclidean norm over all gradient tensors.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads.values());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

impl Adam {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || -> ParamStore {
            params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Parameters without a gradient entry are treated as
    /// having a zero gradient. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: BTreeMap<String, Tensor>) -> Result<f64> {
        for (name, g) in &grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        let norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(grads.values()),
        };
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            if m.shape() != p.shape() {
                return Err(Error::shape("adam_step", p.shape(), m.shape()));
            }
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

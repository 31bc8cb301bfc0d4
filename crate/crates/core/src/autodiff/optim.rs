use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// AdamW: decay is applied to the parameters directly instead of being
    /// folded into the gradient.
    pub decoupled_decay: bool,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decoupled_decay: false }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, decoupled_decay: true, ..Self::adam(lr) }
    }
}

/// Adam moments keyed by parameter, plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub t: u64,
    pub(crate) moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, moments: BTreeMap::new() }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor) {
        self.moments.insert(id, (m, v));
    }

    /// First and second moments of every parameter updated so far.
    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.moments.iter().map(|(&id, (m, v))| (id, m, v))
    }

    /// One bias-corrected Adam(W) update of every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() {
                return shape_err(format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    store.name(*id),
                    store.get(*id).shape()
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let (m, v) = self.moments.entry(*id).or_insert_with(|| {
                (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec()))
            });
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let mut gj = g.data()[j];
                if c.weight_decay != 0.0 {
                    if c.decoupled_decay {
                        pd[j] *= 1.0 - c.lr * c.weight_decay;
                    } else {
                        gj += c.weight_decay * pd[j];
                    }
                }
                let mj = &mut m.data_mut()[j];
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                let mhat = *mj / bc1;
                let vj = &mut v.data_mut()[j];
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let vhat = *vj / bc2;
                pd[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

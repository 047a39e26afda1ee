//! Adam optimiser.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    #[serde(flatten)]
    config: AdamConfig,
    t: u64,
}

/// Adam with bias correction. Moment estimates are kept in stores shaped
/// like the parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.entry_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let v = self.v.entry_mut(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let (m, v) = (m.value.data_mut(), v.value.data_mut());
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Writes `adam_m.bin`, `adam_v.bin` and `adam.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.m.save(dir.join("adam_m.bin"))?;
        self.v.save(dir.join("adam_v.bin"))?;
        let meta = AdamMeta {
            config: self.config,
            t: self.t,
        };
        std::fs::write(dir.join("adam.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: AdamMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("adam.json"))?)?;
        Ok(Self {
            config: meta.config,
            t: meta.t,
            m: ParamStore::load(dir.join("adam_m.bin"))?,
            v: ParamStore::load(dir.join("adam_v.bin"))?,
        })
    }
}

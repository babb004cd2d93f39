use std::collections::BTreeMap;

use seld_autodiff::pack::Pack;
use seld_autodiff::Tensor;

use super::config::OptimConfig;
use crate::error::{Result, SeldError};
use crate::params::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched, decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let OptimConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(SeldError::Invalid(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            }
        }
        Ok(())
    }

    pub fn to_pack(&self, pack: &mut Pack) -> Result<()> {
        pack.set_meta("adam.step", self.step.to_string());
        for (k, t) in &self.m {
            pack.insert(format!("adam.m.{k}"), t.clone())?;
        }
        for (k, t) in &self.v {
            pack.insert(format!("adam.v.{k}"), t.clone())?;
        }
        Ok(())
    }

    pub fn from_pack(cfg: OptimConfig, pack: &Pack) -> Result<Self> {
        let step = pack
            .meta
            .get("adam.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SeldError::Checkpoint("missing optimizer step".into()))?;
        let mut out = Self::new(cfg);
        out.step = step;
        for (name, t) in pack.iter() {
            if let Some(k) = name.strip_prefix("adam.m.") {
                out.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                out.v.insert(k.to_string(), t.clone());
            }
        }
        Ok(out)
    }
}

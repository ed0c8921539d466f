use std::collections::BTreeMap;

use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter and
/// only trainable parameters are ever updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for id in grads.ids() {
            let g = grads.get(id).expect("id from grads");
            if g.len() != store.get(id).numel() {
                return Err(Error::Shape(format!(
                    "adam: gradient for {} has {} elements, parameter has {}",
                    store.name(id),
                    g.len(),
                    store.get(id).numel()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in grads.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads.get(id).expect("id from grads");
            let n = g.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`<name>.adam_m`, `<name>.adam_v`) plus the step counter.
    pub fn export(&self, store: &ParamStore) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::new();
        for (id, (m, v)) in &self.moments {
            let shape = store.get(*id).shape().to_vec();
            let name = store.name(*id);
            out.push((format!("{name}.adam_m"), Tensor::new(shape.clone(), m.clone()).expect("moment shape")));
            out.push((format!("{name}.adam_v"), Tensor::new(shape, v.clone()).expect("moment shape")));
        }
        (self.step, out)
    }

    pub fn import(config: AdamConfig, step: u64, store: &ParamStore, named: &[(String, Tensor)]) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.step = step;
        let lookup: BTreeMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (id, name, value, _) in store.iter() {
            let (Some(m), Some(v)) = (lookup.get(format!("{name}.adam_m").as_str()), lookup.get(format!("{name}.adam_v").as_str())) else {
                continue;
            };
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::Shape(format!("adam moments for {name} do not match the parameter shape")));
            }
            adam.moments.insert(id, (m.data().to_vec(), v.data().to_vec()));
        }
        Ok(adam)
    }
}

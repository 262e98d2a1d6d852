//! AdamW with decoupled weight decay.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(config: &OptimConfig, params: usize) -> Self {
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            first: vec![None; params],
            second: vec![None; params],
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update at rate `lr`. A missing gradient counts as zero; frozen
    /// parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let Some(theta) = store.value_mut(id) else { continue };
            let n = theta.numel();
            let m = self.first[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; n]);
            let g = grads[i].as_ref().map(|g| g.data());
            if g.is_some_and(|g| g.len() != n) {
                return Err(Error::Dimension(format!("gradient size mismatch for parameter {i}")));
            }
            for (j, p) in theta.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

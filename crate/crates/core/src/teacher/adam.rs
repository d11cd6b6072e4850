use std::collections::BTreeMap;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Adam with global-norm gradient clipping. Consumes and clears the
/// gradients held by the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<f64>, clip: f64) -> Result<f64> {
        let sq: f64 = store
            .iter()
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter().map(|x| x * x))
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient norm".into()));
        }
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, t) in store.iter_mut() {
            let Some(grad) = t.grad.take() else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            for (i, (p, g)) in t.data_mut().iter_mut().zip(&grad).enumerate() {
                let g = g * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

use crate::error::{Error, Result};
use crate::model::NetworkParams;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &NetworkParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Fails without touching anything if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) -> Result<()> {
        for (name, g) in grads.names.iter().zip(&grads.tensors) {
            if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}] at step {}", self.t + 1)));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (b, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            for (k, (x, &gk)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[b][k];
                let v = &mut self.v[b][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gk;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gk * gk;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

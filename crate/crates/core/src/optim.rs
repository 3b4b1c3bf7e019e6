//! Adam, slice-based and decoupled from the network: the trainer hands it
//! aligned parameter and gradient lists in a fixed order. Moment math runs
//! in f64 regardless of the stored precision so the update is the textbook
//! one; storage stays in T so moments checkpoint alongside the weights.

use crate::tensor::{Real, Value};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::usage(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
                return Err(Error::usage(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::usage(format!("epsilon must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    t: u64,
    m: Vec<Value<T>>,
    v: Vec<Value<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam { config, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Value<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Value<T>] {
        &self.v
    }

    /// Reinstates a checkpointed state; the next step continues the original
    /// trajectory bit for bit.
    pub fn restore(&mut self, t: u64, m: Vec<Value<T>>, v: Vec<Value<T>>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::shape(format!(
                "moment lists disagree: {} first vs {} second",
                m.len(),
                v.len()
            )));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.dims() != b.dims() {
                return Err(Error::shape(format!(
                    "moment shapes disagree: {:?} vs {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update over every tensor. `params` and `grads` are aligned; the
    /// first call fixes the tensor count and shapes.
    pub fn step(&mut self, params: &mut [&mut Value<T>], grads: &[Value<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() && self.t == 0 {
            for g in grads {
                self.m.push(Value::zeros(g.dims().to_vec()));
                self.v.push(Value::zeros(g.dims().to_vec()));
            }
        }
        if grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        for i in 0..grads.len() {
            if params[i].dims() != grads[i].dims() || grads[i].dims() != self.m[i].dims() {
                return Err(Error::shape(format!(
                    "tensor {i}: param {:?}, grad {:?}, moments {:?}",
                    params[i].dims(),
                    grads[i].dims(),
                    self.m[i].dims()
                )));
            }
        }

        self.t += 1;
        let c = &self.config;
        let m_corr = 1.0 - c.beta1.powi(self.t as i32);
        let v_corr = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for j in 0..g.len() {
                let gj = g[j].to_f64();
                let mj = c.beta1 * m[j].to_f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].to_f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let m_hat = mj / m_corr;
                let v_hat = vj / v_corr;
                p[j] = T::of(p[j].to_f64() - c.lr * m_hat / (v_hat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}

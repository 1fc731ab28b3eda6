use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Optimizer constants shared by every parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState { step: 0, m: vec![0.0; len], v: vec![0.0; len], config }
    }

    /// One Adam update with decoupled weight decay.
    pub fn update(&mut self, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                dims: vec![vec![param.len()], vec![grad.len()], vec![self.m.len()]],
            });
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - crate::math::powi(c.beta1, t);
        let bc2 = 1.0 - crate::math::powi(c.beta2, t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            param[i] = param[i] * decay - c.lr * mh / (math::sqrt(vh) + c.eps);
        }
        Ok(())
    }
}

/// Applies one update to every parameter and zeroes the gradients.
pub fn adam_step(params: &mut [Tensor], grads: &mut [Tensor], states: &mut [AdamState]) -> Result<()> {
    if params.len() != grads.len() || params.len() != states.len() {
        return Err(Error::Shape {
            op: "adam_step",
            dims: vec![vec![params.len()], vec![grads.len()], vec![states.len()]],
        });
    }
    for ((p, g), s) in params.iter_mut().zip(grads.iter_mut()).zip(states.iter_mut()) {
        if p.dims() != g.dims() {
            return Err(Error::Shape { op: "adam_step", dims: vec![p.dims().to_vec(), g.dims().to_vec()] });
        }
        s.update(p.data_mut(), g.data())?;
        g.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{BiteError, Result};
use crate::model::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// One zeroed moment slot per shape.
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn for_params(config: AdamConfig, params: &[Param]) -> Self {
        Self::new(config, params.iter().map(|p| p.value.shape()))
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step_params(&mut self, params: &mut [Param]) -> Result<()> {
        self.check(params.len(), |i| params[i].value.shape(), |i| params[i].grad.shape())?;
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, &mut p.value, &p.grad);
        }
        Ok(())
    }

    pub fn step(&mut self, values: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if values.len() != grads.len() {
            return Err(BiteError::shape(format!("{} parameters but {} gradients", values.len(), grads.len())));
        }
        self.check(values.len(), |i| values[i].shape(), |i| grads[i].shape())?;
        self.step += 1;
        for (i, (v, g)) in values.iter_mut().zip(grads).enumerate() {
            self.update(i, v, g);
        }
        Ok(())
    }

    fn check<'a>(
        &self,
        n: usize,
        value: impl Fn(usize) -> &'a [usize],
        grad: impl Fn(usize) -> &'a [usize],
    ) -> Result<()> {
        if n != self.m.len() {
            return Err(BiteError::shape(format!("optimizer holds {} slots, got {n} parameters", self.m.len())));
        }
        for i in 0..n {
            if value(i) != self.m[i].shape() || grad(i) != self.m[i].shape() {
                return Err(BiteError::shape(format!(
                    "parameter {i}: state {:?}, value {:?}, gradient {:?}",
                    self.m[i].shape(),
                    value(i),
                    grad(i)
                )));
            }
        }
        Ok(())
    }

    fn update(&mut self, i: usize, value: &mut Tensor, grad: &Tensor) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

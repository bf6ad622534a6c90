//! Parameter tensors and the Adam optimizer.

use serde::{Deserialize, Serialize};

/// A weight matrix (or bias row) with its gradient buffer. The forward pass
/// uses `mult * value`; `lr_scale` multiplies the optimizer step size.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub mult: f64,
    pub lr_scale: f64,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            value: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
            mult: 1.0,
            lr_scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Param]) -> Self {
        Self {
            config,
            steps: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one bias-corrected update from the stored gradients.
    pub fn step(&mut self, params: &mut [Param]) {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let rate = lr * p.lr_scale;
            if rate == 0.0 {
                continue;
            }
            for ((w, g), (mi, vi)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *w -= rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

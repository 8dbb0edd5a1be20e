use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum SGD with weight decay folded into the gradient:
/// `v ← μ·v + g + λ·w`, `w ← w − η·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState {
            config,
            velocity: Vec::new(),
        }
    }

    /// Updates `params` in place. Velocities are created as zeros on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::dim(
                "sgd_step",
                &[params.len()],
                &[grads.len()],
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(TensorError::dim(
                "sgd_step",
                &[self.velocity.len()],
                &[params.len()],
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(TensorError::dim("sgd_step", p.shape(), g.shape()));
            }
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

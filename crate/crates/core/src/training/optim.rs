//! Plain gradient descent and adaptive-moment updates with global-norm
//! gradient clipping.

use std::collections::HashMap;

use crate::config::{OptimizerKind, TrainConfig};
use crate::model::ModelParams;
use crate::numerics::Matrix;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state; moment buffers are keyed by tensor name.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    grad_clip: f64,
    step_count: u64,
    first_moment: HashMap<String, Matrix>,
    second_moment: HashMap<String, Matrix>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            grad_clip: cfg.grad_clip,
            step_count: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    /// Clip `grads` to the configured global norm (in place), then apply one
    /// update. `grads` must align with `params.tensors_mut()` order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut [Matrix]) {
        let norm_sq: f64 = grads.iter().map(Matrix::frobenius_norm_sq).sum();
        let norm = norm_sq.sqrt();
        if self.grad_clip > 0.0 && norm > self.grad_clip {
            let scale = self.grad_clip / norm;
            for g in grads.iter_mut() {
                for v in g.as_mut_slice() {
                    *v *= scale;
                }
            }
        }

        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, tensor), grad) in params.tensors_mut().into_iter().zip(grads.iter()) {
                    tensor.add_scaled(grad, -self.learning_rate);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as f64;
                let bias1 = 1.0 - ADAM_BETA1.powf(t);
                let bias2 = 1.0 - ADAM_BETA2.powf(t);
                for ((name, tensor), grad) in params.tensors_mut().into_iter().zip(grads.iter()) {
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    let v = self
                        .second_moment
                        .entry(name)
                        .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    for ((p, g), (mi, vi)) in tensor
                        .as_mut_slice()
                        .iter_mut()
                        .zip(grad.as_slice())
                        .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()))
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

//! SGD with momentum, decoupled per-parameter weight-decay opt-out, and a
//! cosine learning-rate schedule.

use crate::tensor::Tensor;

/// A trainable tensor together with its momentum buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub velocity: Vec<f64>,
    /// Whether the optimizer's weight decay applies to this parameter.
    pub decay: bool,
}

impl Param {
    pub fn new(mut value: Tensor, decay: bool) -> Param {
        value.alloc_grad();
        let velocity = vec![0.0; value.numel()];
        Param { value, velocity, decay }
    }

    pub fn zero_grad(&mut self) {
        self.value.zero_grad();
    }

    /// One SGD step: `v = mu*v + (g + wd*w); w -= lr*v`.
    pub fn step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        let wd = if self.decay { weight_decay } else { 0.0 };
        let n = self.value.numel();
        // Split borrows: grad and data live in the same tensor.
        let grad: Vec<f64> = self.value.grad().expect("param without grad").to_vec();
        let data = self.value.data_mut();
        for i in 0..n {
            let g = grad[i] + wd * data[i];
            self.velocity[i] = momentum * self.velocity[i] + g;
            data[i] -= lr * self.velocity[i];
        }
    }
}

/// Scalar analogue of [`Param::step`] for quantizer thresholds. Weight decay
/// is not applied here; the threshold gradient already carries its own decay
/// term.
pub fn sgd_scalar(value: &mut f64, grad: f64, velocity: &mut f64, lr: f64, momentum: f64) {
    *velocity = momentum * *velocity + grad;
    *value -= lr * *velocity;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerCfg {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerCfg {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return Err(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Half-cosine decay from `lr0` toward zero over `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    assert!(total > 0, "schedule needs at least one step");
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

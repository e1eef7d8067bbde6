use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.numel()];
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Plain gradient descent: `value -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f32) {
        for (v, g) in self.value.data_mut().iter_mut().zip(&self.grad) {
            *v -= lr * g;
        }
    }
}

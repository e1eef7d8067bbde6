//! Dense f32 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values are plain row-major [`Tensor`]s. Differentiable computation is
//! recorded on a [`Tape`]: every op appends a node holding its output, and
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is
//! a valid reverse topological order because an op can only consume nodes
//! that already exist.
//!
//! 5-D activations use the layout `[batch, channel, depth, height, width]`.

mod kernels;
mod param;
mod tape;

pub use kernels::{dot, sigmoid_scalar};
pub use param::Parameter;
pub use tape::{BatchNormMode, BatchNormState, PoolKind, Tape, Var, PROB_EPS};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies channels `[start, start + count)` of a `[B, C, ...]` tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        if self.shape.len() < 2 || start + count > self.shape[1] || count == 0 {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                shape: self.shape.clone(),
                reason: "channel range out of bounds",
            });
        }
        let batch = self.shape[0];
        let channels = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(batch * count * inner);
        for b in 0..batch {
            let base = (b * channels + start) * inner;
            data.extend_from_slice(&self.data[base..base + count * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = count;
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidShape {
            op: "stack",
            shape: Vec::new(),
            reason: "nothing to stack",
        })?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &item.shape));
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// `[B, C, D, H, W]` view helper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims5 {
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub(crate) fn of(op: &'static str, shape: &[usize]) -> Result<Self> {
        match *shape {
            [b, c, d, h, w] => Ok(Dims5 { b, c, d, h, w }),
            _ => Err(Error::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: "expected [batch, channel, depth, height, width]",
            }),
        }
    }

    pub(crate) fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub(crate) fn to_vec(self) -> Vec<usize> {
        vec![self.b, self.c, self.d, self.h, self.w]
    }
}

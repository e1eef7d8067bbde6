use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::kernels::{self, BN_EPS, KERNEL_TAPS};
use super::{Dims5, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNormState {
    pub const MOMENTUM: f32 = 0.9;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics and fold them into the running state.
    Train(&'a mut BatchNormState),
    /// Normalize with the running state.
    Eval(&'a BatchNormState),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool3d {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Reshape(Var),
    Sum(Var),
    WeightedBce {
        p: Var,
        labels: Vec<f32>,
        lambda: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// With recording disabled every op still computes its value but keeps no
/// backward state, which is how evaluation-mode inference runs.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.recording,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).expect("kernel output matches its declared shape")
    }

    /// 3x3x3 convolution, stride 1, zero padding 1.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let dims = Dims5::of("conv3d", self.shape(input))?;
        let ws = self.shape(weight);
        if ws.len() != 5 || ws[2..] != [3, 3, 3] {
            return Err(Error::InvalidShape {
                op: "conv3d",
                shape: ws.to_vec(),
                reason: "weight must be [out, in, 3, 3, 3]",
            });
        }
        if ws[1] != dims.c {
            return Err(Error::shape("conv3d", self.shape(input), ws));
        }
        let cout = ws[0];
        if self.shape(bias) != [cout] {
            return Err(Error::shape("conv3d bias", ws, self.shape(bias)));
        }
        let out = kernels::conv3d_forward(
            self.value(input).data(),
            dims,
            self.value(weight).data(),
            self.value(bias).data(),
            cout,
        );
        let shape = Dims5 { c: cout, ..dims }.to_vec();
        Ok(self.push(
            Self::tensor(shape, out),
            &[input, weight, bias],
            Op::Conv3d { input, weight, bias },
        ))
    }

    /// 2x2x2 pooling with stride 2.
    pub fn pool3d(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let dims = Dims5::of("pool3d", self.shape(input))?;
        if dims.d % 2 != 0 || dims.h % 2 != 0 || dims.w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "pool3d",
                shape: dims.to_vec(),
                reason: "spatial dimensions must be even",
            });
        }
        let shape = Dims5 {
            d: dims.d / 2,
            h: dims.h / 2,
            w: dims.w / 2,
            ..dims
        }
        .to_vec();
        let x = self.value(input).data();
        Ok(match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::maxpool3d_forward(x, dims);
                self.push(Self::tensor(shape, out), &[input], Op::MaxPool3d { input, argmax })
            }
            PoolKind::Avg => {
                let out = kernels::avgpool3d_forward(x, dims);
                self.push(Self::tensor(shape, out), &[input], Op::AvgPool3d { input })
            }
        })
    }

    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        self.pool3d(input, PoolKind::Max)
    }

    pub fn batchnorm3d(&mut self, input: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        let dims = Dims5::of("batchnorm3d", self.shape(input))?;
        for p in [gamma, beta] {
            if self.shape(p) != [dims.c] {
                return Err(Error::shape("batchnorm3d", &dims.to_vec(), self.shape(p)));
            }
        }
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train(state) => {
                if dims.b * dims.spatial() < 2 {
                    return Err(Error::InvalidShape {
                        op: "batchnorm3d",
                        shape: dims.to_vec(),
                        reason: "training mode needs at least two values per channel",
                    });
                }
                let (mean, var) = kernels::channel_stats(x, dims);
                let count = (dims.b * dims.spatial()) as f32;
                let m = BatchNormState::MOMENTUM;
                for c in 0..dims.c {
                    let unbiased = var[c] * count / (count - 1.0);
                    state.mean[c] = m * state.mean[c] + (1.0 - m) * mean[c];
                    state.var[c] = m * state.var[c] + (1.0 - m) * unbiased;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval(state) => {
                if state.mean.len() != dims.c || state.var.len() != dims.c {
                    return Err(Error::shape("batchnorm3d state", &dims.to_vec(), &[state.mean.len()]));
                }
                (state.mean.clone(), state.var.clone(), false)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / libm::sqrtf(v + BN_EPS)).collect();
        let keep = self.recording;
        let (out, xhat) = kernels::batchnorm_apply(
            x,
            dims,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
            keep,
        );
        let shape = dims.to_vec();
        Ok(self.push(
            Self::tensor(shape, out),
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = x.shape().to_vec();
        self.push(Self::tensor(shape, out), &[input], Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f32> = x.data().iter().map(|&v| kernels::sigmoid_scalar(v)).collect();
        let shape = x.shape().to_vec();
        self.push(Self::tensor(shape, out), &[input], Op::Sigmoid { input })
    }

    /// `input [B, N] * weight [M, N]^T + bias [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("fully_connected", xs, ws));
        }
        let (batch, n, m) = (xs[0], xs[1], ws[0]);
        if self.shape(bias) != [m] {
            return Err(Error::shape("fully_connected bias", ws, self.shape(bias)));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bias_v = self.value(bias).data();
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend(bias_v.iter().copied());
        }
        kernels::gemm_nt(batch, m, n, x, w, &mut out);
        Ok(self.push(
            Self::tensor(vec![batch, m], out),
            &[input, weight, bias],
            Op::Linear { input, weight, bias },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), &[a, b], Op::Mul(a, b)))
    }

    /// Concatenates `[B, C1, ...]` and `[B, C2, ...]` into `[B, C1 + C2, ...]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
        let inner: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for n in 0..batch {
            out.extend_from_slice(&xa[n * ca * inner..(n + 1) * ca * inner]);
            out.extend_from_slice(&xb[n * cb * inner..(n + 1) * cb * inner]);
        }
        Ok(self.push(Self::tensor(shape, out), &[a, b], Op::Concat(a, b)))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let batch = x.shape()[0];
        let shape = vec![batch, x.numel() / batch];
        let out = x.data().to_vec();
        self.push(Self::tensor(shape, out), &[input], Op::Reshape(input))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), &[input], Op::Sum(input))
    }

    /// Class-weighted binary cross-entropy averaged over the batch:
    /// `-lambda * z * ln p - (1 - lambda) * (1 - z) * ln (1 - p)`, with `p`
    /// clamped to `[1e-7, 1 - 1e-7]`. The gradient is evaluated at the
    /// clamped probability.
    pub fn weighted_bce(&mut self, p: Var, labels: &[f32], lambda: f32) -> Result<Var> {
        let ps = self.shape(p);
        let batch = ps.first().copied().unwrap_or(0);
        if ps.len() != 2 || ps[1] != 1 || batch != labels.len() {
            return Err(Error::shape("weighted_bce", ps, &[labels.len(), 1]));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1), got {lambda}")));
        }
        if labels.iter().any(|&z| z != 0.0 && z != 1.0) {
            return Err(Error::Validation("labels must be 0 or 1".into()));
        }
        let mut total = 0.0f64;
        for (&pi, &z) in self.value(p).data().iter().zip(labels) {
            let pc = clamp_prob(pi) as f64;
            let l = lambda as f64;
            total -= l * z as f64 * libm::log(pc) + (1.0 - l) * (1.0 - z as f64) * libm::log(1.0 - pc);
        }
        let loss = (total / batch as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            &[p],
            Op::WeightedBce {
                p,
                labels: labels.to_vec(),
                lambda,
            },
        ))
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// a gradient. Intermediate gradients are recomputed on each call while
    /// leaf gradients keep accumulating until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "loss is not connected to any differentiable leaf".into(),
            ));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            self.accumulate(loss, vec![1.0]);
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv3d { input, weight, bias } => {
                let dims = Dims5::of("conv3d", self.shape(*input)).expect("validated in forward");
                let cout = self.shape(*weight)[0];
                let grads = kernels::conv3d_backward(val(*input), dims, val(*weight), cout, g, wants(*input));
                debug_assert_eq!(grads.weight.len(), cout * dims.c * KERNEL_TAPS);
                if let Some(gx) = grads.input {
                    out.push((*input, gx));
                }
                out.push((*weight, grads.weight));
                out.push((*bias, grads.bias));
            }
            Op::MaxPool3d { input, argmax } => {
                let mut gx = vec![0.0f32; self.nodes[input.0].value.numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx as usize] += gv;
                }
                out.push((*input, gx));
            }
            Op::AvgPool3d { input } => {
                let dims = Dims5::of("pool3d", self.shape(*input)).expect("validated in forward");
                out.push((*input, kernels::avgpool3d_backward(g, dims)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let dims = Dims5::of("batchnorm3d", self.shape(*input)).expect("validated in forward");
                if *batch_stats {
                    let grads = kernels::batchnorm_backward(g, xhat, inv_std, val(*gamma), dims);
                    out.push((*input, grads.input));
                    out.push((*gamma, grads.gamma));
                    out.push((*beta, grads.beta));
                } else {
                    let n = dims.spatial();
                    let gam = val(*gamma);
                    let mut gx = vec![0.0f32; g.len()];
                    let mut gg = vec![0.0f32; dims.c];
                    let mut gb = vec![0.0f32; dims.c];
                    for b in 0..dims.b {
                        for c in 0..dims.c {
                            let off = (b * dims.c + c) * n;
                            for j in off..off + n {
                                gx[j] = g[j] * gam[c] * inv_std[c];
                                gg[c] += g[j] * xhat[j];
                                gb[c] += g[j];
                            }
                        }
                    }
                    out.push((*input, gx));
                    out.push((*gamma, gg));
                    out.push((*beta, gb));
                }
            }
            Op::Relu { input } => {
                let gx = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*input, gx));
            }
            Op::Sigmoid { input: inp } => {
                let y = self.nodes[i].value.data();
                let gx = y.iter().zip(g).map(|(&yv, &gv)| gv * yv * (1.0 - yv)).collect();
                out.push((*inp, gx));
            }
            Op::Linear { input, weight, bias } => {
                let (batch, n) = (self.shape(*input)[0], self.shape(*input)[1]);
                let m = self.shape(*weight)[0];
                if wants(*input) {
                    let mut gx = vec![0.0f32; batch * n];
                    kernels::gemm_nn(batch, n, m, g, val(*weight), &mut gx);
                    out.push((*input, gx));
                }
                let mut gw = vec![0.0f32; m * n];
                kernels::gemm_tn(m, n, batch, g, val(*input), &mut gw);
                out.push((*weight, gw));
                let mut gb = vec![0.0f32; m];
                for row in g.chunks_exact(m) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                out.push((*bias, gb));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let ga = val(*b).iter().zip(g).map(|(y, gv)| y * gv).collect();
                let gb = val(*a).iter().zip(g).map(|(x, gv)| x * gv).collect();
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let (batch, ca, cb) = (sa[0], sa[1], self.shape(*b)[1]);
                let inner: usize = sa[2..].iter().product();
                let mut ga = Vec::with_capacity(batch * ca * inner);
                let mut gb = Vec::with_capacity(batch * cb * inner);
                for n in 0..batch {
                    let base = n * (ca + cb) * inner;
                    ga.extend_from_slice(&g[base..base + ca * inner]);
                    gb.extend_from_slice(&g[base + ca * inner..base + (ca + cb) * inner]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Reshape(input) => out.push((*input, g.to_vec())),
            Op::Sum(input) => {
                let n = self.nodes[input.0].value.numel();
                out.push((*input, vec![g[0]; n]));
            }
            Op::WeightedBce { p, labels, lambda } => {
                let batch = labels.len() as f32;
                let gx = val(*p)
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &z)| {
                        let pc = clamp_prob(pi);
                        g[0] / batch * (-lambda * z / pc + (1.0 - lambda) * (1.0 - z) / (1.0 - pc))
                    })
                    .collect();
                out.push((*p, gx));
            }
        }
        out
    }
}

pub const PROB_EPS: f32 = 1e-7;

fn clamp_prob(p: f32) -> f32 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

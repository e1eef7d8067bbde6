//! Base single-branch classifier and the dual-branch fusion family.
//!
//! A fused model with fusion point `alpha` runs the mask through its own
//! copy of conv blocks `1..=alpha` (branch 1), the image through a second,
//! unshared copy (branch 2), combines the two feature maps with the fusion
//! op and continues with blocks `alpha + 1..=L`, a hidden fully connected
//! layer with ReLU and a single-logit output with sigmoid.
//!
//! Each conv block is `conv3x3x3 -> batch norm -> ReLU`, followed by 2x2x2
//! pooling when its index is listed in [`BaseConfig::pool_after`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::tensor::PoolKind;
use crate::tensor::{BatchNormMode, BatchNormState, Parameter, Tape, Tensor, Var};

/// Tolerance for accepting mask voxels as binary.
pub const MASK_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub num_layers: usize,
    pub channels: Vec<usize>,
    pub input_side: usize,
    /// 1-based block indices followed by pooling.
    pub pool_after: Vec<usize>,
    pub fc_hidden: usize,
    pub pool: PoolKind,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            num_layers: 6,
            channels: vec![16, 32, 64, 128, 128, 128],
            input_side: 32,
            pool_after: vec![1, 2, 3, 4, 5],
            fc_hidden: 256,
            pool: PoolKind::Max,
        }
    }
}

impl BaseConfig {
    /// Default widths at 128-voxel input.
    pub fn full_scale() -> Self {
        BaseConfig {
            input_side: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_layers;
        if l == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.channels.len() != l {
            return Err(Error::Config(format!(
                "channels lists {} widths for {} layers",
                self.channels.len(),
                l
            )));
        }
        if self.channels.contains(&0) || self.fc_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut seen = vec![false; l + 1];
        for &k in &self.pool_after {
            if k == 0 || k > l {
                return Err(Error::Config(format!("pool_after index {k} outside 1..={l}")));
            }
            if core::mem::replace(&mut seen[k], true) {
                return Err(Error::Config(format!("pool_after lists layer {k} twice")));
            }
        }
        let factor = 1usize
            .checked_shl(self.pool_after.len() as u32)
            .ok_or_else(|| Error::Config("too many pooling layers".into()))?;
        if self.input_side == 0 || !self.input_side.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input_side {} is not divisible by 2^{} = {}",
                self.input_side,
                self.pool_after.len(),
                factor
            )));
        }
        Ok(())
    }

    pub fn pools_after(&self, layer: usize) -> bool {
        self.pool_after.contains(&layer)
    }

    /// Spatial side of the feature map entering block `layer` (1-based).
    pub fn side_before(&self, layer: usize) -> usize {
        let pools = self.pool_after.iter().filter(|&&k| k < layer).count();
        self.input_side >> pools
    }

    /// Spatial side of the feature map leaving block `layer`.
    pub fn side_after(&self, layer: usize) -> usize {
        self.side_before(layer + 1)
    }

    pub fn width(&self, layer: usize) -> usize {
        self.channels[layer - 1]
    }
}

/// How the two branch feature maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Add,
    Mul,
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Add, Fusion::Mul, Fusion::Concat];

    pub fn symbol(self) -> &'static str {
        match self {
            Fusion::Add => "+",
            Fusion::Mul => "*",
            Fusion::Concat => "⊕",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Add => "add",
            Fusion::Mul => "mul",
            Fusion::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<Fusion> {
        match s {
            "add" | "+" | "sum" => Some(Fusion::Add),
            "mul" | "*" | "product" => Some(Fusion::Mul),
            "concat" | "⊕" | "cat" => Some(Fusion::Concat),
            _ => None,
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A point `(alpha, beta)` of the search space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub alpha: usize,
    pub beta: Fusion,
    pub base: BaseConfig,
}

impl FusionSpec {
    pub fn new(alpha: usize, beta: Fusion, base: BaseConfig) -> Result<Self> {
        let spec = FusionSpec { alpha, beta, base };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.alpha == 0 || self.alpha > self.base.num_layers {
            return Err(Error::Config(format!(
                "alpha {} outside 1..={}",
                self.alpha, self.base.num_layers
            )));
        }
        Ok(())
    }

    /// `FusionNet3*` style label.
    pub fn name(&self) -> String {
        format!("FusionNet{}{}", self.alpha, self.beta.symbol())
    }
}

/// All `3 * L` specs, alpha ascending, then `Add`, `Mul`, `Concat`.
pub fn enumerate_space(base: &BaseConfig) -> Vec<FusionSpec> {
    (1..=base.num_layers)
        .flat_map(|alpha| {
            Fusion::ALL.into_iter().map(move |beta| FusionSpec {
                alpha,
                beta,
                base: base.clone(),
            })
        })
        .collect()
}

/// Which input a single-branch model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchInput {
    Mask,
    Image,
    /// Mask and image stacked as two input channels.
    Stacked,
}

impl BranchInput {
    pub fn channels(self) -> usize {
        match self {
            BranchInput::Mask | BranchInput::Image => 1,
            BranchInput::Stacked => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Single { input: BranchInput },
    Fused { alpha: usize, beta: Fusion },
}

impl Architecture {
    pub fn label(&self) -> String {
        match self {
            Architecture::Single {
                input: BranchInput::Mask,
            } => "Mask".into(),
            Architecture::Single {
                input: BranchInput::Image,
            } => "Image".into(),
            Architecture::Single {
                input: BranchInput::Stacked,
            } => "Stacked".into(),
            Architecture::Fused { alpha, beta } => format!("FusionNet{alpha}{}", beta.symbol()),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub base: BaseConfig,
    pub arch: Architecture,
}

impl ModelSpec {
    pub fn single(base: BaseConfig, input: BranchInput) -> Self {
        ModelSpec {
            base,
            arch: Architecture::Single { input },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            Architecture::Single { .. } => self.base.validate(),
            Architecture::Fused { alpha, beta } => FusionSpec {
                alpha,
                beta,
                base: self.base.clone(),
            }
            .validate(),
        }
    }

    pub fn fusion_spec(&self) -> Option<FusionSpec> {
        match self.arch {
            Architecture::Fused { alpha, beta } => Some(FusionSpec {
                alpha,
                beta,
                base: self.base.clone(),
            }),
            Architecture::Single { .. } => None,
        }
    }
}

impl From<FusionSpec> for ModelSpec {
    fn from(spec: FusionSpec) -> Self {
        ModelSpec {
            arch: Architecture::Fused {
                alpha: spec.alpha,
                beta: spec.beta,
            },
            base: spec.base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    name: String,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    pool: bool,
}

#[derive(Debug, Clone)]
struct Head {
    fc1_weight: usize,
    fc1_bias: usize,
    fc2_weight: usize,
    fc2_bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    /// Empty for single-branch models, `[mask branch, image branch]` otherwise.
    branches: Vec<Vec<ConvBlock>>,
    trunk: Vec<ConvBlock>,
    head: Head,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Probabilities, `[B, 1]`.
    pub output: Var,
    /// Tape node of every parameter, indexed like [`Model::parameters`].
    pub bindings: Vec<Var>,
    /// Output shape of every block, fusion and head stage.
    pub trace: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Parameter>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
    layout: Layout,
    mode: Mode,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
}

impl Builder {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = libm::sqrtf(2.0 / fan_in as f32);
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, shape, data)
    }

    fn constant(&mut self, name: String, len: usize, value: f32) -> usize {
        self.push(name, &[len], vec![value; len])
    }

    fn push(&mut self, name: String, shape: &[usize], data: Vec<f32>) -> usize {
        let tensor = Tensor::new(shape.to_vec(), data).expect("builder shapes are positive");
        self.params.push(Parameter::new(name, tensor));
        self.params.len() - 1
    }

    fn block(&mut self, prefix: &str, layer: usize, cin: usize, base: &BaseConfig) -> ConvBlock {
        let cout = base.width(layer);
        let name = format!("{prefix}.block{layer}");
        let weight = self.he(format!("{name}.conv.weight"), &[cout, cin, 3, 3, 3], cin * 27);
        let bias = self.constant(format!("{name}.conv.bias"), cout, 0.0);
        let gamma = self.constant(format!("{name}.bn.gamma"), cout, 1.0);
        let beta = self.constant(format!("{name}.bn.beta"), cout, 0.0);
        self.bn_names.push(format!("{name}.bn"));
        self.bn.push(BatchNormState::new(cout));
        ConvBlock {
            name,
            weight,
            bias,
            gamma,
            beta,
            bn: self.bn.len() - 1,
            pool: base.pools_after(layer),
        }
    }

    fn head(&mut self, flat: usize, hidden: usize) -> Head {
        let fc1_weight = self.he("head.fc1.weight".into(), &[hidden, flat], flat);
        let fc1_bias = self.constant("head.fc1.bias".into(), hidden, 0.0);
        let fc2_weight = self.he("head.fc2.weight".into(), &[1, hidden], hidden);
        let fc2_bias = self.constant("head.fc2.bias".into(), 1, 0.0);
        Head {
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
        }
    }
}

impl Model {
    /// Single-branch base classifier.
    pub fn build_base(config: &BaseConfig, input: BranchInput, seed: u64) -> Result<Model> {
        Self::build(&ModelSpec::single(config.clone(), input), seed)
    }

    /// Dual-branch fused classifier `(alpha, beta)`.
    pub fn build_fused(spec: &FusionSpec, seed: u64) -> Result<Model> {
        Self::build(&ModelSpec::from(spec.clone()), seed)
    }

    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let base = &spec.base;
        let l = base.num_layers;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
        };
        let (branches, trunk, last_width) = match spec.arch {
            Architecture::Single { input } => {
                let mut trunk = Vec::with_capacity(l);
                let mut cin = input.channels();
                for layer in 1..=l {
                    trunk.push(b.block("trunk", layer, cin, base));
                    cin = base.width(layer);
                }
                (Vec::new(), trunk, base.width(l))
            }
            Architecture::Fused { alpha, beta } => {
                let mut branches = Vec::with_capacity(2);
                for prefix in ["branch1", "branch2"] {
                    let mut blocks = Vec::with_capacity(alpha);
                    let mut cin = 1;
                    for layer in 1..=alpha {
                        blocks.push(b.block(prefix, layer, cin, base));
                        cin = base.width(layer);
                    }
                    branches.push(blocks);
                }
                let widen = if beta == Fusion::Concat { 2 } else { 1 };
                let mut cin = base.width(alpha) * widen;
                let mut trunk = Vec::with_capacity(l - alpha);
                for layer in alpha + 1..=l {
                    trunk.push(b.block("trunk", layer, cin, base));
                    cin = base.width(layer);
                }
                let last = if alpha == l {
                    base.width(l) * widen
                } else {
                    base.width(l)
                };
                (branches, trunk, last)
            }
        };
        let final_side = base.side_after(l);
        let flat = last_width * final_side * final_side * final_side;
        let head = b.head(flat, base.fc_hidden);
        let mut names: Vec<&str> = b.params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate parameter name".into()));
        }
        Ok(Model {
            spec: spec.clone(),
            params: b.params,
            bn_names: b.bn_names,
            bn: b.bn,
            layout: Layout { branches, trunk, head },
            mode: Mode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn batchnorm_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    /// Replaces the running batch-norm statistics with the plain average of
    /// the per-batch statistics over `batches` (train-mode forward passes,
    /// no parameter updates). Leaves the model in eval mode.
    pub fn recalibrate_batchnorm<'a>(
        &mut self,
        batches: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
    ) -> Result<()> {
        let keep = BatchNormState::MOMENTUM;
        let mut sums: Vec<(Vec<f64>, Vec<f64>)> = self
            .bn
            .iter()
            .map(|s| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()]))
            .collect();
        let mut n = 0usize;
        let saved = self.bn.clone();
        self.mode = Mode::Train;
        for (mask, image) in batches {
            // from a zero state one update leaves (1 - momentum) * batch stats
            for s in &mut self.bn {
                s.mean.fill(0.0);
                s.var.fill(0.0);
            }
            let mut tape = Tape::inference();
            if let Err(e) = self.forward(&mut tape, mask, image) {
                self.bn = saved;
                self.mode = Mode::Eval;
                return Err(e);
            }
            for (s, (m, v)) in self.bn.iter().zip(&mut sums) {
                for (acc, &x) in m.iter_mut().zip(&s.mean) {
                    *acc += x as f64 / (1.0 - keep) as f64;
                }
                for (acc, &x) in v.iter_mut().zip(&s.var) {
                    *acc += x as f64 / (1.0 - keep) as f64;
                }
            }
            n += 1;
        }
        self.mode = Mode::Eval;
        if n == 0 {
            self.bn = saved;
            return Ok(());
        }
        for (s, (m, v)) in self.bn.iter_mut().zip(&sums) {
            for (dst, &acc) in s.mean.iter_mut().zip(m) {
                *dst = (acc / n as f64) as f32;
            }
            for (dst, &acc) in s.var.iter_mut().zip(v) {
                *dst = (acc / n as f64) as f32;
            }
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn sgd_step(&mut self, lr: f32) {
        for p in &mut self.params {
            p.sgd_step(lr);
        }
    }

    /// Adds the tape gradients of a finished backward pass into the
    /// parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bindings) {
            if let Some(g) = tape.grad(v) {
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Parameters and batch-norm running statistics, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, state) in self.bn_names.iter().zip(&self.bn) {
            let c = state.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], state.mean.clone()).expect("positive width"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], state.var.clone()).expect("positive width"),
            ));
        }
        out
    }

    /// Restores the values written by [`Model::named_tensors`]. Every entry
    /// must be present with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let expected = self.params.len() + 2 * self.bn.len();
        if entries.len() != expected {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                expected
            )));
        }
        for p in &mut self.params {
            let t = find(&p.name).ok_or_else(|| Error::Validation(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_named", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
        }
        for (name, state) in self.bn_names.iter().zip(&mut self.bn) {
            for (suffix, dst) in [("running_mean", &mut state.mean), ("running_var", &mut state.var)] {
                let key = format!("{name}.{suffix}");
                let t = find(&key).ok_or_else(|| Error::Validation(format!("missing tensor {key}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::shape("load_named", &[dst.len()], t.shape()));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    /// Block-by-block output shapes for a batch of `batch`, computed from
    /// the configuration alone.
    pub fn expected_trace(&self, batch: usize) -> Vec<(String, Vec<usize>)> {
        let base = &self.spec.base;
        let mut out = Vec::new();
        let shape5 = |c: usize, layer: usize| {
            let s = base.side_after(layer);
            vec![batch, c, s, s, s]
        };
        let mut last = 0;
        for blocks in &self.layout.branches {
            for (i, blk) in blocks.iter().enumerate() {
                out.push((blk.name.clone(), shape5(base.width(i + 1), i + 1)));
            }
        }
        if let Architecture::Fused { alpha, beta } = self.spec.arch {
            let widen = if beta == Fusion::Concat { 2 } else { 1 };
            out.push(("fusion".to_string(), shape5(base.width(alpha) * widen, alpha)));
            last = alpha;
        }
        for (i, blk) in self.layout.trunk.iter().enumerate() {
            let layer = last + i + 1;
            out.push((blk.name.clone(), shape5(base.width(layer), layer)));
        }
        out.push(("head.fc1".to_string(), vec![batch, base.fc_hidden]));
        out.push(("head.output".to_string(), vec![batch, 1]));
        out
    }

    /// Records the forward pass on `tape`. In train mode batch norm uses
    /// batch statistics (and updates its running state) and parameters are
    /// bound as differentiable leaves; in eval mode nothing is recorded.
    pub fn forward(&mut self, tape: &mut Tape, mask: &Tensor, image: &Tensor) -> Result<ForwardPass> {
        let train = self.mode == Mode::Train;
        let Model {
            spec,
            params,
            bn,
            layout,
            ..
        } = self;
        let stats = if train { BnAccess::Train(bn) } else { BnAccess::Eval(bn) };
        run(spec, layout, params, stats, tape, mask, image, train)
    }

    /// Evaluation-mode probabilities `[B, 1]` regardless of the current mode.
    pub fn predict(&self, mask: &Tensor, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let pass = run(
            &self.spec,
            &self.layout,
            &self.params,
            BnAccess::Eval(&self.bn),
            &mut tape,
            mask,
            image,
            false,
        )?;
        Ok(tape.value(pass.output).clone())
    }
}

enum BnAccess<'a> {
    Train(&'a mut [BatchNormState]),
    Eval(&'a [BatchNormState]),
}

fn check_inputs(base: &BaseConfig, mask: &Tensor, image: &Tensor) -> Result<()> {
    if mask.shape() != image.shape() {
        return Err(Error::shape("forward", mask.shape(), image.shape()));
    }
    let s = base.input_side;
    match *mask.shape() {
        [_, 1, d, h, w] if d == s && h == s && w == s => {}
        _ => {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: mask.shape().to_vec(),
                reason: "inputs must be [B, 1, side, side, side]",
            })
        }
    }
    if let Some(v) = mask
        .data()
        .iter()
        .find(|&&v| !(v.abs() <= MASK_TOLERANCE || (v - 1.0).abs() <= MASK_TOLERANCE))
    {
        return Err(Error::Validation(format!("mask voxel {v} is not binary")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    spec: &ModelSpec,
    layout: &Layout,
    params: &[Parameter],
    mut stats: BnAccess<'_>,
    tape: &mut Tape,
    mask: &Tensor,
    image: &Tensor,
    train: bool,
) -> Result<ForwardPass> {
    let base = &spec.base;
    check_inputs(base, mask, image)?;
    let bindings: Vec<Var> = params.iter().map(|p| tape.leaf(p.value.clone(), train)).collect();
    let mut trace = Vec::new();

    let mut block = |tape: &mut Tape, x: Var, blk: &ConvBlock, trace: &mut Vec<(String, Vec<usize>)>| -> Result<Var> {
        let y = tape.conv3d(x, bindings[blk.weight], bindings[blk.bias])?;
        let mode = match &mut stats {
            BnAccess::Train(s) => BatchNormMode::Train(&mut s[blk.bn]),
            BnAccess::Eval(s) => BatchNormMode::Eval(&s[blk.bn]),
        };
        let y = tape.batchnorm3d(y, bindings[blk.gamma], bindings[blk.beta], mode)?;
        let mut y = tape.relu(y);
        if blk.pool {
            y = tape.pool3d(y, base.pool)?;
        }
        trace.push((blk.name.clone(), tape.shape(y).to_vec()));
        Ok(y)
    };

    let mut x = match spec.arch {
        Architecture::Single { input } => match input {
            BranchInput::Mask => tape.leaf(mask.clone(), false),
            BranchInput::Image => tape.leaf(image.clone(), false),
            BranchInput::Stacked => {
                let m = tape.leaf(mask.clone(), false);
                let i = tape.leaf(image.clone(), false);
                tape.concat_channels(m, i)?
            }
        },
        Architecture::Fused { beta, .. } => {
            let mut feats = [None, None];
            for (k, (blocks, input)) in layout.branches.iter().zip([mask, image]).enumerate() {
                let mut h = tape.leaf(input.clone(), false);
                for blk in blocks {
                    h = block(tape, h, blk, &mut trace)?;
                }
                feats[k] = Some(h);
            }
            let (s, t) = (feats[0].expect("mask branch"), feats[1].expect("image branch"));
            let fused = match beta {
                Fusion::Add => tape.add(s, t)?,
                Fusion::Mul => tape.mul(s, t)?,
                Fusion::Concat => tape.concat_channels(s, t)?,
            };
            trace.push(("fusion".to_string(), tape.shape(fused).to_vec()));
            fused
        }
    };
    for blk in &layout.trunk {
        x = block(tape, x, blk, &mut trace)?;
    }
    let h = &layout.head;
    let flat = tape.flatten(x);
    let hidden = tape.linear(flat, bindings[h.fc1_weight], bindings[h.fc1_bias])?;
    let hidden = tape.relu(hidden);
    trace.push(("head.fc1".to_string(), tape.shape(hidden).to_vec()));
    let logit = tape.linear(hidden, bindings[h.fc2_weight], bindings[h.fc2_bias])?;
    let output = tape.sigmoid(logit);
    trace.push(("head.output".to_string(), tape.shape(output).to_vec()));
    Ok(ForwardPass {
        output,
        bindings,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis;

    fn tiny() -> BaseConfig {
        BaseConfig {
            num_layers: 3,
            channels: vec![2, 3, 4],
            input_side: 8,
            pool_after: vec![1, 2],
            fc_hidden: 5,
            pool: PoolKind::Max,
        }
    }

    fn rand_inputs(batch: usize, side: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * side * side * side;
        let shape = vec![batch, 1, side, side, side];
        let mask = (0..n)
            .map(|_| {
                if rand::Rng::random_bool(&mut rng, 0.4) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let image = (0..n).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        (
            Tensor::new(shape.clone(), mask).unwrap(),
            Tensor::new(shape, image).unwrap(),
        )
    }

    #[test]
    fn recalibration_ignores_prior_running_stats() {
        let spec = ModelSpec::from(FusionSpec::new(2, Fusion::Concat, tiny()).unwrap());
        let batches = [rand_inputs(3, 8, 1), rand_inputs(3, 8, 2)];
        let mut a = Model::build(&spec, 9).unwrap();
        let mut b = a.clone();
        // push b's running stats somewhere else first
        b.set_mode(Mode::Train);
        let mut tape = Tape::inference();
        let (m, i) = rand_inputs(2, 8, 3);
        b.forward(&mut tape, &m, &i).unwrap();
        assert_ne!(a.batchnorm_states(), b.batchnorm_states());

        a.recalibrate_batchnorm(batches.iter().map(|(m, i)| (m, i))).unwrap();
        b.recalibrate_batchnorm(batches.iter().map(|(m, i)| (m, i))).unwrap();
        for (x, y) in a.batchnorm_states().iter().zip(b.batchnorm_states()) {
            for (p, q) in x.mean.iter().chain(&x.var).zip(y.mean.iter().chain(&y.var)) {
                assert!((p - q).abs() <= 1e-5 * (1.0 + p.abs()), "{p} vs {q}");
            }
        }
        assert!(a.batchnorm_states().iter().all(|s| s.var.iter().all(|&v| v > 0.0)));
        assert_eq!(a.mode(), Mode::Eval);
    }

    #[test]
    fn space_sizes() {
        assert_eq!(enumerate_space(&BaseConfig::default()).len(), 18);
        let one = BaseConfig {
            num_layers: 1,
            channels: vec![4],
            pool_after: vec![1],
            ..BaseConfig::default()
        };
        assert_eq!(enumerate_space(&one).len(), 3);
        let space = enumerate_space(&BaseConfig::default());
        let mut keys: Vec<(usize, Fusion)> = space.iter().map(|s| (s.alpha, s.beta)).collect();
        let sorted = keys.clone();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 18);
        assert_eq!(keys, sorted);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.input_side = 6;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let spec = FusionSpec {
            alpha: 4,
            beta: Fusion::Add,
            base: tiny(),
        };
        assert!(matches!(Model::build_fused(&spec, 0), Err(Error::Config(_))));
        let spec = FusionSpec { alpha: 0, ..spec };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn base_forward_shape_and_range() {
        let mut m = Model::build_base(&tiny(), BranchInput::Image, 1).unwrap();
        let (mask, image) = rand_inputs(2, 8, 3);
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &mask, &image).unwrap();
        let p = tape.value(pass.output);
        assert_eq!(p.shape(), &[2, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(pass.trace, m.expected_trace(2));
    }

    #[test]
    fn default_desk_count_matches_analysis() {
        let base = BaseConfig::default();
        for input in [BranchInput::Mask, BranchInput::Stacked] {
            let m = Model::build_base(&base, input, 0).unwrap();
            assert_eq!(
                m.param_count() as u64,
                analysis::count_params_single(&base, input.channels())
            );
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_independent() {
        let mut m = Model::build_fused(&FusionSpec::new(2, Fusion::Concat, tiny()).unwrap(), 9).unwrap();
        m.set_mode(Mode::Eval);
        let (mask, image) = rand_inputs(3, 8, 4);
        let a = m.predict(&mask, &image).unwrap();
        let b = m.predict(&mask, &image).unwrap();
        assert_eq!(a, b);
        // reverse the batch
        let per = 8 * 8 * 8;
        let rev = |t: &Tensor| {
            let mut d = Vec::new();
            for i in (0..3).rev() {
                d.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };
        let c = m.predict(&rev(&mask), &rev(&image)).unwrap();
        let mut expected = a.data().to_vec();
        expected.reverse();
        assert_eq!(c.data(), &expected[..]);
    }

    #[test]
    fn add_and_mul_share_parameter_count() {
        for alpha in 1..=3 {
            let a = Model::build_fused(&FusionSpec::new(alpha, Fusion::Add, tiny()).unwrap(), 0).unwrap();
            let m = Model::build_fused(&FusionSpec::new(alpha, Fusion::Mul, tiny()).unwrap(), 0).unwrap();
            let c = Model::build_fused(&FusionSpec::new(alpha, Fusion::Concat, tiny()).unwrap(), 0).unwrap();
            assert_eq!(a.param_count(), m.param_count());
            assert!(c.param_count() > a.param_count());
        }
    }

    #[test]
    fn swapping_inputs_changes_output() {
        let mut m = Model::build_fused(&FusionSpec::new(2, Fusion::Add, tiny()).unwrap(), 5).unwrap();
        m.set_mode(Mode::Eval);
        let (mask, _) = rand_inputs(2, 8, 6);
        let (other, _) = rand_inputs(2, 8, 7);
        let a = m.predict(&mask, &other).unwrap();
        let b = m.predict(&other, &mask).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_mask_with_mul_is_finite() {
        let mut m = Model::build_fused(&FusionSpec::new(3, Fusion::Mul, tiny()).unwrap(), 2).unwrap();
        let (_, image) = rand_inputs(2, 8, 8);
        let mask = Tensor::zeros(image.shape());
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &mask, &image).unwrap();
        assert!(tape
            .value(pass.output)
            .data()
            .iter()
            .all(|&v| v.is_finite() && v > 0.0 && v < 1.0));
        m.set_mode(Mode::Eval);
        let p = m.predict(&mask, &image).unwrap();
        assert!(p.data().iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut m = Model::build_base(&tiny(), BranchInput::Mask, 0).unwrap();
        let (mask, image) = rand_inputs(1, 8, 1);
        let mut tape = Tape::new();
        let err = m.forward(&mut tape, &image, &image).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let small = Tensor::zeros(&[1, 1, 4, 4, 4]);
        assert!(matches!(m.forward(&mut tape, &mask, &small), Err(Error::Shape { .. })));
        let nearly = Tensor::new(mask.shape().to_vec(), mask.data().iter().map(|v| v + 5e-7).collect()).unwrap();
        assert!(m.forward(&mut tape, &nearly, &image).is_ok());
    }

    #[test]
    fn named_tensors_round_trip() {
        let spec = FusionSpec::new(2, Fusion::Mul, tiny()).unwrap();
        let mut a = Model::build_fused(&spec, 1).unwrap();
        let (mask, image) = rand_inputs(2, 8, 2);
        let mut tape = Tape::new();
        a.forward(&mut tape, &mask, &image).unwrap();
        let mut b = Model::build_fused(&spec, 2).unwrap();
        b.load_named(&a.named_tensors()).unwrap();
        a.set_mode(Mode::Eval);
        assert_eq!(a.predict(&mask, &image).unwrap(), b.predict(&mask, &image).unwrap());
    }
}

//! Weighted cross-entropy SGD training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Score;
use crate::model::{Mode, Model};
use crate::preprocess::{rotate_pair, rotation_grid, Volume, VolumeKind, AUGMENT_ANGLES};
use crate::rng;
use crate::tensor::{Tape, Tensor, PROB_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-iteration multiplicative learning-rate decay.
    pub decay: f64,
    pub iterations: usize,
    /// Weight of the positive-class term.
    pub lambda: f32,
    pub seed: u64,
    pub augment: bool,
    /// Re-estimate the batch-norm running statistics over the training set
    /// once training ends, replacing the momentum averages of the last few
    /// batches.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr0: 0.01,
            decay: 0.9997,
            iterations: 1500,
            lambda: 0.7,
            seed: 0,
            augment: true,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule (10 000 iterations).
    pub fn full_scale() -> Self {
        TrainConfig {
            iterations: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// `lr0 * decay^iter`.
pub fn lr_at(iter: usize, config: &TrainConfig) -> f64 {
    config.lr0 * libm::pow(config.decay, iter as f64)
}

/// One labelled case: image, mask and `z` (1 = abnormal).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
    pub z: u8,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Volume, mask: Volume, z: u8) -> Result<Self> {
        let id = id.into();
        if image.dims() != mask.dims() {
            return Err(Error::Validation(format!(
                "case {id}: image dims {:?} differ from mask dims {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        if mask.kind() != VolumeKind::Mask || image.kind() != VolumeKind::Image {
            return Err(Error::Validation(format!("case {id}: volume kinds are swapped")));
        }
        if z > 1 {
            return Err(Error::Validation(format!("case {id}: label {z} is not binary")));
        }
        Ok(Sample { id, image, mask, z })
    }
}

/// Loss value without a tape, for reporting.
pub fn weighted_bce(p: &[f32], z: &[u8], lambda: f32) -> f64 {
    let l = lambda as f64;
    let total: f64 = p
        .iter()
        .zip(z)
        .map(|(&p, &z)| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64;
            let z = z as f64;
            -(l * z * libm::log(pc) + (1.0 - l) * (1.0 - z) * libm::log(1.0 - pc))
        })
        .sum();
    total / p.len() as f64
}

fn volume_tensor(vols: &[&Volume]) -> Result<Tensor> {
    let [d, h, w] = vols[0].dims();
    let mut data = Vec::with_capacity(vols.len() * d * h * w);
    for v in vols {
        if v.dims() != [d, h, w] {
            return Err(Error::shape("batch", &[d, h, w], &v.dims()));
        }
        data.extend_from_slice(v.data());
    }
    Tensor::new(alloc::vec![vols.len(), 1, d, h, w], data)
}

/// `[B, 1, D, H, W]` mask and image tensors for a list of cases.
pub fn batch_tensors(pairs: &[(&Volume, &Volume)]) -> Result<(Tensor, Tensor)> {
    let masks: Vec<&Volume> = pairs.iter().map(|p| p.1).collect();
    let images: Vec<&Volume> = pairs.iter().map(|p| p.0).collect();
    Ok((volume_tensor(&masks)?, volume_tensor(&images)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<StepRecord>,
    /// The data held a single class; the loss only ever saw one term.
    pub single_class: bool,
}

/// Trains `model` in place. Each iteration draws `batch_size` cases
/// uniformly with replacement, optionally rotates each pair by a random
/// member of the 27-rotation grid, and takes one SGD step at `lr_at(iter)`.
/// Fully determined by the initial weights, the data and `config`.
pub fn train_model(model: &mut Model, data: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let positives = data.iter().filter(|s| s.z == 1).count();
    let single_class = positives == 0 || positives == data.len();
    let grid = rotation_grid(&AUGMENT_ANGLES);
    let mut rng = rng::stream(config.seed, &[0x74_7261_696e]);
    model.set_mode(Mode::Train);
    model.zero_grad();
    let mut trace = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let lr = lr_at(iter, config);
        let mut owned = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let s = &data[rng.random_range(0..data.len())];
            labels.push(s.z as f32);
            if config.augment {
                let angles = grid[rng.random_range(0..grid.len())];
                owned.push(rotate_pair(&s.image, &s.mask, angles)?);
            } else {
                owned.push((s.image.clone(), s.mask.clone()));
            }
        }
        let pairs: Vec<(&Volume, &Volume)> = owned.iter().map(|(i, m)| (i, m)).collect();
        let (mask, image) = batch_tensors(&pairs)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &mask, &image)?;
        let loss = tape.weighted_bce(pass.output, &labels, config.lambda)?;
        tape.backward(loss)?;
        model.accumulate_grads(&tape, &pass.bindings);
        model.sgd_step(lr as f32);
        model.zero_grad();
        trace.push(StepRecord {
            iter,
            lr,
            loss: tape.value(loss).data()[0],
        });
    }
    if config.recalibrate_bn {
        recalibrate(model, data, config.batch_size)?;
    }
    Ok(TrainReport { trace, single_class })
}

/// Batch-norm statistics averaged over the training set in order, in
/// `batch_size` chunks; a short tail is dropped unless it is the only chunk.
fn recalibrate(model: &mut Model, data: &[Sample], batch_size: usize) -> Result<()> {
    let mut chunks: Vec<&[Sample]> = data.chunks(batch_size).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < batch_size) {
        chunks.pop();
    }
    let mut tensors = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let pairs: Vec<(&Volume, &Volume)> = chunk.iter().map(|s| (&s.image, &s.mask)).collect();
        tensors.push(batch_tensors(&pairs)?);
    }
    model.recalibrate_batchnorm(tensors.iter().map(|(m, i)| (m, i)))
}

/// Evaluation-mode probabilities for each case, in order.
pub fn score_samples(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Vec<Score>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let pairs: Vec<(&Volume, &Volume)> = chunk.iter().map(|s| (&s.image, &s.mask)).collect();
        let (mask, image) = batch_tensors(&pairs)?;
        let p = model.predict(&mask, &image)?;
        for (s, &pv) in chunk.iter().zip(p.data()) {
            out.push(Score::new(s.id.clone(), pv as f64, s.z));
        }
    }
    Ok(out)
}

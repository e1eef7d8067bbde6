//! Dual-branch volumetric fusion classifiers.
//!
//! A mask branch and an intensity branch are each run through the first
//! `alpha` convolution blocks of a shared base architecture, combined with
//! an elementwise sum, an elementwise product or a channel concatenation,
//! and fed through the remaining blocks and a two-layer classifier head.
//! The crate carries everything that is pure computation: a small reverse
//! mode autodiff engine, the model family and its search space, static
//! cost accounting, volume preprocessing, the training loop and
//! cross-validation harness, evaluation metrics and a synthetic data
//! generator. File formats, threads and the command line live in the
//! `fusegrid` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod analysis;
pub mod cv;
pub mod error;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{BaseConfig, Fusion, FusionSpec, Mode, Model, PoolKind};
pub use preprocess::{Roi, Volume, VolumeKind};
pub use tensor::{Tape, Tensor, Var};
pub use train::{Sample, TrainConfig};

//! The desk-scale complementarity experiment: synthetic cases with
//! independent shape and texture anomalies, cross-validated single-branch
//! baselines, their score-level fusions, and the full (α, β) grid.

use serde::{Deserialize, Serialize};

use fusegrid_core::cv::{make_folds, ArmResult, Comparison, CvConfig, LeaderRow};
use fusegrid_core::model::{enumerate_space, BaseConfig, BranchInput, ModelSpec, PoolKind};
use fusegrid_core::preprocess::{prepare, PrepConfig};
use fusegrid_core::synth::{generate, GenConfig};
use fusegrid_core::train::{Sample, TrainConfig};

use crate::runner::run_grid;

/// Model input side of the desk setup. ROIs from 32³ volumes are resampled
/// to this size.
pub const DESK_INPUT: usize = 16;

pub fn desk_base() -> BaseConfig {
    BaseConfig {
        num_layers: 6,
        channels: vec![2, 4, 8, 16, 16, 16],
        input_side: DESK_INPUT,
        pool_after: vec![1, 2, 3],
        fc_hidden: 32,
        pool: PoolKind::Max,
    }
}

pub fn desk_prep() -> PrepConfig {
    PrepConfig {
        out_side: DESK_INPUT,
        pad: 2,
        ..PrepConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskConfig {
    pub gen: GenConfig,
    pub prep: PrepConfig,
    pub base: BaseConfig,
    pub cv: CvConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            gen: GenConfig::default(),
            prep: desk_prep(),
            base: desk_base(),
            cv: CvConfig {
                train: TrainConfig {
                    augment: true,
                    ..TrainConfig::default()
                },
                ..CvConfig::default()
            },
        }
    }
}

impl DeskConfig {
    /// Same setup with every stochastic stage keyed by `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut c = DeskConfig::default();
        c.gen.seed = seed;
        c.cv.train.seed = seed;
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskOutcome {
    pub seed: u64,
    pub comparison: Comparison,
    pub leaderboard: Vec<LeaderRow>,
    pub mask: ArmResult,
    pub image: ArmResult,
    pub grid: Vec<ArmResult>,
}

pub fn prepare_samples(samples: &[Sample], prep: &PrepConfig) -> fusegrid_core::Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let p = prepare(&s.image, &s.mask, prep)?;
            Sample::new(s.id.clone(), p.image, p.mask, s.z)
        })
        .collect()
}

/// Cross-validates the two baselines and the grid on already prepared
/// samples. The fold split is keyed by the training seed.
pub fn compare(
    samples: &[Sample],
    base: &BaseConfig,
    cv: &CvConfig,
    jobs: usize,
) -> fusegrid_core::Result<(ArmResult, ArmResult, Vec<ArmResult>, Comparison)> {
    let split = make_folds(samples, cv.k, cv.train.seed)?;
    let mut specs = vec![
        ModelSpec::single(base.clone(), BranchInput::Mask),
        ModelSpec::single(base.clone(), BranchInput::Image),
    ];
    specs.extend(enumerate_space(base).into_iter().map(ModelSpec::from));
    let mut results = run_grid(&specs, samples, &split, cv, jobs)?;
    let grid = results.split_off(2);
    let image = results.pop().expect("two baselines");
    let mask = results.pop().expect("two baselines");
    let comparison = Comparison::build(&mask, &image, &grid, cv.threshold)?;
    Ok((mask, image, grid, comparison))
}

pub fn run_desk(config: &DeskConfig, jobs: usize) -> fusegrid_core::Result<DeskOutcome> {
    let raw = generate(&config.gen)?;
    let samples = prepare_samples(&raw, &config.prep)?;
    let (mask, image, grid, comparison) = compare(&samples, &config.base, &config.cv, jobs)?;
    Ok(DeskOutcome {
        seed: config.gen.seed,
        leaderboard: fusegrid_core::cv::leaderboard(&grid),
        comparison,
        mask,
        image,
        grid,
    })
}

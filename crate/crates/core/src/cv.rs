//! Stratified k-fold cross-validation and the (α, β) leaderboard.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, BinaryMetrics, EvalReport, Score, DEFAULT_THRESHOLD};
use crate::model::{Architecture, BranchInput, Fusion, Model, ModelSpec};
use crate::rng;
use crate::train::{score_samples, train_model, Sample, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Indices outside `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

pub fn make_folds(samples: &[Sample], k: usize, seed: u64) -> Result<FoldSplit> {
    let labels: Vec<u8> = samples.iter().map(|s| s.z).collect();
    make_folds_from_labels(&labels, k, seed)
}

/// Each class is shuffled and dealt round-robin; the abnormal deal starts
/// where the normal one stopped, so remainders spread over different folds.
pub fn make_folds_from_labels(labels: &[u8], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &z) in labels.iter().enumerate() {
        match z {
            0 | 1 => by_class[z as usize].push(i),
            _ => return Err(Error::Validation(format!("case {i} has label {z}"))),
        }
    }
    let smallest = by_class[0].len().min(by_class[1].len());
    if k > smallest {
        return Err(Error::Config(format!(
            "{k} folds but the smaller class has only {smallest} cases"
        )));
    }
    let mut rng = rng::stream(seed, &[0x666f6c64]);
    let mut folds = alloc::vec![Vec::new(); k];
    let mut next = 0;
    for class in &mut by_class {
        class.shuffle(&mut rng);
        for &i in class.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 4,
            train: TrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Stable stream key for an architecture, independent of its position in
/// any list.
pub fn arch_key(arch: &Architecture) -> u64 {
    match *arch {
        Architecture::Single { input } => match input {
            BranchInput::Mask => 1,
            BranchInput::Image => 2,
            BranchInput::Stacked => 3,
        },
        Architecture::Fused { alpha, beta } => 0x100 + 4 * alpha as u64 + beta_index(beta) as u64,
    }
}

fn beta_index(beta: Fusion) -> usize {
    Fusion::ALL.iter().position(|&b| b == beta).unwrap_or(0)
}

/// Held-out scores of one (architecture, fold) job.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: usize,
    pub scores: Vec<Score>,
    pub final_loss: f32,
}

/// Trains `spec` on every fold but `fold` and scores the held-out cases.
/// Weight init and batch order are keyed by (seed, architecture, fold) only.
pub fn run_job(
    spec: &ModelSpec,
    samples: &[Sample],
    split: &FoldSplit,
    fold: usize,
    config: &CvConfig,
) -> Result<FoldOutcome> {
    if fold >= split.k() {
        return Err(Error::Config(format!(
            "fold {fold} out of range for {} folds",
            split.k()
        )));
    }
    let key = arch_key(&spec.arch);
    let train_set: Vec<Sample> = split
        .train_indices(fold)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect();
    let test_set: Vec<Sample> = split.folds[fold].iter().map(|&i| samples[i].clone()).collect();
    let mut model = Model::build(spec, rng::derive(config.train.seed, &[0x696e6974, key, fold as u64]))?;
    let tc = TrainConfig {
        seed: rng::derive(config.train.seed, &[0x6f72646572, key, fold as u64]),
        ..config.train.clone()
    };
    let report = train_model(&mut model, &train_set, &tc)?;
    let scores = score_samples(&model, &test_set, config.train.batch_size.max(8))?;
    Ok(FoldOutcome {
        fold,
        scores,
        final_loss: report.trace.last().map_or(f32::NAN, |s| s.loss),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub spec: ModelSpec,
    pub fold_reports: Vec<EvalReport>,
    /// Metrics over the concatenated held-out scores of every fold.
    pub pooled: EvalReport,
}

/// Collects per-fold outcomes (any order) into fold and pooled reports.
pub fn assemble(spec: &ModelSpec, mut outcomes: Vec<FoldOutcome>, threshold: f64) -> Result<ArmResult> {
    outcomes.sort_by_key(|o| o.fold);
    let fold_reports = outcomes
        .iter()
        .map(|o| metrics::evaluate(&o.scores, threshold))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<Score> = outcomes.into_iter().flat_map(|o| o.scores).collect();
    Ok(ArmResult {
        name: spec.arch.label(),
        spec: spec.clone(),
        fold_reports,
        pooled: metrics::evaluate(&pooled, threshold)?,
    })
}

/// Every (architecture, fold) job in order, run one after another.
pub fn run_cv(specs: &[ModelSpec], samples: &[Sample], config: &CvConfig, split_seed: u64) -> Result<Vec<ArmResult>> {
    let split = make_folds(samples, config.k, split_seed)?;
    specs
        .iter()
        .map(|spec| {
            let outcomes = (0..split.k())
                .map(|f| run_job(spec, samples, &split, f, config))
                .collect::<Result<Vec<_>>>()?;
            assemble(spec, outcomes, config.threshold)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderRow {
    pub rank: usize,
    pub name: String,
    pub alpha: Option<usize>,
    pub beta: Option<Fusion>,
    pub sen: f64,
    pub spec: f64,
    pub f1: f64,
    pub auc: f64,
}

fn order_key(arch: &Architecture) -> (usize, usize) {
    match *arch {
        Architecture::Fused { alpha, beta } => (alpha, beta_index(beta)),
        Architecture::Single { input } => (usize::MAX, input.channels()),
    }
}

/// Sorted by pooled F1 descending, then AUC descending, then (α, β) order.
pub fn leaderboard(results: &[ArmResult]) -> Vec<LeaderRow> {
    let mut order: Vec<&ArmResult> = results.iter().collect();
    order.sort_by(|a, b| {
        b.pooled
            .f1
            .partial_cmp(&a.pooled.f1)
            .unwrap_or(Ordering::Equal)
            .then(b.pooled.auc.partial_cmp(&a.pooled.auc).unwrap_or(Ordering::Equal))
            .then(order_key(&a.spec.arch).cmp(&order_key(&b.spec.arch)))
    });
    order
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let (alpha, beta) = match r.spec.arch {
                Architecture::Fused { alpha, beta } => (Some(alpha), Some(beta)),
                Architecture::Single { .. } => (None, None),
            };
            LeaderRow {
                rank: i + 1,
                name: r.name.clone(),
                alpha,
                beta,
                sen: r.pooled.sen,
                spec: r.pooled.spec,
                f1: r.pooled.f1,
                auc: r.pooled.auc,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub sen: f64,
    pub spec: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

impl Row {
    fn of(r: &EvalReport) -> Row {
        Row {
            sen: r.sen,
            spec: r.spec,
            f1: r.f1,
            auc: Some(r.auc),
        }
    }
}

/// The comparison table: single branches, their two score-level fusions and
/// the best fused network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mask: Row,
    pub image: Row,
    pub naive: Row,
    pub best_name: String,
    pub best: Row,
    pub gt: Row,
}

impl Comparison {
    /// `mask` and `image` are single-branch results; `grid` the fused arms.
    pub fn build(mask: &ArmResult, image: &ArmResult, grid: &[ArmResult], threshold: f64) -> Result<Comparison> {
        let top = leaderboard(grid)
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("empty architecture grid".into()))?;
        let best = grid
            .iter()
            .find(|r| r.name == top.name)
            .expect("leader comes from grid");
        let naive = metrics::evaluate(
            &metrics::naive_fusion(&mask.pooled.scores, &image.pooled.scores)?,
            threshold,
        )?;
        let BinaryMetrics { sen, spec, f1 } =
            metrics::gt_upper_bound(&mask.pooled.scores, &image.pooled.scores, threshold)?;
        Ok(Comparison {
            mask: Row::of(&mask.pooled),
            image: Row::of(&image.pooled),
            naive: Row::of(&naive),
            best_name: best.name.clone(),
            best: Row::of(&best.pooled),
            gt: Row {
                sen,
                spec,
                f1,
                auc: None,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn stratified_counts() {
        let labels: Vec<u8> = (0..336).map(|i| u8::from(i >= 200)).collect();
        let split = make_folds_from_labels(&labels, 4, 7).unwrap();
        for f in &split.folds {
            let pos = f.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((f.len() - pos, pos), (50, 34));
        }
        let mut all: Vec<usize> = split.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..336).collect::<Vec<_>>());
        assert_eq!(split, make_folds_from_labels(&labels, 4, 7).unwrap());
        assert_ne!(split, make_folds_from_labels(&labels, 4, 8).unwrap());
    }

    #[test]
    fn too_many_folds() {
        let labels = vec![0, 0, 0, 1, 1];
        assert!(make_folds_from_labels(&labels, 3, 0).is_err());
        assert!(make_folds_from_labels(&labels, 2, 0).is_ok());
    }

    #[test]
    fn arch_keys_are_distinct() {
        let base = crate::model::BaseConfig::default();
        let mut keys: Vec<u64> = crate::model::enumerate_space(&base)
            .into_iter()
            .map(|s| arch_key(&ModelSpec::from(s).arch))
            .collect();
        keys.extend([1, 2, 3]);
        let n = keys.len();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), n);
    }
}

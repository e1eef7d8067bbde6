//! Binary classification metrics and the two score-level fusion baselines.
//!
//! A case is predicted positive when `p >= threshold`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub id: String,
    pub p: f64,
    pub z: u8,
}

impl Score {
    pub fn new(id: impl Into<String>, p: f64, z: u8) -> Self {
        Score { id: id.into(), p, z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn metrics(&self) -> BinaryMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let sen = ratio(self.tp, self.tp + self.fn_);
        let spec = ratio(self.tn, self.tn + self.fp);
        // no predicted positives: F1 is 0 by convention
        let prec = ratio(self.tp, self.tp + self.fp);
        let f1 = if prec + sen == 0.0 {
            0.0
        } else {
            2.0 * prec * sen / (prec + sen)
        };
        BinaryMetrics { sen, spec, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub sen: f64,
    pub spec: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<Score>,
    pub threshold: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub sen: f64,
    pub spec: f64,
    pub f1: f64,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

fn check_labels(scores: &[Score]) -> Result<(usize, usize)> {
    let mut pos = 0;
    let mut neg = 0;
    for s in scores {
        match s.z {
            0 => neg += 1,
            1 => pos += 1,
            z => return Err(Error::Validation(format!("case {} has label {z}", s.id))),
        }
        if !s.p.is_finite() {
            return Err(Error::Validation(format!("case {} has score {}", s.id, s.p)));
        }
    }
    Ok((pos, neg))
}

fn need_both((pos, neg): (usize, usize)) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::MissingClass {
            positives: pos,
            negatives: neg,
        });
    }
    Ok(())
}

pub fn confusion(scores: &[Score], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for s in scores {
        match (s.p >= threshold, s.z == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn confusion_metrics(scores: &[Score], threshold: f64) -> Result<BinaryMetrics> {
    need_both(check_labels(scores)?)?;
    Ok(confusion(scores, threshold).metrics())
}

/// ROC curve over every distinct score and its trapezoidal area. Cases
/// with equal scores enter the curve together, so ties contribute a
/// diagonal segment.
pub fn roc_auc(scores: &[Score]) -> Result<(f64, Vec<RocPoint>)> {
    let (pos, neg) = check_labels(scores)?;
    need_both((pos, neg))?;
    let mut order: Vec<&Score> = scores.iter().collect();
    order.sort_by(|a, b| b.p.partial_cmp(&a.p).unwrap_or(Ordering::Equal));
    let mut roc = Vec::with_capacity(order.len() + 1);
    roc.push(RocPoint { fpr: 0.0, tpr: 0.0 });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let p = order[i].p;
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && order[i].p == p {
            if order[i].z == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count space, normalized once at the end
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 * 0.5;
        roc.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok((auc / (pos as f64 * neg as f64), roc))
}

pub fn evaluate(scores: &[Score], threshold: f64) -> Result<EvalReport> {
    let BinaryMetrics { sen, spec, f1 } = confusion_metrics(scores, threshold)?;
    let (auc, roc) = roc_auc(scores)?;
    Ok(EvalReport {
        scores: scores.to_vec(),
        threshold,
        confusion: confusion(scores, threshold),
        sen,
        spec,
        f1,
        auc,
        roc,
    })
}

fn check_aligned(a: &[Score], b: &[Score]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "score lists have {} and {} cases",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.id != y.id || x.z != y.z {
            return Err(Error::Validation(format!("case {} does not align with {}", x.id, y.id)));
        }
    }
    Ok(())
}

/// Per-case mean of the two probabilities.
pub fn naive_fusion(mask: &[Score], image: &[Score]) -> Result<Vec<Score>> {
    check_aligned(mask, image)?;
    Ok(mask
        .iter()
        .zip(image)
        .map(|(m, i)| Score {
            id: m.id.clone(),
            p: 0.5 * (m.p + i.p),
            z: m.z,
        })
        .collect())
}

/// Counts a case as correct when either model classifies it correctly.
pub fn gt_upper_bound(mask: &[Score], image: &[Score], threshold: f64) -> Result<BinaryMetrics> {
    check_aligned(mask, image)?;
    need_both(check_labels(mask)?)?;
    let mut c = Confusion::default();
    for (m, i) in mask.iter().zip(image) {
        let truth = m.z == 1;
        let correct = (m.p >= threshold) == truth || (i.p >= threshold) == truth;
        match (truth, correct) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.tn += 1,
            (false, false) => c.fp += 1,
        }
    }
    Ok(c.metrics())
}

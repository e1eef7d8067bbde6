//! Parallel execution of independent (architecture, fold) jobs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fusegrid_core::cv::{self, ArmResult, CvConfig, FoldOutcome, FoldSplit};
use fusegrid_core::model::ModelSpec;
use fusegrid_core::train::Sample;

/// Runs every (spec, fold) job on `jobs` worker threads. Each job seeds
/// itself from its architecture and fold, so results do not depend on the
/// worker count or on completion order.
pub fn run_grid(
    specs: &[ModelSpec],
    samples: &[Sample],
    split: &FoldSplit,
    config: &CvConfig,
    jobs: usize,
) -> fusegrid_core::Result<Vec<ArmResult>> {
    let k = split.k();
    let total = specs.len() * k;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<fusegrid_core::Result<FoldOutcome>>>> = Mutex::new((0..total).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= total {
            break;
        }
        let r = cv::run_job(&specs[i / k], samples, split, i % k, config);
        slots.lock().unwrap()[i] = Some(r);
    };
    let jobs = jobs.clamp(1, total.max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let mut outcomes = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every job ran"));
    specs
        .iter()
        .map(|spec| {
            let folds = (&mut outcomes).take(k).collect::<fusegrid_core::Result<Vec<_>>>()?;
            cv::assemble(spec, folds, config.threshold)
        })
        .collect()
}

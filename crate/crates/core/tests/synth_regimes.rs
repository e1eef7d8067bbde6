//! The generator's two anomaly channels land where they should: shape in
//! the mask, texture only in the image.

use fusegrid_core::metrics::roc_auc;
use fusegrid_core::model::{BaseConfig, BranchInput, Model, PoolKind};
use fusegrid_core::preprocess::{prepare, PrepConfig, Volume};
use fusegrid_core::synth::{generate_cases, GenConfig, SynthCase, OCCUPANCY};
use fusegrid_core::train::{score_samples, train_model, Sample, TrainConfig};

fn regime(shape: f64, texture: f64, n: usize, seed: u64) -> Vec<SynthCase> {
    generate_cases(&GenConfig {
        side: 32,
        n_normal: n,
        n_abnormal: n,
        shape_signal: shape,
        texture_signal: texture,
        seg_noise: 0.0,
        seed,
    })
    .unwrap()
}

fn organ_mean(image: &Volume, mask: &Volume) -> f64 {
    let (sum, n) = image
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m == 1.0)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    sum / n as f64
}

/// Welch's t statistic.
fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v, n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    (ma - mb) / (va / na + vb / nb).sqrt()
}

fn means(cases: &[SynthCase], z: u8) -> Vec<f64> {
    cases
        .iter()
        .filter(|c| c.sample.z == z)
        .map(|c| organ_mean(&c.sample.image, &c.sample.mask))
        .collect()
}

#[test]
fn shape_channel_changes_masks_not_texture() {
    let cases = regime(1.0, 0.0, 50, 11);
    for c in &cases {
        assert_eq!(c.bump_voxels > 0, c.sample.z == 1, "{}", c.sample.id);
        assert!(!c.texture);
    }
    let t = welch_t(&means(&cases, 1), &means(&cases, 0));
    // two-sided 1% critical value for ~98 degrees of freedom
    assert!(t.abs() < 2.63, "organ intensity differs: t = {t:.2}");
}

#[test]
fn texture_channel_leaves_masks_alone() {
    let cases = regime(0.0, 1.0, 50, 12);
    assert!(cases.iter().all(|c| c.bump_voxels == 0 && !c.shape));
    let t = welch_t(&means(&cases, 1), &means(&cases, 0));
    assert!(t < -5.0, "lesions should darken the organ: t = {t:.2}");
}

#[test]
fn organ_occupancy_in_range() {
    for c in regime(0.5, 0.5, 20, 13) {
        let frac = c.sample.mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / 32f64.powi(3);
        assert!((OCCUPANCY.0..=OCCUPANCY.1).contains(&frac), "{}: {frac}", c.sample.id);
    }
}

#[test]
fn at_least_one_channel_per_abnormal_case() {
    let cases = regime(0.5, 0.5, 0, 14);
    let cases: Vec<_> = cases.into_iter().chain(regime(0.5, 0.5, 60, 15)).collect();
    for c in cases.iter().filter(|c| c.sample.z == 1) {
        assert!(c.shape || c.texture);
    }
    let both = cases.iter().filter(|c| c.shape && c.texture).count();
    assert!(both > 0 && both < 60);
}

fn prepared(cases: &[SynthCase]) -> Vec<Sample> {
    let prep = PrepConfig {
        out_side: 16,
        pad: 2,
        ..PrepConfig::default()
    };
    cases
        .iter()
        .map(|c| {
            let p = prepare(&c.sample.image, &c.sample.mask, &prep).unwrap();
            Sample::new(c.sample.id.clone(), p.image, p.mask, c.sample.z).unwrap()
        })
        .collect()
}

/// Held-out AUC of a single-branch model, trained on even-indexed cases.
fn holdout_auc(cases: &[SynthCase], input: BranchInput) -> f64 {
    let samples = prepared(cases);
    let (train, test): (Vec<_>, Vec<_>) = samples.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let train: Vec<Sample> = train.into_iter().map(|(_, s)| s).collect();
    let test: Vec<Sample> = test.into_iter().map(|(_, s)| s).collect();
    let base = BaseConfig {
        num_layers: 6,
        channels: vec![2, 4, 8, 16, 16, 16],
        input_side: 16,
        pool_after: vec![1, 2, 3],
        fc_hidden: 32,
        pool: PoolKind::Max,
    };
    let mut model = Model::build_base(&base, input, 1).unwrap();
    let cfg = TrainConfig {
        iterations: 1500,
        seed: 2,
        ..TrainConfig::default()
    };
    train_model(&mut model, &train, &cfg).unwrap();
    roc_auc(&score_samples(&model, &test, 16).unwrap()).unwrap().0
}

#[test]
fn each_branch_sees_its_own_channel() {
    let shape = regime(1.0, 0.0, 60, 21);
    let texture = regime(0.0, 1.0, 60, 22);
    let mask_on_shape = holdout_auc(&shape, BranchInput::Mask);
    let mask_on_texture = holdout_auc(&texture, BranchInput::Mask);
    let image_on_texture = holdout_auc(&texture, BranchInput::Image);
    println!("mask|shape {mask_on_shape:.3}  mask|texture {mask_on_texture:.3}  image|texture {image_on_texture:.3}");
    assert!(mask_on_shape > 0.8);
    assert!(image_on_texture > 0.8);
    // the mask carries no texture information
    assert!(mask_on_texture < 0.7);
}

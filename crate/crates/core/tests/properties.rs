use fusegrid_core::analysis::{count_flops, count_params};
use fusegrid_core::cv::make_folds_from_labels;
use fusegrid_core::metrics::{confusion, confusion_metrics, gt_upper_bound, roc_auc, Score};
use fusegrid_core::model::{enumerate_space, BaseConfig, BranchInput, Fusion, FusionSpec, Model, ModelSpec, PoolKind};
use fusegrid_core::preprocess::{bounding_box, crop_and_resample, normalize_hu, rotate_pair, Roi, Volume, VolumeKind};
use fusegrid_core::tensor::{Tape, Tensor};
use fusegrid_core::train::{weighted_bce, TrainConfig};
use proptest::prelude::*;

fn scores_from(ps: &[f64], zs: &[bool]) -> Vec<Score> {
    ps.iter()
        .zip(zs)
        .enumerate()
        .map(|(i, (&p, &z))| Score::new(format!("c{i}"), p, u8::from(z)))
        .collect()
}

fn both_classes(zs: &[bool]) -> bool {
    zs.iter().any(|&z| z) && zs.iter().any(|&z| !z)
}

/// Brute-force P(p_pos > p_neg) + 0.5 P(p_pos == p_neg).
fn pairwise_auc(s: &[Score]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for a in s.iter().filter(|s| s.z == 1) {
        for b in s.iter().filter(|s| s.z == 0) {
            den += 1.0;
            if a.p > b.p {
                num += 1.0;
            } else if a.p == b.p {
                num += 0.5;
            }
        }
    }
    num / den
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40)
        .prop_flat_map(|n| {
            (
                // coarse grid so that ties occur
                prop::collection::vec((0u32..20).prop_map(|v| v as f64 / 20.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("need both classes", |(_, z)| both_classes(z))
}

proptest! {
    #[test]
    fn auc_matches_pairwise_ranking((ps, zs) in labelled_scores()) {
        let s = scores_from(&ps, &zs);
        let (auc, roc) = roc_auc(&s).unwrap();
        prop_assert!((auc - pairwise_auc(&s)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform((ps, zs) in labelled_scores()) {
        let s = scores_from(&ps, &zs);
        let t: Vec<f64> = ps.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
        let st = scores_from(&t, &zs);
        prop_assert!((roc_auc(&s).unwrap().0 - roc_auc(&st).unwrap().0).abs() < 1e-12);
    }

    #[test]
    fn reversing_labels_complements_auc((ps, zs) in labelled_scores()) {
        let flipped: Vec<bool> = zs.iter().map(|z| !z).collect();
        let a = roc_auc(&scores_from(&ps, &zs)).unwrap().0;
        let b = roc_auc(&scores_from(&ps, &flipped)).unwrap().0;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_ignores_order((ps, zs) in labelled_scores(), rot in 0usize..40) {
        let s = scores_from(&ps, &zs);
        let mut r = s.clone();
        r.rotate_left(rot % s.len());
        r.reverse();
        prop_assert_eq!(confusion(&s, 0.5), confusion(&r, 0.5));
        let c = confusion(&s, 0.5);
        prop_assert_eq!(c.tp + c.fn_, zs.iter().filter(|&&z| z).count());
        prop_assert_eq!(c.tn + c.fp, zs.iter().filter(|&&z| !z).count());
    }

    #[test]
    fn upper_bound_dominates((ps, zs) in labelled_scores(), qs in prop::collection::vec(0.0f64..1.0, 40)) {
        let a = scores_from(&ps, &zs);
        let b = scores_from(&qs[..ps.len()], &zs);
        let gt = gt_upper_bound(&a, &b, 0.5).unwrap();
        for m in [confusion_metrics(&a, 0.5).unwrap(), confusion_metrics(&b, 0.5).unwrap()] {
            prop_assert!(gt.sen >= m.sen && gt.spec >= m.spec);
        }
    }

    #[test]
    fn folds_partition(labels in prop::collection::vec(0u8..2, 8..80), k in 2usize..5, seed in any::<u64>()) {
        let pos = labels.iter().filter(|&&z| z == 1).count();
        let neg = labels.len() - pos;
        let r = make_folds_from_labels(&labels, k, seed);
        if k > pos.min(neg) {
            prop_assert!(r.is_err());
            return Ok(());
        }
        let split = r.unwrap();
        let mut all: Vec<usize> = split.folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in 0..2u8 {
            let counts: Vec<usize> = split.folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == class).count()).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn loss_is_non_negative(ps in prop::collection::vec(0.0f32..=1.0, 1..8), lambda in 0.01f32..0.99, bits in any::<u8>()) {
        let zs: Vec<u8> = (0..ps.len()).map(|i| (bits >> i) & 1).collect();
        let l = weighted_bce(&ps, &zs, lambda);
        prop_assert!(l >= 0.0);
        let perfect: Vec<f32> = zs.iter().map(|&z| z as f32).collect();
        prop_assert!(weighted_bce(&perfect, &zs, lambda) < 1e-6);
    }

    #[test]
    fn bounding_box_covers_foreground(points in prop::collection::vec((0usize..12, 0usize..12, 0usize..12), 1..10), pad in 0usize..6) {
        let mut data = vec![0.0; 12 * 12 * 12];
        for &(z, y, x) in &points {
            data[(z * 12 + y) * 12 + x] = 1.0;
        }
        let m = Volume::new([12; 3], [1.0; 3], data, VolumeKind::Mask).unwrap();
        let roi = bounding_box(&m, pad).unwrap();
        for &(z, y, x) in &points {
            prop_assert!(roi.contains([z, y, x]));
        }
        prop_assert!((0..3).all(|a| roi.hi[a] <= 12));
    }

    #[test]
    fn masks_stay_binary(seed in any::<u64>(), side in 4usize..12, angles in prop::array::uniform3(-30.0f32..30.0)) {
        let data: Vec<f32> = (0..512).map(|i| ((seed >> (i % 64)) & 1) as f32).collect();
        let m = Volume::new([8; 3], [1.0; 3], data.clone(), VolumeKind::Mask).unwrap();
        let img = Volume::new([8; 3], [1.0; 3], data, VolumeKind::Image).unwrap();
        let roi = Roi { lo: [1, 0, 2], hi: [8, 7, 8] };
        let (_, cm) = crop_and_resample(&img, &m, &roi, side).unwrap();
        prop_assert!(cm.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let (_, rm) = rotate_pair(&img, &m, angles).unwrap();
        prop_assert!(rm.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn window_maps_into_unit_interval(vals in prop::collection::vec(-2000.0f32..3000.0, 8)) {
        let v = Volume::new([2, 2, 2], [1.0; 3], vals, VolumeKind::Image).unwrap();
        let n = normalize_hu(&v, -100.0, 240.0).unwrap();
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn linear_ramp_resamples_exactly(
        lo in prop::array::uniform3(0usize..5),
        ext in prop::array::uniform3(2usize..10),
        out in 2usize..12,
        coef in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let dims = [16; 3];
        let f = |p: [f64; 3]| coef[0] * p[0] + coef[1] * p[1] + coef[2] * p[2] + 1.0;
        let mut data = Vec::new();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    data.push(f([z as f64, y as f64, x as f64]) as f32);
                }
            }
        }
        let img = Volume::new(dims, [1.0; 3], data, VolumeKind::Image).unwrap();
        let mask = Volume::filled(dims, 0.0, VolumeKind::Mask).unwrap();
        let roi = Roi { lo, hi: [0, 1, 2].map(|a| lo[a] + ext[a]) };
        let (r, _) = crop_and_resample(&img, &mask, &roi, out).unwrap();
        // centre-aligned sample positions, clamped into the box
        let src = |o: usize, a: usize| {
            let c = (o as f64 + 0.5) * ext[a] as f64 / out as f64 - 0.5;
            lo[a] as f64 + c.clamp(0.0, (ext[a] - 1) as f64)
        };
        for z in 0..out {
            for y in 0..out {
                for x in 0..out {
                    let want = f([src(z, 0), src(y, 1), src(x, 2)]);
                    let got = r.get(z, y, x) as f64;
                    prop_assert!((got - want).abs() < 1e-5 * (1.0 + want.abs()), "{got} vs {want}");
                }
            }
        }
    }
}

fn small_base(c: [usize; 3], side: usize, pool_after: Vec<usize>) -> BaseConfig {
    BaseConfig {
        num_layers: 3,
        channels: c.to_vec(),
        input_side: side,
        pool_after,
        fc_hidden: 5,
        pool: PoolKind::Max,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn closed_form_counts_match_models(c in prop::array::uniform3(1usize..5), pools in 0usize..3) {
        let base = small_base(c, 8, (1..=pools).collect());
        for spec in enumerate_space(&base) {
            let m = Model::build_fused(&spec, 0).unwrap();
            prop_assert_eq!(count_params(&spec), m.param_count() as u64);
        }
        for alpha in 1..=3 {
            let at = |b| FusionSpec::new(alpha, b, base.clone()).unwrap();
            prop_assert_eq!(count_params(&at(Fusion::Add)), count_params(&at(Fusion::Mul)));
            prop_assert_eq!(count_flops(&at(Fusion::Add)), count_flops(&at(Fusion::Mul)));
            prop_assert!(count_params(&at(Fusion::Concat)) >= count_params(&at(Fusion::Add)));
        }
    }

    #[test]
    fn probabilities_stay_open(seed in any::<u64>(), alpha in 1usize..=3, beta in 0usize..3, scale in 0.0f32..50.0) {
        let base = small_base([2, 3, 2], 4, vec![1]);
        let spec = FusionSpec::new(alpha, Fusion::ALL[beta], base).unwrap();
        let m = Model::build_fused(&spec, seed).unwrap();
        let n = 2 * 64;
        let mask = Tensor::new(vec![2, 1, 4, 4, 4], (0..n).map(|i| (i * 7 + seed as usize).is_multiple_of(3) as u8 as f32).collect()).unwrap();
        let img = Tensor::new(vec![2, 1, 4, 4, 4], (0..n).map(|i| scale * ((i as f32 * 0.37).sin())).collect()).unwrap();
        let p = m.predict(&mask, &img).unwrap();
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    /// One small SGD step on a single sample does not increase that sample's
    /// loss. Both losses come from train-mode passes, so batch norm sees the
    /// same batch statistics path before and after the step.
    #[test]
    fn small_step_decreases_loss(seed in any::<u64>(), z in 0u8..2, lr in 1e-4f32..1e-3) {
        let base = small_base([2, 2, 2], 4, vec![1]);
        let mut m = Model::build(&ModelSpec::single(base, BranchInput::Image), seed).unwrap();
        let img = Tensor::new(vec![1, 1, 4, 4, 4], (0..64).map(|i| ((i as f32 + seed as f32) * 0.61).sin()).collect()).unwrap();
        let mask = Tensor::zeros(&[1, 1, 4, 4, 4]);
        let lambda = TrainConfig::default().lambda;
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &mask, &img).unwrap();
        let loss = tape.weighted_bce(pass.output, &[z as f32], lambda).unwrap();
        let before = tape.value(loss).data()[0] as f64;
        tape.backward(loss).unwrap();
        m.accumulate_grads(&tape, &pass.bindings);
        m.sgd_step(lr);
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &mask, &img).unwrap();
        let p = tape.value(pass.output).data().to_vec();
        let after = weighted_bce(&p, &[z], lambda);
        prop_assert!(after <= before + 1e-6, "{before} -> {after}");
    }
}

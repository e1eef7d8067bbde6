use fusegrid::io::{checkpoint, tables, vol};
use fusegrid_core::metrics::Score;
use fusegrid_core::model::{BaseConfig, BranchInput, Fusion, FusionSpec, ModelSpec, PoolKind};
use fusegrid_core::{Model, Tensor, Volume, VolumeKind};

fn tiny_base() -> BaseConfig {
    BaseConfig {
        num_layers: 3,
        channels: vec![2, 3, 2],
        input_side: 8,
        pool_after: vec![1, 2],
        fc_hidden: 4,
        pool: PoolKind::Max,
    }
}

#[test]
fn volume_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..2 * 3 * 4).map(|i| (i as f32 * 0.37).sin() * 500.0).collect();
    let image = Volume::new([2, 3, 4], [1.0, 0.5, 2.5], data, VolumeKind::Image).unwrap();
    let mask = Volume::new(
        [2, 3, 4],
        [1.0; 3],
        (0..24).map(|i| (i % 3 == 0) as u8 as f32).collect(),
        VolumeKind::Mask,
    )
    .unwrap();
    for (name, v) in [("a.vol", &image), ("b.vol", &mask)] {
        let path = dir.path().join(name);
        vol::write(&path, v).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 29 + 4 * 24);
        let back = vol::read(&path).unwrap();
        assert_eq!(&back, v);
    }
}

#[test]
fn truncated_volume_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.vol");
    let v = Volume::filled([2, 2, 2], 1.0, VolumeKind::Image).unwrap();
    vol::write(&path, &v).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = vol::read(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = vol::read(&dir.path().join("missing.vol")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoint_restores_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let specs = [
        ModelSpec::single(tiny_base(), BranchInput::Stacked),
        ModelSpec::from(FusionSpec::new(2, Fusion::Concat, tiny_base()).unwrap()),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let model = Model::build(spec, 40 + i as u64).unwrap();
        let path = dir.path().join(format!("m{i}.ckpt"));
        checkpoint::save(&path, &model).unwrap();
        assert!(checkpoint::sidecar_path(&path).exists());
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(back.spec(), model.spec());
        assert_eq!(back.named_tensors(), model.named_tensors());

        let mask = Tensor::new(
            vec![1, 1, 8, 8, 8],
            (0..512).map(|j| (j % 5 == 0) as u8 as f32).collect(),
        )
        .unwrap();
        let image = Tensor::new(vec![1, 1, 8, 8, 8], (0..512).map(|j| (j as f32 * 0.1).cos()).collect()).unwrap();
        assert_eq!(
            back.predict(&mask, &image).unwrap(),
            model.predict(&mask, &image).unwrap()
        );

        // saving the restored model reproduces the file byte for byte
        let again = dir.path().join(format!("m{i}b.ckpt"));
        checkpoint::save(&again, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(&ModelSpec::single(tiny_base(), BranchInput::Image), 1).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap_err().exit_code(), 2);
}

#[test]
fn score_table_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    let scores = vec![
        Score::new("a", 0.25, 0),
        Score::new("b", 0.1 + 0.2, 1),
        Score::new("c", 1e-7, 1),
    ];
    tables::write_scores(&path, &scores).unwrap();
    assert_eq!(tables::read_scores(&path).unwrap(), scores);
}

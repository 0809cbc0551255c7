use dualnet::dataset::{generate_synthetic, load_dataset, SyntheticSplits, TeacherSpec};
use dualnet::model::FusionMode;
use dualnet::pipeline::{fit, RunConfig};
use dualnet::TrainedModel;

fn small_splits() -> SyntheticSplits {
    SyntheticSplits {
        n_train: 120,
        n_dev: 20,
        n_test: 20,
        seed: 9,
    }
}

#[test]
fn dataset_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&TeacherSpec::default(), &small_splits()).unwrap();
    let path = dir.path().join("train.jsonl");
    data.train.save(&path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, data.train);
}

#[test]
fn checkpoint_predictions_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&TeacherSpec::default(), &small_splits()).unwrap();
    for mode in [FusionMode::Dual, FusionMode::SumOnly, FusionMode::MulOnly] {
        let mut cfg = RunConfig::default();
        cfg.model.mode = mode;
        cfg.train.epochs = 2;
        let (model, _) = fit(&data.train, &cfg, |_, _| Ok(())).unwrap();
        let path = dir.path().join(format!("{mode}.ckpt"));
        model.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        assert_eq!(loaded.answer_vocab, model.answer_vocab);
        assert_eq!(
            loaded.answer_probs(&data.test.examples).unwrap(),
            model.answer_probs(&data.test.examples).unwrap()
        );
    }
}

#[test]
fn checkpoint_rejects_data_with_other_sources() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&TeacherSpec::default(), &small_splits()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 1;
    let (model, _) = fit(&data.train, &cfg, |_, _| Ok(())).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();

    let other = TeacherSpec {
        sources: vec![dualnet::dataset::SourceSchema {
            name: "holistic".into(),
            dim: 32,
        }],
        ..TeacherSpec::default()
    };
    let other_data = generate_synthetic(&other, &small_splits()).unwrap();
    let loaded = TrainedModel::load(&path).unwrap();
    assert!(loaded.answer_probs(&other_data.test.examples).is_err());
}

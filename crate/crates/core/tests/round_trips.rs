use paraformer::cif::{cif_integrate, AlphaSeq, FiringPlan};
use paraformer::config::{ThresholdMode, TrainMode};
use paraformer::data::{dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset, Dataset, Split};
use paraformer::eval::{evaluate, EvalOptions};
use paraformer::model::checkpoint::{self, CheckpointMeta};
use paraformer::seq::HiddenSeq;
use paraformer::tensor::Matrix;
use paraformer::{Architecture, Error, ExperimentConfig, Model, ModelConfig, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data() -> Dataset {
    Dataset::generate(&SynthConfig {
        n_train: 12,
        n_dev: 3,
        n_test: 5,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn dataset_file_is_exact() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
    let bytes = dataset_to_bytes(&ds);
    assert_eq!(dataset_from_bytes(&bytes).unwrap(), ds);
    // Same config, same corpus.
    assert_eq!(Dataset::generate(ds.config.as_ref().unwrap()).unwrap(), ds);

    let cut = &bytes[..bytes.len() - 7];
    match dataset_from_bytes(cut) {
        Err(Error::Parse { message, .. }) => assert!(message.contains("test-0000"), "{message}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(read_dataset(&dir.path().join("none")), Err(Error::File { .. })));
}

#[test]
fn checkpoints_restore_identical_models() {
    let ds = data();
    let test = ds.split_owned(Split::Test);
    let dir = tempfile::tempdir().unwrap();
    for arch in [Architecture::Nar, Architecture::Ar] {
        let model = Model::new(ModelConfig::default(), arch).unwrap();
        let meta = CheckpointMeta {
            mode: if arch == Architecture::Ar { TrainMode::Ar } else { TrainMode::VanillaNar },
            threshold_mode: ThresholdMode::Fixed,
        };
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&model, Some(meta), &path).unwrap();
        let (back, m) = checkpoint::load(&path).unwrap();
        assert_eq!(m, Some(meta));
        for ((na, a), (nb, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        let opts = EvalOptions::default();
        let r1 = evaluate(&model, &test, &opts).unwrap();
        let r2 = evaluate(&back, &test, &opts).unwrap();
        let hyps = |r: &paraformer::eval::EvalReport| {
            r.utterances.iter().map(|u| u.hypothesis.clone()).collect::<Vec<_>>()
        };
        assert_eq!(hyps(&r1), hyps(&r2));

        let bytes = checkpoint::to_bytes(&model, None);
        assert!(checkpoint::from_reader(&bytes[..bytes.len() / 2]).is_err());
    }
}

#[test]
fn config_text_round_trips() {
    let cfg = ExperimentConfig::from_toml_str(
        "[train]\nepochs = 3\n[train.glm]\nlambda = 0.5\n",
        &["synth.noise_std=0.25".into(), "train.mode=ar".into()],
    )
    .unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.glm.lambda, 0.5);
    assert_eq!(cfg.synth.noise_std, 0.25);
    assert_eq!(cfg.train.mode, TrainMode::Ar);
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
    assert_eq!(again, cfg);
    assert!(matches!(
        ExperimentConfig::from_toml_str("[train]\nepoch = 3\n", &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn firing_plans_survive_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let t = rng.random_range(1..25);
        let alpha: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
        let beta = rng.random_range(0.3..1.2);
        let h = HiddenSeq::new(Matrix::zeros(t, 1), t).unwrap();
        let (_, plan) = cif_integrate(&h, &AlphaSeq::from_valid(alpha).unwrap(), beta).unwrap();
        let back = FiringPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(back, plan);
    }
}

#[test]
fn eval_report_json_round_trips() {
    let ds = data();
    let model = Model::new(ModelConfig::default(), Architecture::Nar).unwrap();
    let r = evaluate(&model, &ds.split_owned(Split::Test), &EvalOptions::default()).unwrap();
    let text = serde_json::to_string(&r).unwrap();
    let back: paraformer::eval::EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.schema, 1);
    assert!((r.sub + r.ins + r.del - r.cer).abs() < 1e-12);
}

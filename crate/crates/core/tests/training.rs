mod common;

use common::*;
use paraformer::config::{GlmConfig, LrSchedule, TrainConfig, TrainMode};
use paraformer::data::Utterance;
use paraformer::train::{
    train, train_step_ar, train_step_paraformer, train_step_vanilla, StepProbe,
};
use paraformer::{Architecture, Error, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_lambda_paraformer_is_vanilla_with_dropout() {
    let (p, v) = vanilla_lockstep(12, 0.1);
    assert_eq!(p, v);
    assert!(p[0].total > p[11].total);
}

#[test]
fn first_pass_is_argmax_only() {
    let utts = train_split(8);
    let batch: Vec<&Utterance> = utts.iter().collect();
    let model = Model::new(small_model(), Architecture::Nar).unwrap();
    let cfg = TrainConfig {
        glm: GlmConfig { lambda: 1.0 },
        ..TrainConfig::default()
    };
    let mut probe = StepProbe::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = train_step_paraformer(&model, &batch, &cfg, false, &mut rng, Some(&mut probe)).unwrap();
    assert!(!probe.first_pass_tracked);
    assert_eq!(probe.decoder_passes, 2 * batch.len());
    assert!(probe.fires.iter().all(|&(f, n)| f == n));
    assert_eq!(probe.selections.len(), batch.len());
    assert!(probe.selections.iter().any(|s| !s.selected.is_empty()));

    // Shifting every first-pass logit leaves the argmax, and so the gradient, alone.
    let mut shifted = StepProbe {
        first_pass_offset: 3.75,
        ..StepProbe::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let moved = train_step_paraformer(&model, &batch, &cfg, false, &mut rng, Some(&mut shifted)).unwrap();
    assert_eq!(base.bundle, moved.bundle);
    for ((_, a), (_, b)) in base.grads.iter().zip(moved.grads.iter()) {
        assert_eq!(a, b);
    }

    let mut probe = StepProbe::default();
    train_step_vanilla(&model, &batch, &cfg, &mut rng, Some(&mut probe)).unwrap();
    assert_eq!(probe.decoder_passes, batch.len());
}

#[test]
fn ce_skips_revealed_positions() {
    let utts = train_split(8);
    let batch: Vec<&Utterance> = utts.iter().take(4).collect();
    let model = Model::new(small_model(), Architecture::Nar).unwrap();
    let cfg = TrainConfig {
        glm: GlmConfig { lambda: 1.5 },
        ..TrainConfig::default()
    };
    let mut probe = StepProbe::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = train_step_paraformer(&model, &batch, &cfg, false, &mut rng, Some(&mut probe)).unwrap();
    let revealed: usize = probe.selections.iter().map(|s| s.selected.len()).sum();
    let tokens: usize = batch.iter().map(|u| u.tokens.len()).sum();
    assert_eq!(out.bundle.n_tokens_in_ce, tokens - revealed);
}

#[test]
fn mwer_term_appears_only_when_enabled() {
    let utts = train_split(8);
    let batch: Vec<&Utterance> = utts.iter().take(4).collect();
    let model = Model::new(small_model(), Architecture::Nar).unwrap();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let off = train_step_paraformer(&model, &batch, &cfg, false, &mut rng, None).unwrap();
    let on = train_step_paraformer(&model, &batch, &cfg, true, &mut rng, None).unwrap();
    assert_eq!(off.bundle.mwer, 0.0);
    assert!(on.bundle.mwer != 0.0);
    let b = on.bundle;
    assert!((b.total - (cfg.loss.gamma * b.ce + b.mae + b.mwer)).abs() < 1e-12);
}

#[test]
fn ar_step_has_no_length_term() {
    let utts = train_split(8);
    let batch: Vec<&Utterance> = utts.iter().take(4).collect();
    let model = Model::new(small_model(), Architecture::Ar).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Ar,
        ..TrainConfig::default()
    };
    let mut probe = StepProbe::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = train_step_ar(&model, &batch, &cfg, &mut rng, Some(&mut probe)).unwrap();
    assert_eq!(out.bundle.mae, 0.0);
    assert_eq!(out.bundle.total, out.bundle.ce);
    assert_eq!(probe.decoder_passes, 4);
    // Tokens plus the end marker.
    let expect: usize = batch.iter().map(|u| u.tokens.len() + 1).sum();
    assert_eq!(out.bundle.n_tokens_in_ce, expect);
}

#[test]
fn mode_and_architecture_must_agree() {
    let utts = train_split(4);
    let mut model = Model::new(small_model(), Architecture::Ar).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Paraformer,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut model, &utts, &[], &cfg, None), Err(Error::Config(_))));
}

#[test]
fn overfits_fifty_utterances() {
    let utts = train_split(50);
    let batch: Vec<&Utterance> = utts.iter().collect();
    let mut model = Model::new(small_model(), Architecture::Nar).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(200),
        epochs: 1000,
        schedule: LrSchedule {
            warmup_steps: 20,
            peak_lr: 3e-3,
        },
        mwer: no_mwer(),
        ..TrainConfig::default()
    };
    let probe_cfg = TrainConfig {
        glm: GlmConfig { lambda: 0.0 },
        ..cfg.clone()
    };
    let loss = |m: &Model| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step_paraformer(m, &batch, &probe_cfg, false, &mut rng, None)
            .unwrap()
            .bundle
    };
    let before = loss(&model).total;
    let mut log = Vec::new();
    let summary = train(&mut model, &utts, &[], &cfg, Some(&mut log)).unwrap();
    let end = loss(&model);
    let after = end.total;
    assert_eq!(summary.steps, 200);
    assert!(after < 0.1 * before, "loss {before} -> {end:?}");

    let text = String::from_utf8(log).unwrap();
    let steps = text.lines().filter(|l| l.contains("\"kind\":\"step\"")).count();
    assert_eq!(steps, 200);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "lr", "ce", "mae", "mwer", "total", "grad_norm"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

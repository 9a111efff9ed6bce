#![allow(dead_code)]

pub mod grad;

use paraformer::config::{MwerConfig, TrainConfig, TrainMode};
use paraformer::data::{Dataset, Split, Utterance};
use paraformer::losses::LossBundle;
use paraformer::train::{architecture_for, train_step, Adam};
use paraformer::{Model, ModelConfig, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_synth(n_train: usize) -> SynthConfig {
    SynthConfig {
        n_train,
        n_dev: 20,
        n_test: 20,
        acoustic_classes: 8,
        ..SynthConfig::default()
    }
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ffn: 64,
        ..ModelConfig::default()
    }
}

pub fn no_mwer() -> MwerConfig {
    MwerConfig {
        enabled: false,
        ..MwerConfig::default()
    }
}

pub fn train_split(n: usize) -> Vec<Utterance> {
    Dataset::generate(&small_synth(n)).unwrap().split_owned(Split::Train)
}

/// Runs `steps` optimizer steps with Adam and clipping outside
/// [`paraformer::train::train`], returning every step's loss bundle.
pub fn run_steps(
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    utts: &[Utterance],
    steps: usize,
) -> Vec<LossBundle> {
    let mut model = Model::new(mcfg.clone(), architecture_for(cfg.mode)).unwrap();
    let mut adam = Adam::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for s in 0..steps {
        let start = (s * cfg.batch_size) % utts.len();
        let batch: Vec<&Utterance> = (0..cfg.batch_size)
            .map(|i| &utts[(start + i) % utts.len()])
            .collect();
        let mwer_on = cfg.mode == TrainMode::Paraformer && cfg.mwer.enabled;
        let mut step = train_step(&model, &batch, cfg, mwer_on, &mut rng).unwrap();
        let norm = step.grads.global_norm();
        if norm > cfg.grad_clip {
            step.grads.scale(cfg.grad_clip / norm);
        }
        adam.step(model.params_mut(), &step.grads, cfg.schedule.lr(s + 1));
        out.push(step.bundle);
    }
    out
}

/// Paraformer with no glancing and no MWER against the vanilla objective,
/// from the same initial weights and seed.
pub fn vanilla_lockstep(steps: usize, dropout: f64) -> (Vec<LossBundle>, Vec<LossBundle>) {
    let utts = train_split(64);
    let mcfg = ModelConfig {
        dropout,
        ..small_model()
    };
    let base = TrainConfig {
        batch_size: 4,
        mwer: no_mwer(),
        ..TrainConfig::default()
    };
    let mut para = base.clone();
    para.mode = TrainMode::Paraformer;
    para.glm.lambda = 0.0;
    let mut vanilla = base;
    vanilla.mode = TrainMode::VanillaNar;
    (
        run_steps(&mcfg, &para, &utts, steps),
        run_steps(&mcfg, &vanilla, &utts, steps),
    )
}

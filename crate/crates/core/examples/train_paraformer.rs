//! Trains a small Paraformer and a vanilla NAR model on the same data and
//! compares them on the test split.
//!
//!     cargo run --release --example train_paraformer [epochs]

use paraformer::config::{GlmConfig, MwerConfig, TrainConfig, TrainMode};
use paraformer::data::{Dataset, Split};
use paraformer::eval::{evaluate, EvalOptions};
use paraformer::train::{architecture_for, train};
use paraformer::{Model, ModelConfig, SynthConfig};

fn main() -> paraformer::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let ds = Dataset::generate(&SynthConfig {
        n_train: 400,
        n_dev: 50,
        n_test: 100,
        acoustic_classes: 8,
        ..SynthConfig::default()
    })?;
    let (train_set, dev, test) = (
        ds.split_owned(Split::Train),
        ds.split_owned(Split::Dev),
        ds.split_owned(Split::Test),
    );
    for mode in [TrainMode::Paraformer, TrainMode::VanillaNar] {
        let cfg = TrainConfig {
            mode,
            epochs,
            glm: GlmConfig { lambda: 0.75 },
            mwer: MwerConfig {
                enabled: false,
                ..MwerConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut model = Model::new(ModelConfig::default(), architecture_for(mode))?;
        let summary = train(&mut model, &train_set, &dev, &cfg, None)?;
        let r = evaluate(&model, &test, &EvalOptions::default())?;
        println!(
            "{:12} {} steps in {:.0}s, loss per epoch {:?}",
            mode.name(),
            summary.steps,
            summary.seconds,
            summary
                .epoch_losses
                .iter()
                .map(|l| (l * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
        println!(
            "{:12} test cer {:.3} (sub {:.3} ins {:.3} del {:.3}), length accuracy {:.2}",
            "", r.cer, r.sub, r.ins, r.del, r.length_accuracy
        );
    }
    Ok(())
}

//! Breaks recognition errors into substitutions, insertions and deletions,
//! both per utterance and over a test set.
//!
//!     cargo run --release --example error_analysis

use paraformer::config::{MwerConfig, TrainConfig};
use paraformer::data::{Dataset, Split};
use paraformer::eval::{evaluate, EvalOptions};
use paraformer::metrics::cer;
use paraformer::train::train;
use paraformer::{Architecture, Model, ModelConfig, SynthConfig};

fn main() -> paraformer::Result<()> {
    let (rate, counts) = cer(&[3, 4, 5, 6], &[3, 9, 6, 7])?;
    println!("hand example: cer {rate:.2}, {counts:?}\n");

    let ds = Dataset::generate(&SynthConfig {
        n_train: 300,
        n_dev: 30,
        n_test: 60,
        acoustic_classes: 8,
        ..SynthConfig::default()
    })?;
    let mut model = Model::new(ModelConfig::default(), Architecture::Nar)?;
    let cfg = TrainConfig {
        epochs: 2,
        mwer: MwerConfig {
            enabled: false,
            ..MwerConfig::default()
        },
        ..TrainConfig::default()
    };
    train(&mut model, &ds.split_owned(Split::Train), &ds.split_owned(Split::Dev), &cfg, None)?;
    let r = evaluate(&model, &ds.split_owned(Split::Test), &EvalOptions::default())?;
    println!(
        "{} utterances, {} reference tokens\ncer {:.3} = sub {:.3} + ins {:.3} + del {:.3}",
        r.n_utterances, r.ref_tokens, r.cer, r.sub, r.ins, r.del
    );
    println!("substitutions are {:.0}% of errors", 100.0 * r.substitution_share());
    let worst = r
        .utterances
        .iter()
        .max_by(|a, b| a.cer.total_cmp(&b.cer))
        .expect("non-empty test split");
    println!(
        "worst: {} ref {:?} hyp {:?} {:?}",
        worst.id, worst.reference, worst.hypothesis, worst.counts
    );
    Ok(())
}

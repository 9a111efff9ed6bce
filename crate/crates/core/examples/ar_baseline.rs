//! Trains the autoregressive baseline briefly, then decodes a few test
//! utterances with greedy and beam search.
//!
//!     cargo run --release --example ar_baseline [epochs]

use paraformer::config::{TrainConfig, TrainMode};
use paraformer::data::{Dataset, Split};
use paraformer::eval::{evaluate, ArSearch, EvalOptions};
use paraformer::train::train;
use paraformer::{Architecture, Model, ModelConfig, SynthConfig};

fn main() -> paraformer::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let ds = Dataset::generate(&SynthConfig {
        n_train: 400,
        n_dev: 50,
        n_test: 50,
        acoustic_classes: 8,
        ..SynthConfig::default()
    })?;
    let test = ds.split_owned(Split::Test);
    let mut model = Model::new(ModelConfig::default(), Architecture::Ar)?;
    let cfg = TrainConfig {
        mode: TrainMode::Ar,
        epochs,
        ..TrainConfig::default()
    };
    train(&mut model, &ds.split_owned(Split::Train), &ds.split_owned(Split::Dev), &cfg, None)?;

    let max_len = model.config().max_tokens;
    for u in test.iter().take(3) {
        let hidden = model.encode(&u.feats)?;
        let greedy = model.ar_greedy_decode(&hidden, max_len)?;
        let beam = model.ar_beam_decode(&hidden, max_len, 4)?;
        println!("ref    {:?}\ngreedy {:?}\nbeam4  {:?}\n", u.tokens, greedy.tokens, beam.tokens);
    }
    for search in [ArSearch::Greedy, ArSearch::Beam(4)] {
        let opts = EvalOptions {
            ar_search: search,
            ..EvalOptions::default()
        };
        let r = evaluate(&model, &test, &opts)?;
        println!("{search:?}: cer {:.3}, rtf {:.4}", r.cer, r.rtf);
    }
    Ok(())
}

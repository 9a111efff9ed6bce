//! Trains one Paraformer per sampling factor on a small corpus.
//!
//!     cargo run --release --example lambda_sweep [epochs]

use paraformer::bench::sweep_lambda;
use paraformer::data::Dataset;
use paraformer::ExperimentConfig;

fn main() -> paraformer::Result<()> {
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "2".into());
    let cfg = ExperimentConfig::from_toml_str(
        "[synth]\nn_train = 300\nn_dev = 30\nn_test = 60\nacoustic_classes = 8\n\
         [train.mwer]\nenabled = false\n",
        &[format!("train.epochs={epochs}")],
    )?;
    let data = Dataset::generate(&cfg.synth)?;
    let report = sweep_lambda(&[0.0, 0.5, 1.0], &cfg, &data, |row, _| {
        eprintln!("lambda {} done in {:.0}s", row.lambda, row.seconds);
    })?;
    print!("{}", report.to_table());
    Ok(())
}

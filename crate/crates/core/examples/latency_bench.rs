//! Batch-1 decode timing for the AR and NAR decoders, and how decoder time
//! grows with output length. Weights are untrained; timing does not depend
//! on them once the output length is fixed.
//!
//!     cargo run --release --example latency_bench

use paraformer::bench::{bench, length_scaling, BenchOptions, System};
use paraformer::data::{Dataset, Split, Synthesizer};
use paraformer::{Architecture, Model, ModelConfig, SynthConfig};

fn main() -> paraformer::Result<()> {
    let synth_cfg = SynthConfig {
        n_train: 1,
        n_dev: 1,
        n_test: 20,
        ..SynthConfig::default()
    };
    let ds = Dataset::generate(&synth_cfg)?;
    let ar = Model::new(ModelConfig::default(), Architecture::Ar)?;
    let nar = Model::new(ModelConfig::default(), Architecture::Nar)?;

    let report = bench(
        &[(System::Ar, &ar), (System::Paraformer, &nar)],
        &ds.split_owned(Split::Test),
        &BenchOptions::default(),
    )?;
    print!("{}", report.to_table());

    let synth = Synthesizer::new(&synth_cfg)?;
    let scaling = length_scaling(&ar, &nar, &synth, &[5, 10, 20, 40], 4, 3, 1)?;
    print!("{}", scaling.to_table());
    Ok(())
}

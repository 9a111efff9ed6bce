//! Saves a model, loads it back and checks both decode identically.
//!
//!     cargo run --example checkpoint

use paraformer::config::{ThresholdMode, TrainMode};
use paraformer::data::{Dataset, Split};
use paraformer::eval::{infer, EvalOptions};
use paraformer::model::checkpoint::{self, CheckpointMeta};
use paraformer::{Architecture, Model, ModelConfig, SynthConfig};

fn main() -> paraformer::Result<()> {
    let model = Model::new(ModelConfig::default(), Architecture::Nar)?;
    println!("{} parameters", model.num_parameters());
    let meta = CheckpointMeta {
        mode: TrainMode::Paraformer,
        threshold_mode: ThresholdMode::Dynamic,
    };
    let path = std::env::temp_dir().join("paraformer-example-ckpt.bin");
    checkpoint::save(&model, Some(meta), &path)?;
    let (loaded, meta) = checkpoint::load(&path)?;
    println!("loaded {} with {:?}", path.display(), meta);

    let ds = Dataset::generate(&SynthConfig {
        n_train: 1,
        n_dev: 1,
        n_test: 3,
        ..SynthConfig::default()
    })?;
    for u in ds.split(Split::Test) {
        let a = infer(&model, &u.feats, &EvalOptions::default())?.0;
        let b = infer(&loaded, &u.feats, &EvalOptions::default())?.0;
        assert_eq!(a, b);
        println!("{}: {:?}", u.id, b.tokens);
    }
    Ok(())
}

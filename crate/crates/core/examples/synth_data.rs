//! Generates a small bigram-constrained corpus, prints a few utterances and
//! round-trips it through the on-disk format.
//!
//!     cargo run --example synth_data [out.bin]

use paraformer::data::{read_dataset, write_dataset, Dataset, Split};
use paraformer::SynthConfig;

fn main() -> paraformer::Result<()> {
    let cfg = SynthConfig {
        n_train: 50,
        n_dev: 10,
        n_test: 10,
        acoustic_classes: 8,
        ..SynthConfig::default()
    };
    let ds = Dataset::generate(&cfg)?;
    for split in [Split::Train, Split::Dev, Split::Test] {
        println!("{:5} {} utterances", split.name(), ds.split(split).len());
    }
    for u in ds.split(Split::Train).into_iter().take(3) {
        println!(
            "{}: {} tokens over {} frames, tokens {:?}",
            u.id,
            u.tokens.len(),
            u.num_frames(),
            u.tokens
        );
    }

    let path = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("paraformer-synth-example.bin"));
    write_dataset(&ds, &path)?;
    let back = read_dataset(&path)?;
    assert_eq!(back, ds);
    println!("wrote and re-read {}", path.display());
    Ok(())
}

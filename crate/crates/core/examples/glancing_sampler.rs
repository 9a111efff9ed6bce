//! The glancing sampler: compare a first-pass guess with the target, pick
//! `ceil(lambda * d)` positions and swap in target embeddings there.
//!
//!     cargo run --example glancing_sampler

use paraformer::glm::{glance_count, hamming_distance, mix_embeddings, select_positions};
use paraformer::seq::{EmbedRole, EmbedSeq};
use paraformer::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> paraformer::Result<()> {
    let gold = [5, 9, 4, 4, 12, 7, 3, 18];
    let guess = [5, 9, 6, 4, 11, 7, 3, 15];
    let d = hamming_distance(&gold, &guess)?;
    println!("gold  {gold:?}\nguess {guess:?}\ndistance {d}");

    for lambda in [0.0, 0.2, 0.5, 0.75, 1.0, 1.5] {
        println!("lambda {lambda:<4} -> {} positions", glance_count(d, lambda).min(gold.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sel = select_positions(gold.len(), d, 0.75, &mut rng);
    println!("\nsampled positions at lambda 0.75: {:?}", sel.selected);

    // Acoustic rows are all 0 and target rows all 1, so the mix shows the mask.
    let n = gold.len();
    let acoustic = EmbedSeq::new(Matrix::zeros(n, 2), n, EmbedRole::Acoustic)?;
    let mut ones = Matrix::zeros(n, 2);
    ones.data_mut().fill(1.0);
    let target = EmbedSeq::new(ones, n, EmbedRole::Target)?;
    let mixed = mix_embeddings(&acoustic, &target, &sel)?;
    let picks: Vec<f64> = (0..n).map(|r| mixed.valid().get(r, 0)).collect();
    println!("semantic embedding source per position (1 = target): {picks:?}");
    Ok(())
}

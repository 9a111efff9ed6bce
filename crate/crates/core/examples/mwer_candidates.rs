//! Negative candidates around a greedy path and the MWER loss over them.
//!
//!     cargo run --example mwer_candidates

use paraformer::losses::{generate_negative_candidates, mwer_from_scores, mwer_loss};
use paraformer::metrics::edit_distance;
use paraformer::seq::Logits;
use paraformer::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> paraformer::Result<()> {
    let rows = [
        [0.1, 2.0, 1.5, -1.0, 0.0],
        [1.8, 0.2, 1.7, 0.0, -0.5],
        [0.0, 0.0, 0.3, 2.5, 2.4],
    ];
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let logits = Logits::new(Matrix::from_vec(3, 5, flat), 3)?;
    let gold = [1, 2, 4];

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cands = generate_negative_candidates(&logits, 4, 0.3, &mut rng)?;
    for (path, lp) in cands.paths().iter().zip(cands.log_probs()) {
        println!("{path:?} log p {lp:>8.4} errors {}", edit_distance(&gold, path));
    }
    println!("mwer loss {:.6}", mwer_loss(&cands, &gold)?);

    // The centred form ignores a constant added to every error count.
    let lps = cands.log_probs();
    let errs: Vec<f64> = cands.paths().iter().map(|p| edit_distance(&gold, p) as f64).collect();
    let shifted: Vec<f64> = errs.iter().map(|e| e + 10.0).collect();
    println!(
        "with errors shifted by 10: {:.6}",
        mwer_from_scores(&lps, &shifted)
    );
    Ok(())
}

//! Glancing sampler, edit distance and the MWER weighting.

use paraformer::glm::{glance_count, hamming_distance, select_positions};
use paraformer::losses::{mae_loss, mwer_from_scores, total_loss};
use paraformer::metrics::{align, cer, edit_distance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_distance(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = brute_distance(ra, rb) + usize::from(x != y);
            diag.min(brute_distance(ra, b) + 1).min(brute_distance(a, rb) + 1)
        }
    }
}

proptest! {
    #[test]
    fn selection_size_and_shape(n in 1usize..40, d_frac in 0.0f64..=1.0, lambda in 0.0f64..2.0, seed: u64) {
        let d = (d_frac * n as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = select_positions(n, d, lambda, &mut rng);
        let expect = ((lambda * d as f64) - 1e-9).ceil().max(0.0) as usize;
        let expect = if lambda * d as f64 > 0.0 { expect.max(1) } else { 0 };
        prop_assert_eq!(sel.selected.len(), expect.min(n));
        prop_assert!(sel.selected.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sel.selected.iter().all(|&p| p < n));
        let mut again = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(select_positions(n, d, lambda, &mut again), sel);
    }

    #[test]
    fn edit_distance_matches_recursion(a in prop::collection::vec(0usize..4, 0..7), b in prop::collection::vec(0usize..4, 0..7)) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, brute_distance(&a, &b));
        prop_assert_eq!(d, edit_distance(&b, &a));
        let c = align(&a, &b);
        prop_assert_eq!(c.total(), d);
        prop_assert_eq!(a.len() + c.ins, b.len() + c.del);
    }

    #[test]
    fn mwer_ignores_error_offsets(scores in prop::collection::vec(-20.0f64..0.0, 1..8), shift in -5.0f64..5.0, lshift in -30.0f64..30.0) {
        let errors: Vec<f64> = (0..scores.len()).map(|i| (i % 3) as f64).collect();
        let base = mwer_from_scores(&scores, &errors);
        let shifted: Vec<f64> = errors.iter().map(|e| e + shift).collect();
        prop_assert!((mwer_from_scores(&scores, &shifted) - base).abs() < 1e-9);
        let lscores: Vec<f64> = scores.iter().map(|s| s + lshift).collect();
        prop_assert!((mwer_from_scores(&lscores, &errors) - base).abs() < 1e-9);
    }
}

#[test]
fn cardinality_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=20 {
        for d in 0..=n {
            for lambda in [0.0, 0.2, 0.5, 0.75, 1.0, 1.5] {
                let want = ((lambda * d as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
                let sel = select_positions(n, d, lambda, &mut rng);
                assert_eq!(sel.selected.len(), want, "n {n} d {d} lambda {lambda}");
                assert_eq!(glance_count(d, lambda).min(n), want);
            }
        }
    }
    assert_eq!(glance_count(3, 0.2), 1);
    assert_eq!(glance_count(4, 0.5), 2);
    assert_eq!(glance_count(10, 0.75), 8);
}

#[test]
fn positions_are_uniform() {
    let (n, d, lambda, draws) = (10, 4, 0.75, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut hits = [0usize; 10];
    for _ in 0..draws {
        for p in select_positions(n, d, lambda, &mut rng).selected {
            hits[p] += 1;
        }
    }
    let p = 3.0 / n as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (pos, &h) in hits.iter().enumerate() {
        assert!((h as f64 - mean).abs() < 3.0 * sd, "position {pos}: {h} vs {mean}");
    }
}

#[test]
fn zero_lambda_draws_nothing() {
    let mut a = ChaCha8Rng::seed_from_u64(9);
    let b = a.clone();
    assert!(select_positions(12, 7, 0.0, &mut a).selected.is_empty());
    assert_eq!(a, b);
}

#[test]
fn hamming_examples() {
    assert_eq!(hamming_distance(&[3, 4, 5], &[3, 6, 7]).unwrap(), 2);
    assert!(hamming_distance(&[3, 4], &[3]).is_err());
}

#[test]
fn loss_arithmetic() {
    assert_eq!(mae_loss(2.5, 4), 1.5);
    assert_eq!(mae_loss(4.25, 4), 0.25);
    assert_eq!(total_loss(2.0, 0.5, 0.25, 0.5), 1.75);
    assert_eq!(mwer_from_scores(&[-1.0], &[3.0]), 0.0);
    // Equal scores, errors 0 and 2: each candidate contributes 0.5 * (+-1).
    assert!(mwer_from_scores(&[-1.0, -1.0], &[0.0, 2.0]).abs() < 1e-15);
    let (rate, c) = cer(&[3, 4, 5, 6], &[3, 9, 6]).unwrap();
    assert_eq!((c.sub, c.del, c.ins), (1, 1, 0));
    assert_eq!(rate, 0.5);
    assert!(cer(&[], &[3]).is_err());
}

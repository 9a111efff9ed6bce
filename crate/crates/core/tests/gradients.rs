//! Every loss term against central finite differences on a tiny model.

mod common;

use common::grad::{check_term, TERMS};
use paraformer::autograd::Tape;
use paraformer::metrics::edit_distance;
use paraformer::seq::Logits;
use paraformer::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_loss_term_matches_finite_differences() {
    for k in 0..TERMS.len() {
        let (checked, worst) = check_term(k).unwrap();
        assert!(checked > 100, "{}: only {checked} entries checked", TERMS[k]);
        eprintln!("{}: {checked} entries, worst relative error {worst:.2e}", TERMS[k]);
    }
}

#[test]
fn mwer_ignores_rows_where_candidates_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lv = Matrix::from_vec(4, 5, data);
    // Every candidate emits token 2 at row 1.
    let paths = vec![vec![0, 2, 1, 3], vec![4, 2, 1, 0], vec![0, 2, 3, 3]];
    let gold = [0, 2, 1, 4];
    let errors: Vec<f64> = paths.iter().map(|p| edit_distance(p, &gold) as f64).collect();
    let params = paraformer::params::ParamStore::new();
    let mut t = Tape::new(&params);
    let x = t.leaf(lv);
    let m = t.mwer(x, &paths, &errors);
    let g = t.backward(m);
    let gx = g.wrt(x).unwrap();
    assert!(gx.row(1).iter().all(|&v| v == 0.0), "{:?}", gx.row(1));
    assert!(gx.row(0).iter().any(|&v| v != 0.0));
    // The value is consistent with the standalone loss.
    let logits = Logits::new(t.value(x).clone(), 4).unwrap();
    let lp = paraformer::tensor::log_softmax_rows(&logits.valid());
    let scores: Vec<f64> = paths
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &k)| lp.get(r, k)).sum())
        .collect();
    let expect = paraformer::losses::mwer_from_scores(&scores, &errors);
    assert!((t.value(m).item() - expect).abs() < 1e-12);
}

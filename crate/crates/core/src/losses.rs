//! Training objectives.
//!
//! The value-level functions here mirror the tape ops used during training
//! ([`Tape::cross_entropy_sum`](crate::autograd::Tape::cross_entropy_sum),
//! [`Tape::mwer`](crate::autograd::Tape::mwer)) and are what the unit tests
//! and the typed API use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::GlanceSelection;
use crate::metrics::edit_distance;
use crate::seq::{Hypothesis, Logits, TokenId};
use crate::tensor::{log_softmax_rows, softmax_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub mae: f64,
    pub mwer: f64,
    pub total: f64,
    pub n_tokens_in_ce: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub hypotheses: Vec<Hypothesis>,
}

impl CandidateSet {
    pub fn size(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.hypotheses.iter().map(|h| h.score).collect()
    }

    pub fn paths(&self) -> Vec<Vec<TokenId>> {
        self.hypotheses.iter().map(|h| h.tokens.clone()).collect()
    }
}

/// Mean NLL of `gold` over the positions NOT in `sel`. Returns the loss and
/// the number of positions that contributed. With every position selected
/// the loss is 0 over 0 tokens.
pub fn glm_ce_loss(logits: &Logits, gold: &[TokenId], sel: &GlanceSelection) -> Result<(f64, usize)> {
    if logits.valid_len() != gold.len() {
        return Err(Error::Contract(format!(
            "logits cover {} positions, gold has {}",
            logits.valid_len(),
            gold.len()
        )));
    }
    let logp = log_softmax_rows(&logits.valid());
    let mut nll = 0.0;
    let mut n = 0;
    for (pos, &tok) in gold.iter().enumerate() {
        if !sel.contains(pos) {
            nll -= logp.get(pos, tok);
            n += 1;
        }
    }
    Ok(if n == 0 { (0.0, 0) } else { (nll / n as f64, n) })
}

/// `|N - sum(alpha)|` on raw weights.
pub fn mae_loss(alpha_sum: f64, target_len: usize) -> f64 {
    (target_len as f64 - alpha_sum).abs()
}

fn top_two(row: &[f64]) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let mut second = if best == 0 { 1 } else { 0 };
    for (i, &v) in row.iter().enumerate() {
        if i != best && v > row[second] {
            second = i;
        }
    }
    (best, second)
}

/// Builds the MWER contrast set from one logit matrix.
///
/// Candidate 0 is the greedy path. Every other candidate starts from it and
/// replaces the top-1 token by the runner-up at each position independently
/// with probability `p_mask`. A duplicate is redrawn up to 10 times and then
/// dropped, so the set can come back smaller than `n_cand`.
pub fn generate_negative_candidates(
    logits: &Logits,
    n_cand: usize,
    p_mask: f64,
    rng: &mut impl Rng,
) -> Result<CandidateSet> {
    if logits.vocab_size() < 2 {
        return Err(Error::Config("negative sampling needs a vocabulary of at least 2".into()));
    }
    if n_cand < 2 {
        return Err(Error::Config(format!("n_cand must be at least 2, got {n_cand}")));
    }
    let logp = log_softmax_rows(&logits.valid());
    let n = logits.valid_len();
    let tops: Vec<(usize, usize)> = (0..n).map(|r| top_two(logp.row(r))).collect();
    let greedy: Vec<TokenId> = tops.iter().map(|&(b, _)| b).collect();

    let mut paths: Vec<Vec<TokenId>> = vec![greedy.clone()];
    for _ in 1..n_cand {
        for _attempt in 0..10 {
            let cand: Vec<TokenId> = tops
                .iter()
                .map(|&(b, s)| if rng.random::<f64>() < p_mask { s } else { b })
                .collect();
            if !paths.contains(&cand) {
                paths.push(cand);
                break;
            }
        }
    }
    let hypotheses = paths
        .into_iter()
        .map(|p| {
            let lps = p.iter().enumerate().map(|(r, &t)| logp.get(r, t)).collect();
            Hypothesis::new(p, lps)
        })
        .collect();
    Ok(CandidateSet { hypotheses })
}

/// Expected centred word error over the candidate set. Probabilities are
/// the path scores renormalised over the set; errors are token edit
/// distances to `gold`. A single candidate yields exactly 0.
pub fn mwer_loss(cands: &CandidateSet, gold: &[TokenId]) -> Result<f64> {
    if cands.size() == 0 {
        return Err(Error::Input("empty candidate set".into()));
    }
    if cands.size() == 1 {
        return Ok(0.0);
    }
    let errors: Vec<f64> = cands
        .hypotheses
        .iter()
        .map(|h| edit_distance(&h.tokens, gold) as f64)
        .collect();
    Ok(mwer_from_scores(&cands.log_probs(), &errors))
}

/// `sum_i p_i (W_i - mean W)` with `p = softmax(log_probs)`.
pub fn mwer_from_scores(log_probs: &[f64], errors: &[f64]) -> f64 {
    if log_probs.len() < 2 {
        return 0.0;
    }
    let mut p = log_probs.to_vec();
    softmax_in_place(&mut p);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    p.iter().zip(errors).map(|(pi, w)| pi * (w - mean)).sum()
}

pub fn total_loss(ce: f64, mae: f64, mwer: f64, gamma: f64) -> f64 {
    gamma * ce + mae + mwer
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(rows: &[&[f64]]) -> Logits {
        let m = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        let n = m.rows();
        Logits::new(m, n).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let l = logits(&[&[0.0; 4], &[0.0; 4]]);
        let (ce, n) = glm_ce_loss(&l, &[1, 3], &GlanceSelection::empty(2)).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert_eq!(n, 2);
    }

    #[test]
    fn fully_selected_gives_zero() {
        let l = logits(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let sel = GlanceSelection {
            selected: vec![0, 1],
            n_requested: 2,
            distance: 2,
            len: 2,
        };
        assert_eq!(glm_ce_loss(&l, &[0, 1], &sel).unwrap(), (0.0, 0));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae_loss(4.0, 4), 0.0);
        assert_eq!(mae_loss(3.5, 5), 1.5);
    }

    #[test]
    fn forced_mask_gives_runner_up_path() {
        let l = logits(&[&[3.0, 2.0, 0.0], &[0.0, 1.0, 5.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = generate_negative_candidates(&l, 2, 1.0, &mut rng).unwrap();
        assert_eq!(c.size(), 2);
        assert_eq!(c.hypotheses[0].tokens, vec![0, 2]);
        assert_eq!(c.hypotheses[1].tokens, vec![1, 1]);
    }

    #[test]
    fn zero_mask_collapses_to_greedy() {
        let l = logits(&[&[3.0, 2.0, 0.0], &[0.0, 1.0, 5.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = generate_negative_candidates(&l, 4, 0.0, &mut rng).unwrap();
        assert_eq!(c.size(), 1);
        assert_eq!(mwer_loss(&c, &[0, 2]).unwrap(), 0.0);
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        let l = logits(&[&[1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_negative_candidates(&l, 2, 0.5, &mut rng).is_err());
    }

    #[test]
    fn mwer_examples() {
        assert_eq!(mwer_from_scores(&[0.0, 0.0], &[0.0, 2.0]), 0.0);
        let lp = [0.8f64.ln(), 0.2f64.ln()];
        assert!((mwer_from_scores(&lp, &[0.0, 2.0]) + 0.6).abs() < 1e-12);
        assert_eq!(mwer_from_scores(&[-1.0, -3.0, -0.5], &[2.0, 2.0, 2.0]), 0.0);
    }

    #[test]
    fn total_examples() {
        assert!((total_loss(1.0, 0.5, -0.1, 1.0) - 1.4).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 0.5, 0.0, 0.5), 1.5);
    }
}

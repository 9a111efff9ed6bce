//! Glancing sampler: choose how many gold tokens to reveal from the
//! first-pass error count, pick the positions, and mix the embeddings.
//!
//! Positions are drawn uniformly without replacement over the whole target,
//! not just over the mispredicted positions.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seq::{EmbedRole, EmbedSeq, TokenId};

/// Slack for `ceil(lambda * d)` so that products such as `0.2 * 15` that
/// land a rounding error above an integer do not round up.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlanceSelection {
    /// Sorted, distinct, all `< len`.
    pub selected: Vec<usize>,
    pub n_requested: usize,
    pub distance: usize,
    pub len: usize,
}

impl GlanceSelection {
    pub fn empty(len: usize) -> Self {
        Self {
            selected: Vec::new(),
            n_requested: 0,
            distance: 0,
            len,
        }
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.selected.binary_search(&pos).is_ok()
    }

    /// One flag per position.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len];
        for &p in &self.selected {
            m[p] = true;
        }
        m
    }
}

/// Number of positions that differ.
pub fn hamming_distance(gold: &[TokenId], pred: &[TokenId]) -> Result<usize> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "hamming distance needs equal lengths, got {} and {}",
            gold.len(),
            pred.len()
        )));
    }
    Ok(gold.iter().zip(pred).filter(|(a, b)| a != b).count())
}

/// `ceil(lambda * d)`.
pub fn glance_count(distance: usize, lambda: f64) -> usize {
    let raw = lambda * distance as f64;
    if raw <= 0.0 {
        0
    } else {
        (raw - CEIL_SLACK).ceil().max(1.0) as usize
    }
}

/// Samples `min(ceil(lambda * d), len)` distinct positions.
pub fn select_positions(
    len: usize,
    distance: usize,
    lambda: f64,
    rng: &mut impl Rng,
) -> GlanceSelection {
    debug_assert!(lambda >= 0.0);
    debug_assert!(distance <= len);
    let n_requested = glance_count(distance, lambda);
    let k = n_requested.min(len);
    let mut selected = if k == 0 {
        Vec::new()
    } else {
        index::sample(rng, len, k).into_vec()
    };
    selected.sort_unstable();
    GlanceSelection {
        selected,
        n_requested,
        distance,
        len,
    }
}

/// Selected rows come from the target embeddings, the rest from the
/// acoustic ones.
pub fn mix_embeddings(
    acoustic: &EmbedSeq,
    target: &EmbedSeq,
    sel: &GlanceSelection,
) -> Result<EmbedSeq> {
    if acoustic.role() != EmbedRole::Acoustic || target.role() != EmbedRole::Target {
        return Err(Error::Contract(
            "mix_embeddings takes acoustic then target embeddings".into(),
        ));
    }
    let n = acoustic.valid_len();
    if target.valid_len() != n || sel.len != n {
        return Err(Error::Contract(format!(
            "embedding lengths differ: acoustic {n}, target {}, selection {}",
            target.valid_len(),
            sel.len
        )));
    }
    let mut out = acoustic.valid();
    let t = target.valid();
    for &p in &sel.selected {
        out.row_mut(p).copy_from_slice(t.row(p));
    }
    EmbedSeq::new(out, n, EmbedRole::Semantic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming_distance(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0);
        assert_eq!(hamming_distance(&[1, 2, 3], &[1, 9, 3]).unwrap(), 1);
        assert_eq!(hamming_distance(&[4, 4, 4, 4], &[5, 5, 5, 5]).unwrap(), 4);
        assert!(matches!(
            hamming_distance(&[1, 2], &[1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn selection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_positions(10, 0, 0.75, &mut rng).selected.is_empty());
        assert!(select_positions(10, 6, 0.0, &mut rng).selected.is_empty());
        let s = select_positions(10, 4, 0.75, &mut rng);
        assert_eq!(s.selected.len(), 3);
        assert_eq!(s.n_requested, 3);
        let s = select_positions(4, 4, 1.5, &mut rng);
        assert_eq!(s.selected, vec![0, 1, 2, 3]);
        assert_eq!(s.n_requested, 6);
    }

    #[test]
    fn rounding_noise_does_not_inflate_count() {
        assert_eq!(glance_count(15, 0.2), 3);
        assert_eq!(glance_count(3, 0.1), 1);
        assert_eq!(glance_count(7, 0.5), 4);
    }

    #[test]
    fn same_seed_same_selection() {
        let a = select_positions(20, 10, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let b = select_positions(20, 10, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    fn embed(rows: usize, base: f64, role: EmbedRole) -> EmbedSeq {
        let m = Matrix::from_vec(rows, 2, (0..rows * 2).map(|i| base + i as f64).collect());
        EmbedSeq::new(m, rows, role).unwrap()
    }

    #[test]
    fn mixing_is_row_exact() {
        let a = embed(4, 0.0, EmbedRole::Acoustic);
        let c = embed(4, 100.0, EmbedRole::Target);
        let none = GlanceSelection::empty(4);
        assert_eq!(mix_embeddings(&a, &c, &none).unwrap().valid(), a.valid());
        let all = GlanceSelection {
            selected: vec![0, 1, 2, 3],
            n_requested: 4,
            distance: 4,
            len: 4,
        };
        assert_eq!(mix_embeddings(&a, &c, &all).unwrap().valid(), c.valid());
        let some = GlanceSelection {
            selected: vec![1, 3],
            n_requested: 2,
            distance: 2,
            len: 4,
        };
        let s = mix_embeddings(&a, &c, &some).unwrap();
        assert_eq!(s.role(), EmbedRole::Semantic);
        assert_eq!(s.data().row(0), a.data().row(0));
        assert_eq!(s.data().row(1), c.data().row(1));
        assert_eq!(s.data().row(2), a.data().row(2));
        assert_eq!(s.data().row(3), c.data().row(3));
    }

    #[test]
    fn mixing_rejects_length_mismatch() {
        let a = embed(4, 0.0, EmbedRole::Acoustic);
        let c = embed(3, 100.0, EmbedRole::Target);
        assert!(matches!(
            mix_embeddings(&a, &c, &GlanceSelection::empty(4)),
            Err(Error::Contract(_))
        ));
    }
}

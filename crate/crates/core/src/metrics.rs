//! Token edit distance and character-error-rate alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::TokenId;

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.sub + self.ins + self.del
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.sub += other.sub;
        self.ins += other.ins;
        self.del += other.del;
    }
}

/// Aligns `hyp` against `reference` and classifies the edits.
///
/// The backtrace prefers, among optimal moves, a match or substitution,
/// then an insertion, then a deletion.
pub fn align(reference: &[TokenId], hyp: &[TokenId]) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    let mut counts = ErrorCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if dp[i][j] == dp[i - 1][j - 1] + usize::from(!same) {
                if !same {
                    counts.sub += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dp[i][j] == dp[i][j - 1] + 1 {
            counts.ins += 1;
            j -= 1;
        } else {
            counts.del += 1;
            i -= 1;
        }
    }
    counts
}

/// Error rate `(S + I + D) / |ref|` and the edit breakdown.
pub fn cer(reference: &[TokenId], hyp: &[TokenId]) -> Result<(f64, ErrorCounts)> {
    if reference.is_empty() {
        return Err(Error::Input("error rate is undefined for an empty reference".into()));
    }
    let counts = align(reference, hyp);
    Ok((counts.total() as f64 / reference.len() as f64, counts))
}

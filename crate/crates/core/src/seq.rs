//! Sequence containers passed between the model stages.
//!
//! Every container carries a `valid_len`; rows at or beyond it are padding and
//! are never read by any consumer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// First id available for real tokens.
pub const FIRST_TOKEN: TokenId = 3;

fn check_valid(rows: usize, valid_len: usize, what: &str) -> Result<()> {
    if valid_len > rows {
        return Err(Error::Input(format!(
            "{what}: valid_len {valid_len} exceeds {rows} rows"
        )));
    }
    Ok(())
}

/// Acoustic features, `T x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatSeq {
    data: Matrix,
    valid_len: usize,
}

impl FeatSeq {
    /// Builds a feature sequence and zeroes any padded rows.
    pub fn new(mut data: Matrix, valid_len: usize) -> Result<Self> {
        check_valid(data.rows(), valid_len, "features")?;
        if valid_len == 0 {
            return Err(Error::Input("features: valid_len must be at least 1".into()));
        }
        for r in valid_len..data.rows() {
            data.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Self { data, valid_len })
    }

    /// Keeps whatever is stored in the padded rows. Consumers must still
    /// ignore them; this exists to test exactly that.
    pub fn with_raw_padding(data: Matrix, valid_len: usize) -> Result<Self> {
        check_valid(data.rows(), valid_len, "features")?;
        if valid_len == 0 {
            return Err(Error::Input("features: valid_len must be at least 1".into()));
        }
        Ok(Self { data, valid_len })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn feat_dim(&self) -> usize {
        self.data.cols()
    }

    /// The unpadded `valid_len x F` block.
    pub fn valid(&self) -> Matrix {
        self.data.head_rows(self.valid_len)
    }
}

/// Encoder output, `T x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSeq {
    data: Matrix,
    valid_len: usize,
}

impl HiddenSeq {
    pub fn new(data: Matrix, valid_len: usize) -> Result<Self> {
        check_valid(data.rows(), valid_len, "hidden")?;
        Ok(Self { data, valid_len })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn valid(&self) -> Matrix {
        self.data.head_rows(self.valid_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedRole {
    /// Integrated from encoder frames by the predictor.
    Acoustic,
    /// Looked up from the token table.
    Target,
    /// Row-wise mix of acoustic and target rows.
    Semantic,
}

/// Decoder-side embedding sequence, `N x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSeq {
    data: Matrix,
    valid_len: usize,
    role: EmbedRole,
}

impl EmbedSeq {
    pub fn new(data: Matrix, valid_len: usize, role: EmbedRole) -> Result<Self> {
        check_valid(data.rows(), valid_len, "embeddings")?;
        Ok(Self {
            data,
            valid_len,
            role,
        })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn role(&self) -> EmbedRole {
        self.role
    }

    pub fn valid(&self) -> Matrix {
        self.data.head_rows(self.valid_len)
    }
}

/// Per-position vocabulary scores, `N x vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    data: Matrix,
    valid_len: usize,
}

impl Logits {
    pub fn new(data: Matrix, valid_len: usize) -> Result<Self> {
        check_valid(data.rows(), valid_len, "logits")?;
        if !data.head_rows(valid_len).is_finite() {
            return Err(Error::Input("logits: non-finite entry".into()));
        }
        Ok(Self { data, valid_len })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn vocab_size(&self) -> usize {
        self.data.cols()
    }

    pub fn valid(&self) -> Matrix {
        self.data.head_rows(self.valid_len)
    }

    /// Per-position argmax over the valid rows.
    pub fn argmax(&self) -> Vec<TokenId> {
        (0..self.valid_len).map(|r| self.data.argmax_row(r)).collect()
    }
}

/// A decoded token sequence with the log-probability of each emitted token.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
    pub score: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<TokenId>, log_probs: Vec<f64>) -> Self {
        let score = log_probs.iter().sum();
        Self {
            tokens,
            log_probs,
            score,
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feat_seq_zeroes_padding() {
        let m = Matrix::filled(3, 2, 7.0);
        let f = FeatSeq::new(m, 2).unwrap();
        assert_eq!(f.data().row(2), &[0.0, 0.0]);
        assert_eq!(f.data().row(1), &[7.0, 7.0]);
    }

    #[test]
    fn feat_seq_rejects_bad_lengths() {
        assert!(FeatSeq::new(Matrix::zeros(3, 2), 0).is_err());
        assert!(FeatSeq::new(Matrix::zeros(3, 2), 4).is_err());
    }

    #[test]
    fn logits_reject_nan_in_valid_rows_only() {
        let mut m = Matrix::zeros(2, 3);
        m.set(1, 0, f64::NAN);
        assert!(Logits::new(m.clone(), 1).is_ok());
        assert!(Logits::new(m, 2).is_err());
    }
}

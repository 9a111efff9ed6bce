//! Continuous integrate-and-fire.
//!
//! The predictor emits one firing weight per encoder frame. Weights are
//! accumulated left to right; every time the running total reaches the
//! threshold `beta` a token boundary is declared and the weighted sum of the
//! frames seen since the previous boundary becomes one acoustic embedding.
//! A frame whose weight straddles a boundary is split between the two fires.
//!
//! With the dynamic threshold `beta = S / ceil(S)` (`S` the weight total) the
//! total is an exact multiple of `beta`, so the number of fires is
//! `ceil(S)` and nothing is left over. Under a fixed threshold the trailing
//! partial fire is dropped and reported as `residual`.
//!
//! Re-scaling weights at inference time once the token count is known is
//! equivalent to using the dynamic threshold, so no separate rescale is done.

use std::fmt::Write as _;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::seq::{EmbedRole, EmbedSeq, HiddenSeq};
use crate::tensor::{matmul, Matrix};

/// Accumulator slack when deciding whether a fire closes. Covers rounding in
/// the dynamic threshold and in training-time scaling.
pub const FIRE_TOLERANCE: f64 = 1e-10;

/// Per-frame firing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSeq {
    weights: Vec<f64>,
    valid_len: usize,
    scaled: bool,
}

impl AlphaSeq {
    /// Raw predictor output: every valid weight must lie in `[0, 1]`.
    /// Padded entries are forced to zero.
    pub fn new(mut weights: Vec<f64>, valid_len: usize) -> Result<Self> {
        if valid_len > weights.len() {
            return Err(Error::Input(format!(
                "alpha: valid_len {valid_len} exceeds length {}",
                weights.len()
            )));
        }
        for (t, &w) in weights[..valid_len].iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::Input(format!("alpha[{t}] is not finite")));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Input(format!("alpha[{t}] = {w} outside [0, 1]")));
            }
        }
        weights[valid_len..].iter_mut().for_each(|w| *w = 0.0);
        Ok(Self {
            weights,
            valid_len,
            scaled: false,
        })
    }

    pub fn from_valid(weights: Vec<f64>) -> Result<Self> {
        let n = weights.len();
        Self::new(weights, n)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn valid(&self) -> &[f64] {
        &self.weights[..self.valid_len]
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// True for training-time rescaled weights, which may exceed 1.
    pub fn is_scaled(&self) -> bool {
        self.scaled
    }
}

/// One emitted token boundary: the frames that fed it and how much of each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fire {
    pub contributions: Vec<(usize, f64)>,
}

impl Fire {
    pub fn total(&self) -> f64 {
        self.contributions.iter().map(|&(_, w)| w).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FiringPlan {
    pub fires: Vec<Fire>,
    /// Weight accumulated after the last emitted fire and then dropped.
    pub residual: f64,
}

impl FiringPlan {
    pub fn num_fires(&self) -> usize {
        self.fires.len()
    }

    /// `num_fires x frames` matrix of contribution weights.
    pub fn weight_matrix(&self, frames: usize) -> Matrix {
        let mut w = Matrix::zeros(self.fires.len(), frames);
        for (n, fire) in self.fires.iter().enumerate() {
            for &(t, c) in &fire.contributions {
                let cur = w.get(n, t);
                w.set(n, t, cur + c);
            }
        }
        w
    }

    /// Sum of every contribution plus the residual.
    pub fn accounted_weight(&self) -> f64 {
        self.fires.iter().map(Fire::total).sum::<f64>() + self.residual
    }

    /// JSON with every float written to 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\"fires\":[");
        for (i, fire) in self.fires.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push('[');
            for (j, &(t, w)) in fire.contributions.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{{\"frame\":{t},\"weight\":{w:.16e}}}");
            }
            s.push(']');
        }
        let _ = write!(s, "],\"residual\":{:.16e}}}", self.residual);
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            offset: 0,
            message: format!("firing plan: {m}"),
        };
        let v: Value = serde_json::from_str(text)?;
        let fires = v
            .get("fires")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing fires"))?
            .iter()
            .map(|fire| {
                let contributions = fire
                    .as_array()
                    .ok_or_else(|| bad("fire is not a list"))?
                    .iter()
                    .map(|c| {
                        let t = c.get("frame").and_then(Value::as_u64).ok_or_else(|| bad("frame"))?;
                        let w = c.get("weight").and_then(Value::as_f64).ok_or_else(|| bad("weight"))?;
                        Ok((t as usize, w))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Fire { contributions })
            })
            .collect::<Result<Vec<_>>>()?;
        let residual = v
            .get("residual")
            .and_then(Value::as_f64)
            .ok_or_else(|| bad("missing residual"))?;
        Ok(Self { fires, residual })
    }
}

/// Left-to-right sum of the valid weights.
pub fn sum_alpha(alpha: &AlphaSeq) -> f64 {
    alpha.valid().iter().fold(0.0, |acc, &w| acc + w)
}

/// `beta = S / ceil(S)`, so that exactly `ceil(S)` fires consume all weight.
pub fn dynamic_threshold(alpha: &AlphaSeq) -> Result<f64> {
    let s = sum_alpha(alpha);
    if s <= 0.0 {
        return Err(Error::EmptyUtterance);
    }
    Ok(s / s.ceil())
}

/// Rescales weights to sum to `target_len`. Training only.
pub fn scale_alpha(alpha: &AlphaSeq, target_len: usize) -> Result<AlphaSeq> {
    if target_len == 0 {
        return Err(Error::Input("scale_alpha: target length must be >= 1".into()));
    }
    let s = sum_alpha(alpha);
    if s <= 0.0 {
        return Err(Error::EmptyUtterance);
    }
    let k = target_len as f64 / s;
    let mut weights = alpha.weights.clone();
    weights[..alpha.valid_len].iter_mut().for_each(|w| *w *= k);
    Ok(AlphaSeq {
        weights,
        valid_len: alpha.valid_len,
        scaled: true,
    })
}

/// `ceil(S)` for positive `S`, otherwise 0.
pub fn predict_token_count(alpha: &AlphaSeq) -> usize {
    let s = sum_alpha(alpha);
    if s > 0.0 {
        s.ceil() as usize
    } else {
        0
    }
}

/// Computes the accumulate-and-fire schedule for a weight sequence.
pub fn firing_plan(weights: &[f64], beta: f64) -> Result<FiringPlan> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Input(format!("threshold must be positive, got {beta}")));
    }
    if let Some(t) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Input(format!("alpha[{t}] is not finite")));
    }
    if let Some(t) = weights.iter().position(|&w| w < 0.0) {
        return Err(Error::Input(format!("alpha[{t}] is negative")));
    }

    let mut fires = Vec::new();
    let mut current = Fire::default();
    let mut acc = 0.0;
    for (t, &alpha) in weights.iter().enumerate() {
        let mut left = alpha;
        while left > 0.0 {
            let need = beta - acc;
            if left >= need - FIRE_TOLERANCE {
                let w = need.min(left);
                if w > 0.0 {
                    current.contributions.push((t, w));
                }
                fires.push(std::mem::take(&mut current));
                acc = 0.0;
                left -= w;
            } else {
                current.contributions.push((t, left));
                acc += left;
                left = 0.0;
            }
        }
    }
    Ok(FiringPlan {
        fires,
        residual: acc,
    })
}

/// Integrates hidden frames into acoustic embeddings under threshold `beta`.
pub fn cif_integrate(
    hidden: &HiddenSeq,
    alpha: &AlphaSeq,
    beta: f64,
) -> Result<(EmbedSeq, FiringPlan)> {
    if alpha.valid_len() != hidden.valid_len() {
        return Err(Error::Input(format!(
            "alpha covers {} frames, hidden has {}",
            alpha.valid_len(),
            hidden.valid_len()
        )));
    }
    let plan = firing_plan(alpha.valid(), beta)?;
    let w = plan.weight_matrix(hidden.valid_len());
    let emb = matmul(&w, &hidden.valid());
    let n = emb.rows();
    Ok((EmbedSeq::new(emb, n, EmbedRole::Acoustic)?, plan))
}

/// Backward pass of the weight matrix with respect to the weights.
///
/// Writes `W[n][t] = clamp(c_t) - clamp(c_{t-1})` with `c` the running sum
/// and the clamp onto fire `n`'s interval `[n beta, (n+1) beta]`. Given the
/// upstream gradient `dw` (same shape as `W`) this returns `dL/dalpha`.
pub(crate) fn weight_matrix_backward(
    weights: &[f64],
    beta: f64,
    num_fires: usize,
    dw: &Matrix,
) -> Vec<f64> {
    let frames = weights.len();
    let mut dc = vec![0.0; frames];
    let mut c = 0.0;
    for t in 0..frames {
        c += weights[t];
        let k = (c / beta).floor();
        if k < 0.0 {
            continue;
        }
        let n = k as usize;
        let lo = n as f64 * beta;
        if n < num_fires && c > lo && c < lo + beta {
            let next = if t + 1 < frames { dw.get(n, t + 1) } else { 0.0 };
            dc[t] = dw.get(n, t) - next;
        }
    }
    // dalpha_s = sum_{t >= s} dc_t
    let mut out = vec![0.0; frames];
    let mut run = 0.0;
    for t in (0..frames).rev() {
        run += dc[t];
        out[t] = run;
    }
    out
}

//! Inference and corpus-level scoring.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cif::{cif_integrate, dynamic_threshold, sum_alpha, FiringPlan};
use crate::config::ThresholdMode;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::metrics::{cer, ErrorCounts};
use crate::model::{Architecture, Model};
use crate::seq::{FeatSeq, Hypothesis, TokenId};
use crate::tensor::log_softmax_rows;

/// Audio duration represented by one feature frame.
pub const FRAME_SHIFT_SECONDS: f64 = 0.010;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArSearch {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold_mode: ThresholdMode,
    pub ar_search: ArSearch,
    /// Worker threads for evaluation; `1` runs inline.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Dynamic,
            ar_search: ArSearch::Greedy,
            threads: 1,
        }
    }
}

/// What happened inside one call to [`infer`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferTrace {
    pub decoder_passes: usize,
    /// Sum of the raw firing weights (NAR only).
    pub alpha_sum: f64,
    pub beta: Option<f64>,
    pub plan: Option<FiringPlan>,
    /// Output length before any decoding: fires for NAR, tokens for AR.
    pub predicted_len: usize,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

/// Decodes one utterance.
///
/// NAR: encode, raw firing weights, threshold, integrate-and-fire, one
/// decoder pass, per-position argmax. The dynamic threshold splits the raw
/// weight sum into exactly `ceil(sum)` equal parts, which is the same
/// partition rescaling the weights to that count with `beta = 1` would give.
///
/// AR: encode, then greedy or beam search with cached keys and values.
pub fn infer(
    model: &Model,
    feats: &FeatSeq,
    opts: &EvalOptions,
) -> Result<(Hypothesis, InferTrace)> {
    let mut trace = InferTrace::default();
    let t0 = Instant::now();
    let hidden = model.encode(feats)?;
    trace.encode_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let max_len = model.config().max_tokens;
    let hyp = match model.architecture() {
        Architecture::Ar => {
            let hyp = match opts.ar_search {
                ArSearch::Greedy => model.ar_greedy_decode(&hidden, max_len)?,
                ArSearch::Beam(w) => model.ar_beam_decode(&hidden, max_len, w)?,
            };
            trace.decoder_passes = (hyp.len() + 1).min(max_len);
            trace.predicted_len = hyp.len();
            hyp
        }
        Architecture::Nar => {
            let alpha = model.predict_alpha(&hidden)?;
            trace.alpha_sum = sum_alpha(&alpha);
            let beta = match opts.threshold_mode {
                ThresholdMode::Dynamic => match dynamic_threshold(&alpha) {
                    Ok(b) => b,
                    Err(Error::EmptyUtterance) => {
                        trace.decode_seconds = t1.elapsed().as_secs_f64();
                        return Ok((Hypothesis::empty(), trace));
                    }
                    Err(e) => return Err(e),
                },
                ThresholdMode::Fixed => 1.0,
            };
            trace.beta = Some(beta);
            let (emb, plan) = cif_integrate(&hidden, &alpha, beta)?;
            trace.predicted_len = plan.num_fires();
            trace.plan = Some(plan);
            if emb.valid_len() == 0 {
                trace.decode_seconds = t1.elapsed().as_secs_f64();
                return Ok((Hypothesis::empty(), trace));
            }
            let logits = model.decode_parallel(&emb, &hidden)?;
            trace.decoder_passes = 1;
            let logp = log_softmax_rows(&logits.valid());
            let tokens: Vec<TokenId> = (0..logp.rows()).map(|r| logp.argmax_row(r)).collect();
            let lps = tokens.iter().enumerate().map(|(r, &t)| logp.get(r, t)).collect();
            Hypothesis::new(tokens, lps)
        }
    };
    trace.decode_seconds = t1.elapsed().as_secs_f64();
    Ok((hyp, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttRecord {
    pub id: String,
    pub reference: Vec<TokenId>,
    pub hypothesis: Vec<TokenId>,
    pub predicted_len: usize,
    pub cer: f64,
    pub counts: ErrorCounts,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub architecture: Architecture,
    pub n_utterances: usize,
    pub ref_tokens: usize,
    pub cer: f64,
    /// Error counts divided by `ref_tokens`; they sum to `cer`.
    pub sub: f64,
    pub ins: f64,
    pub del: f64,
    /// Fraction of utterances whose predicted length equals the reference.
    pub length_accuracy: f64,
    /// Decode wall time over audio duration.
    pub rtf: f64,
    pub decode_seconds: f64,
    pub audio_seconds: f64,
    pub utterances: Vec<UttRecord>,
}

impl EvalReport {
    /// Substitutions as a share of all errors.
    pub fn substitution_share(&self) -> f64 {
        if self.cer > 0.0 {
            self.sub / self.cer
        } else {
            0.0
        }
    }
}

fn score(model: &Model, u: &Utterance, opts: &EvalOptions) -> Result<UttRecord> {
    let start = Instant::now();
    let (hyp, trace) = infer(model, &u.feats, opts)?;
    let seconds = start.elapsed().as_secs_f64();
    let (rate, counts) = cer(&u.tokens, &hyp.tokens)
        .map_err(|e| Error::Input(format!("{}: {e}", u.id)))?;
    Ok(UttRecord {
        id: u.id.clone(),
        reference: u.tokens.clone(),
        hypothesis: hyp.tokens,
        predicted_len: trace.predicted_len,
        cer: rate,
        counts,
        seconds,
    })
}

/// Scores `utts` and aggregates.
pub fn evaluate(model: &Model, utts: &[Utterance], opts: &EvalOptions) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let records: Vec<UttRecord> = if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| utts.par_iter().map(|u| score(model, u, opts)).collect::<Result<Vec<_>>>())?
    } else {
        utts.iter().map(|u| score(model, u, opts)).collect::<Result<_>>()?
    };
    Ok(aggregate(model.architecture(), utts, records))
}

fn aggregate(arch: Architecture, utts: &[Utterance], records: Vec<UttRecord>) -> EvalReport {
    let mut counts = ErrorCounts::default();
    let mut ref_tokens = 0;
    let mut frames = 0;
    let mut len_ok = 0;
    let mut decode_seconds = 0.0;
    for (u, r) in utts.iter().zip(&records) {
        counts.add(&r.counts);
        ref_tokens += r.reference.len();
        frames += u.num_frames();
        len_ok += usize::from(r.predicted_len == r.reference.len());
        decode_seconds += r.seconds;
    }
    let n = ref_tokens as f64;
    let audio_seconds = frames as f64 * FRAME_SHIFT_SECONDS;
    EvalReport {
        schema: 1,
        architecture: arch,
        n_utterances: records.len(),
        ref_tokens,
        cer: counts.total() as f64 / n,
        sub: counts.sub as f64 / n,
        ins: counts.ins as f64 / n,
        del: counts.del as f64 / n,
        length_accuracy: len_ok as f64 / records.len() as f64,
        rtf: decode_seconds / audio_seconds,
        decode_seconds,
        audio_seconds,
        utterances: records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::tensor::Matrix;

    fn utt(tokens: Vec<TokenId>, frames: usize) -> Utterance {
        Utterance {
            id: "u".into(),
            split: Split::Test,
            tokens,
            feats: FeatSeq::new(Matrix::zeros(frames, 2), frames).unwrap(),
        }
    }

    fn record(reference: Vec<TokenId>, hypothesis: Vec<TokenId>) -> UttRecord {
        let (rate, counts) = cer(&reference, &hypothesis).unwrap();
        UttRecord {
            id: "u".into(),
            predicted_len: hypothesis.len(),
            reference,
            hypothesis,
            cer: rate,
            counts,
            seconds: 0.5,
        }
    }

    #[test]
    fn perfect_hypotheses_score_zero() {
        let u = utt(vec![3, 4, 5], 10);
        let r = aggregate(Architecture::Nar, &[u], vec![record(vec![3, 4, 5], vec![3, 4, 5])]);
        assert_eq!((r.cer, r.sub, r.ins, r.del), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.length_accuracy, 1.0);
        assert!((r.rtf - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hand_built_errors_are_counted() {
        let u = utt(vec![3, 4, 5, 6], 10);
        let r = aggregate(
            Architecture::Nar,
            &[u],
            vec![record(vec![3, 4, 5, 6], vec![3, 9, 6])],
        );
        assert_eq!((r.sub, r.del, r.ins), (0.25, 0.25, 0.0));
        assert!((r.sub + r.ins + r.del - r.cer).abs() < 1e-15);
        assert_eq!(r.length_accuracy, 0.0);
    }
}

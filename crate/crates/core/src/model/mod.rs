//! Encoder, predictor network, parallel decoder and the autoregressive
//! baseline decoder.
//!
//! Both systems share the encoder layout. A [`Architecture::Nar`] model adds
//! the firing-weight predictor and a bidirectional decoder; an
//! [`Architecture::Ar`] model adds a causal decoder fed with shifted tokens.
//! Blocks are pre-norm multi-head self-attention plus feed-forward, with
//! sinusoidal positions added to the encoder input and to every decoder
//! input sequence.

mod blocks;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::Dropout;
use blocks::{DecoderLayerIds, EncoderLayerIds, LayerCache, LinearIds, NormIds};

use crate::autograd::{Tape, Var};
use crate::cif::AlphaSeq;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::seq::{
    EmbedRole, EmbedSeq, FeatSeq, HiddenSeq, Hypothesis, Logits, TokenId, BOS, EOS,
};
use crate::tensor::{log_softmax_rows, sinusoidal_positions, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Predictor plus bidirectional single-pass decoder.
    Nar,
    /// Causal decoder over previously emitted tokens.
    Ar,
}

#[derive(Debug, Clone)]
struct PredictorIds {
    conv1: LinearIds,
    conv2: LinearIds,
    proj: LinearIds,
}

#[derive(Debug, Clone)]
struct ModelIds {
    enc_in: LinearIds,
    enc_layers: Vec<EncoderLayerIds>,
    enc_norm: NormIds,
    embed: ParamId,
    predictor: Option<PredictorIds>,
    dec_layers: Vec<DecoderLayerIds>,
    dec_norm: NormIds,
    dec_out: LinearIds,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore,
    ids: ModelIds,
    positions: Matrix,
}

impl Model {
    /// Fresh parameters, drawn from `config.seed`.
    pub fn new(config: ModelConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let f = config.d_ffn;

        let enc_in = LinearIds::new(&mut store, "enc.input", config.feat_dim, d, &mut rng);
        let enc_layers = (0..config.n_enc_layers)
            .map(|l| EncoderLayerIds::new(&mut store, &format!("enc.{l}"), d, f, &mut rng))
            .collect();
        let enc_norm = NormIds::new(&mut store, "enc.norm", d);
        let embed = store.insert_uniform("embed", config.vocab_size, d, d, &mut rng);
        let predictor = match arch {
            Architecture::Nar => Some(PredictorIds {
                conv1: LinearIds::new(&mut store, "predictor.conv1", 3 * d, d, &mut rng),
                conv2: LinearIds::new(&mut store, "predictor.conv2", 3 * d, d, &mut rng),
                proj: LinearIds::new(&mut store, "predictor.proj", d, 1, &mut rng),
            }),
            Architecture::Ar => None,
        };
        let dec_layers = (0..config.n_dec_layers)
            .map(|l| DecoderLayerIds::new(&mut store, &format!("dec.{l}"), d, f, &mut rng))
            .collect();
        let dec_norm = NormIds::new(&mut store, "dec.norm", d);
        let dec_out = LinearIds::new(&mut store, "dec.out", d, config.vocab_size, &mut rng);

        let positions = sinusoidal_positions(config.max_frames.max(config.max_tokens + 1), d);
        Ok(Self {
            config,
            arch,
            params: store,
            ids: ModelIds {
                enc_in,
                enc_layers,
                enc_norm,
                embed,
                predictor,
                dec_layers,
                dec_norm,
                dec_out,
            },
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn position_rows(&self, n: usize) -> Matrix {
        if n <= self.positions.rows() {
            self.positions.head_rows(n)
        } else {
            sinusoidal_positions(n, self.config.d_model)
        }
    }

    fn check_feats(&self, feats: &FeatSeq) -> Result<()> {
        if feats.feat_dim() != self.config.feat_dim {
            return Err(Error::Config(format!(
                "feature dim {} does not match model feat_dim {}",
                feats.feat_dim(),
                self.config.feat_dim
            )));
        }
        if feats.valid_len() > self.config.max_frames {
            return Err(Error::Input(format!(
                "{} frames exceed max_frames {}",
                feats.valid_len(),
                self.config.max_frames
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    // ---- tape-level building blocks -------------------------------------

    /// Encoder over the unpadded `T x F` features. Returns `T x d`.
    pub fn encode_on(&self, t: &mut Tape<'_>, feats: &Matrix, d: &mut Option<Dropout<'_>>) -> Var {
        let x = t.constant(feats.clone());
        let x = self.ids.enc_in.apply(t, x);
        let pe = t.constant(self.position_rows(feats.rows()));
        let mut x = t.add(x, pe);
        x = blocks::drop(t, x, d);
        for layer in &self.ids.enc_layers {
            x = layer.apply(t, x, self.config.n_heads, d);
        }
        self.ids.enc_norm.apply(t, x)
    }

    /// Firing weights, `T x 1`, each in `(0, 1)`.
    pub fn predict_alpha_on(&self, t: &mut Tape<'_>, hidden: Var) -> Result<Var> {
        let p = self.ids.predictor.as_ref().ok_or_else(|| {
            Error::Config("autoregressive model has no firing-weight predictor".into())
        })?;
        let x = t.unfold3(hidden);
        let x = p.conv1.apply(t, x);
        let x = t.relu(x);
        let x = t.unfold3(x);
        let x = p.conv2.apply(t, x);
        let x = p.proj.apply(t, x);
        Ok(t.sigmoid(x))
    }

    /// Token table rows scaled by `sqrt(d_model)`.
    pub fn embed_on(&self, t: &mut Tape<'_>, tokens: &[TokenId]) -> Var {
        let table = t.param(self.ids.embed);
        t.embedding(table, tokens, (self.config.d_model as f64).sqrt())
    }

    fn decoder_on(
        &self,
        t: &mut Tape<'_>,
        emb: Var,
        memory: Var,
        causal: bool,
        d: &mut Option<Dropout<'_>>,
    ) -> Var {
        let n = t.value(emb).rows();
        let pe = t.constant(self.position_rows(n));
        let mut x = t.add(emb, pe);
        x = blocks::drop(t, x, d);
        for layer in &self.ids.dec_layers {
            x = layer.apply(t, x, memory, self.config.n_heads, causal, d);
        }
        let x = self.ids.dec_norm.apply(t, x);
        self.ids.dec_out.apply(t, x)
    }

    /// Bidirectional decoder: `N x vocab` logits for `N` input embeddings.
    pub fn decode_parallel_on(
        &self,
        t: &mut Tape<'_>,
        emb: Var,
        memory: Var,
        d: &mut Option<Dropout<'_>>,
    ) -> Var {
        self.decoder_on(t, emb, memory, false, d)
    }

    /// Causal decoder over `inputs` (normally `BOS` followed by the prefix).
    pub fn decode_causal_on(
        &self,
        t: &mut Tape<'_>,
        inputs: &[TokenId],
        memory: Var,
        d: &mut Option<Dropout<'_>>,
    ) -> Var {
        let emb = self.embed_on(t, inputs);
        self.decoder_on(t, emb, memory, true, d)
    }

    // ---- typed operations -----------------------------------------------

    /// Maps features to hidden representations. Padded rows of the result
    /// are zero and padded input rows are never read.
    pub fn encode(&self, feats: &FeatSeq) -> Result<HiddenSeq> {
        self.check_feats(feats)?;
        let mut t = Tape::new(&self.params);
        let h = t.no_grad(|t| self.encode_on(t, &feats.valid(), &mut None));
        let out = t.value(h).pad_rows(feats.data().rows());
        HiddenSeq::new(out, feats.valid_len())
    }

    pub fn predict_alpha(&self, hidden: &HiddenSeq) -> Result<AlphaSeq> {
        if hidden.data().cols() != self.config.d_model {
            return Err(Error::Config("hidden width does not match d_model".into()));
        }
        let mut t = Tape::new(&self.params);
        let h = t.constant(hidden.valid());
        let a = t.no_grad(|t| self.predict_alpha_on(t, h))?;
        let mut weights = t.value(a).data().to_vec();
        weights.resize(hidden.data().rows(), 0.0);
        AlphaSeq::new(weights, hidden.valid_len())
    }

    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Result<EmbedSeq> {
        self.check_tokens(tokens)?;
        let mut t = Tape::new(&self.params);
        let e = t.no_grad(|t| self.embed_on(t, tokens));
        EmbedSeq::new(t.value(e).clone(), tokens.len(), EmbedRole::Target)
    }

    /// Single decoder pass over acoustic or semantic embeddings.
    pub fn decode_parallel(&self, emb: &EmbedSeq, hidden: &HiddenSeq) -> Result<Logits> {
        if emb.role() == EmbedRole::Target {
            return Err(Error::Contract(
                "parallel decoder takes acoustic or semantic embeddings, not raw target embeddings"
                    .into(),
            ));
        }
        if self.arch != Architecture::Nar {
            return Err(Error::Config("autoregressive model has no parallel decoder".into()));
        }
        let mut t = Tape::new(&self.params);
        let e = t.constant(emb.valid());
        let h = t.constant(hidden.valid());
        let logits = t.no_grad(|t| self.decode_parallel_on(t, e, h, &mut None));
        let out = t.value(logits).pad_rows(emb.data().rows());
        Logits::new(out, emb.valid_len())
    }

    /// Teacher-forced causal logits for `inputs`, computed in one pass.
    pub fn decode_causal(&self, inputs: &[TokenId], hidden: &HiddenSeq) -> Result<Logits> {
        self.require_ar()?;
        self.check_tokens(inputs)?;
        let mut t = Tape::new(&self.params);
        let h = t.constant(hidden.valid());
        let logits = t.no_grad(|t| self.decode_causal_on(t, inputs, h, &mut None));
        Logits::new(t.value(logits).clone(), inputs.len())
    }

    fn require_ar(&self) -> Result<()> {
        if self.arch != Architecture::Ar {
            return Err(Error::Config("parallel model has no causal decoder".into()));
        }
        Ok(())
    }

    fn init_caches(&self, memory: &Matrix) -> Vec<LayerCache> {
        self.ids
            .dec_layers
            .iter()
            .map(|l| l.init_cache(&self.params, memory))
            .collect()
    }

    /// Log-probabilities over the vocabulary for the next position, given
    /// the newest input token. Updates the caches.
    fn ar_step(&self, token: TokenId, pos: usize, caches: &mut [LayerCache]) -> Vec<f64> {
        let d = self.config.d_model;
        let scale = (d as f64).sqrt();
        let table = self.params.get(self.ids.embed);
        let pe = if pos < self.positions.rows() {
            self.positions.row(pos).to_vec()
        } else {
            sinusoidal_positions(pos + 1, d).row(pos).to_vec()
        };
        let row: Vec<f64> = table
            .row(token)
            .iter()
            .zip(&pe)
            .map(|(e, p)| e * scale + p)
            .collect();
        let mut x = Matrix::from_vec(1, d, row);
        for (layer, cache) in self.ids.dec_layers.iter().zip(caches.iter_mut()) {
            x = layer.step(&self.params, &x, cache, self.config.n_heads);
        }
        let x = self.ids.dec_norm.apply_plain(&self.params, &x);
        let logits = self.ids.dec_out.apply_plain(&self.params, &x);
        log_softmax_rows(&logits).into_vec()
    }

    /// Greedy left-to-right decoding with key/value caching. Stops at EOS
    /// or after `max_len` tokens.
    pub fn ar_greedy_decode(&self, hidden: &HiddenSeq, max_len: usize) -> Result<Hypothesis> {
        self.greedy(hidden, max_len, true)
    }

    /// Greedy decoding that never stops early: EOS is excluded from the
    /// argmax, so exactly `len` steps run. Used to time the decoder at a
    /// fixed output length.
    pub fn ar_decode_fixed_length(&self, hidden: &HiddenSeq, len: usize) -> Result<Hypothesis> {
        self.greedy(hidden, len, false)
    }

    fn greedy(&self, hidden: &HiddenSeq, max_len: usize, stop_at_eos: bool) -> Result<Hypothesis> {
        self.require_ar()?;
        if max_len == 0 {
            return Ok(Hypothesis::empty());
        }
        let mut caches = self.init_caches(&hidden.valid());
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        let mut prev = BOS;
        for pos in 0..max_len {
            let mut lp = self.ar_step(prev, pos, &mut caches);
            if !stop_at_eos {
                let keep = lp[EOS];
                lp[EOS] = f64::NEG_INFINITY;
                let next = argmax(&lp);
                lp[EOS] = keep;
                tokens.push(next);
                log_probs.push(lp[next]);
                prev = next;
                continue;
            }
            let next = argmax(&lp);
            if next == EOS {
                break;
            }
            tokens.push(next);
            log_probs.push(lp[next]);
            prev = next;
        }
        Ok(Hypothesis::new(tokens, log_probs))
    }

    /// Beam search (width 1 to 4). Finished hypotheses are ranked by total
    /// log-probability.
    pub fn ar_beam_decode(
        &self,
        hidden: &HiddenSeq,
        max_len: usize,
        width: usize,
    ) -> Result<Hypothesis> {
        self.require_ar()?;
        if !(1..=4).contains(&width) {
            return Err(Error::Config(format!("beam width must be 1..=4, got {width}")));
        }
        if max_len == 0 {
            return Ok(Hypothesis::empty());
        }
        struct Beam {
            tokens: Vec<TokenId>,
            log_probs: Vec<f64>,
            score: f64,
            caches: Vec<LayerCache>,
        }
        let mut beams = vec![Beam {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            score: 0.0,
            caches: self.init_caches(&hidden.valid()),
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for pos in 0..max_len {
            let mut expansions: Vec<(f64, usize, TokenId, f64)> = Vec::new();
            for (b, beam) in beams.iter_mut().enumerate() {
                let prev = beam.tokens.last().copied().unwrap_or(BOS);
                let lp = self.ar_step(prev, pos, &mut beam.caches);
                for (tok, &l) in lp.iter().enumerate() {
                    expansions.push((beam.score + l, b, tok, l));
                }
            }
            expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut next = Vec::new();
            for (score, b, tok, l) in expansions {
                if next.len() >= width {
                    break;
                }
                let parent = &beams[b];
                if tok == EOS {
                    let mut h = Hypothesis::new(parent.tokens.clone(), parent.log_probs.clone());
                    h.score = score;
                    finished.push(h);
                    continue;
                }
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                let mut log_probs = parent.log_probs.clone();
                log_probs.push(l);
                next.push(Beam {
                    tokens,
                    log_probs,
                    score,
                    caches: parent.caches.clone(),
                });
            }
            let best_live = next.first().map_or(f64::NEG_INFINITY, |b| b.score);
            let best_done = finished
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            beams = next;
            if beams.is_empty() || best_done >= best_live {
                break;
            }
        }
        finished.extend(beams.into_iter().map(|b| {
            let mut h = Hypothesis::new(b.tokens, b.log_probs);
            h.score = b.score;
            h
        }));
        Ok(finished
            .into_iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .unwrap_or_default())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

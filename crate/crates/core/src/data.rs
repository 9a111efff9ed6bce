//! Synthetic pseudo-speech corpus.
//!
//! Every real token owns an acoustic prototype vector (or shares one with
//! its homophones when `acoustic_classes > 0`). An utterance renders each
//! token as a run of 2 to 5 noisy copies of its prototype, so the frame
//! count per token varies the way speaking rate does. In bigram-constrained
//! mode a fixed random successor table makes neighbouring tokens predictive
//! of each other.
//!
//! File layout: a JSON header line, then per utterance a JSON line
//! `{"id","split","tokens","T","F"}` followed by `T*F` little-endian `f32`.
//! Features are rounded to `f32` when generated so the round trip is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{DependencyMode, SynthConfig};
use crate::error::{Error, Result};
use crate::seq::{FeatSeq, TokenId, FIRST_TOKEN, PAD};
use crate::tensor::Matrix;

const FORMAT: &str = "paraformer-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    /// Real tokens only, no BOS/EOS.
    pub tokens: Vec<TokenId>,
    pub feats: FeatSeq,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.feats.valid_len()
    }
}

/// The fixed parts of the generator, all drawn from `cfg.seed`.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: SynthConfig,
    prototypes: Matrix,
    successor: Vec<TokenId>,
}

impl Synthesizer {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_70c3);
        let n_real = cfg.num_real_tokens();
        let n_proto = if cfg.acoustic_classes == 0 {
            n_real
        } else {
            cfg.acoustic_classes.min(n_real)
        };
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let protos: Vec<f64> = (0..n_proto * cfg.feat_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let prototypes = Matrix::from_vec(n_proto, cfg.feat_dim, protos);

        // A random cyclic successor order, so every token is some token's
        // preferred successor. With audible boundaries, neighbours in the
        // cycle never share a prototype.
        let mut order: Vec<TokenId> = (FIRST_TOKEN..cfg.vocab_size).collect();
        let class = |t: TokenId| (t - FIRST_TOKEN) % n_proto;
        let mut tries = 0;
        loop {
            order.shuffle(&mut rng);
            let n = order.len();
            if !cfg.audible_boundaries || (0..n).all(|i| class(order[i]) != class(order[(i + 1) % n])) {
                break;
            }
            tries += 1;
            if tries == 100_000 {
                return Err(Error::Config(format!(
                    "cannot order {n} tokens over {n_proto} acoustic classes without \
                     neighbours sharing one; raise synth.acoustic_classes"
                )));
            }
        }
        let mut successor = vec![PAD; cfg.vocab_size];
        for i in 0..order.len() {
            successor[order[i]] = order[(i + 1) % order.len()];
        }
        Ok(Self {
            cfg: cfg.clone(),
            prototypes,
            successor,
        })
    }

    fn same_sound(&self, a: TokenId, b: TokenId) -> bool {
        let n = self.prototypes.rows();
        self.cfg.audible_boundaries && (a - FIRST_TOKEN) % n == (b - FIRST_TOKEN) % n
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Prototype row for a real token.
    pub fn prototype(&self, token: TokenId) -> &[f64] {
        self.prototypes
            .row((token - FIRST_TOKEN) % self.prototypes.rows())
    }

    /// Preferred successor of `token` in bigram-constrained mode.
    pub fn successor(&self, token: TokenId) -> TokenId {
        self.successor[token]
    }

    fn draw_tokens(&self, rng: &mut impl Rng) -> Vec<TokenId> {
        let cfg = &self.cfg;
        let n = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let uniform = |rng: &mut dyn rand::RngCore| rng.random_range(FIRST_TOKEN..cfg.vocab_size);
        let mut tokens = Vec::with_capacity(n);
        tokens.push(uniform(rng));
        for i in 1..n {
            let next = match cfg.dependency_mode {
                DependencyMode::BigramConstrained if rng.random::<f64>() < cfg.bigram_strength => {
                    self.successor[tokens[i - 1]]
                }
                // Free transitions avoid the previous token's prototype too.
                _ => loop {
                    let t = uniform(rng);
                    if !self.same_sound(t, tokens[i - 1]) {
                        break t;
                    }
                },
            };
            tokens.push(next);
        }
        tokens
    }

    /// Renders `tokens` into frames.
    pub fn render(&self, tokens: &[TokenId], rng: &mut impl Rng) -> Result<FeatSeq> {
        let cfg = &self.cfg;
        let noise = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| Error::Config(format!("synth.noise_std: {e}")))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for &tok in tokens {
            let run = rng.random_range(cfg.min_frames_per_token..=cfg.max_frames_per_token);
            let proto = self.prototype(tok);
            for _ in 0..run {
                data.extend(
                    proto
                        .iter()
                        .map(|&p| f64::from((p + noise.sample(rng)) as f32)),
                );
            }
            frames += run;
        }
        FeatSeq::new(Matrix::from_vec(frames, cfg.feat_dim, data), frames)
    }

    pub fn gen_utterance(&self, id: String, split: Split, rng: &mut impl Rng) -> Result<Utterance> {
        let tokens = self.draw_tokens(rng);
        let feats = self.render(&tokens, rng)?;
        Ok(Utterance {
            id,
            split,
            tokens,
            feats,
        })
    }

    /// Utterances with exactly `n_tokens` tokens each, for length-scaling
    /// measurements.
    pub fn gen_fixed_length(
        &self,
        n_tokens: usize,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Utterance>> {
        let mut fixed = self.clone();
        fixed.cfg.min_tokens = n_tokens;
        fixed.cfg.max_tokens = n_tokens;
        (0..count)
            .map(|i| fixed.gen_utterance(format!("len{n_tokens}-{i:05}"), Split::Test, rng))
            .collect()
    }
}

/// One utterance drawn with a throwaway synthesizer built from `cfg`.
pub fn gen_utterance(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Utterance> {
    Synthesizer::new(cfg)?.gen_utterance("utt".into(), Split::Train, rng)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub config: Option<SynthConfig>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    /// Train, dev and test splits drawn from independent streams of
    /// `cfg.seed`.
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let synth = Synthesizer::new(cfg)?;
        let mut utterances = Vec::with_capacity(cfg.n_train + cfg.n_dev + cfg.n_test);
        for (k, (split, n)) in [
            (Split::Train, cfg.n_train),
            (Split::Dev, cfg.n_dev),
            (Split::Test, cfg.n_test),
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64 + 1);
            for i in 0..n {
                utterances.push(synth.gen_utterance(
                    format!("{}-{i:05}", split.name()),
                    split,
                    &mut rng,
                )?);
            }
        }
        Ok(Self {
            config: Some(cfg.clone()),
            utterances,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<Utterance> {
        self.split(split).into_iter().cloned().collect()
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.feats.feat_dim())
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    config: Option<SynthConfig>,
    counts: Counts,
}

#[derive(Serialize, Deserialize, Default)]
struct Counts {
    train: usize,
    dev: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    id: String,
    split: Split,
    tokens: Vec<TokenId>,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "F")]
    feat_dim: usize,
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut counts = Counts::default();
    for u in &ds.utterances {
        match u.split {
            Split::Train => counts.train += 1,
            Split::Dev => counts.dev += 1,
            Split::Test => counts.test += 1,
        }
    }
    let header = FileHeader {
        format: FORMAT.into(),
        version: VERSION,
        config: ds.config.clone(),
        counts,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for u in &ds.utterances {
        let rec = RecordHeader {
            id: u.id.clone(),
            split: u.split,
            tokens: u.tokens.clone(),
            frames: u.feats.valid_len(),
            feat_dim: u.feats.feat_dim(),
        };
        out.extend(serde_json::to_vec(&rec).expect("record serializes"));
        out.push(b'\n');
        for &v in u.feats.valid().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn take_line(bytes: &[u8], pos: usize) -> Option<&[u8]> {
    let rest = &bytes[pos..];
    rest.iter().position(|&b| b == b'\n').map(|i| &rest[..i])
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Ok(Dataset::default());
    }
    let parse_err = |offset: usize, message: String| Error::Parse {
        offset: offset as u64,
        message,
    };
    let line = take_line(bytes, 0)
        .ok_or_else(|| parse_err(0, "dataset header is not newline-terminated".into()))?;
    let header: FileHeader = serde_json::from_slice(line)
        .map_err(|e| parse_err(0, format!("dataset header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(parse_err(
            0,
            format!("unsupported dataset {} v{}", header.format, header.version),
        ));
    }
    let mut pos = line.len() + 1;
    let mut utterances = Vec::new();
    while pos < bytes.len() {
        let index = utterances.len();
        let line = take_line(bytes, pos).ok_or_else(|| {
            parse_err(pos, format!("record {index}: header line is incomplete"))
        })?;
        let rec: RecordHeader = serde_json::from_slice(line)
            .map_err(|e| parse_err(pos, format!("record {index}: {e}")))?;
        pos += line.len() + 1;
        let n = rec.frames * rec.feat_dim;
        let end = pos + 4 * n;
        if end > bytes.len() {
            return Err(parse_err(
                bytes.len(),
                format!(
                    "record {index} ({}): expected {} feature bytes, found {}",
                    rec.id,
                    4 * n,
                    bytes.len() - pos
                ),
            ));
        }
        let data = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect();
        let feats = FeatSeq::new(Matrix::from_vec(rec.frames, rec.feat_dim, data), rec.frames)
            .map_err(|e| parse_err(pos, format!("record {index} ({}): {e}", rec.id)))?;
        pos = end;
        utterances.push(Utterance {
            id: rec.id,
            split: rec.split,
            tokens: rec.tokens,
            feats,
        });
    }
    Ok(Dataset {
        config: header.config,
        utterances,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&dataset_to_bytes(ds))
        .map_err(|e| Error::file(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    dataset_from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadPolicy {
    /// Keep dataset order.
    #[default]
    InOrder,
    /// Bucket by frame count so padding stays small.
    SortByLength,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices into the utterance slice the batch was built from.
    pub indices: Vec<usize>,
    /// Each padded to the longest utterance in the batch.
    pub feats: Vec<FeatSeq>,
    /// Each padded with `PAD` to the longest target in the batch.
    pub tokens: Vec<Vec<TokenId>>,
    pub frame_lens: Vec<usize>,
    pub token_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded target of item `i`.
    pub fn target(&self, i: usize) -> &[TokenId] {
        &self.tokens[i][..self.token_lens[i]]
    }
}

pub fn make_batches(utts: &[Utterance], batch_size: usize, policy: PadPolicy) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    if policy == PadPolicy::SortByLength {
        order.sort_by_key(|&i| utts[i].num_frames());
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let max_t = idx.iter().map(|&i| utts[i].num_frames()).max().unwrap_or(0);
            let max_n = idx.iter().map(|&i| utts[i].tokens.len()).max().unwrap_or(0);
            let feats = idx
                .iter()
                .map(|&i| {
                    let f = &utts[i].feats;
                    FeatSeq::new(f.valid().pad_rows(max_t), f.valid_len())
                })
                .collect::<Result<Vec<_>>>()?;
            let tokens = idx
                .iter()
                .map(|&i| {
                    let mut t = utts[i].tokens.clone();
                    t.resize(max_n, PAD);
                    t
                })
                .collect();
            Ok(Batch {
                indices: idx.to_vec(),
                feats,
                tokens,
                frame_lens: idx.iter().map(|&i| utts[i].num_frames()).collect(),
                token_lens: idx.iter().map(|&i| utts[i].tokens.len()).collect(),
            })
        })
        .collect()
}

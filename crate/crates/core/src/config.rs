//! Configuration types and the TOML experiment file.
//!
//! An experiment file has three tables, `[model]`, `[synth]` and `[train]`,
//! with the training options nested further (`[train.glm]`, `[train.loss]`,
//! `[train.mwer]`, `[train.schedule]`). Any key can be overridden with a
//! dotted path such as `train.glm.lambda=0.5`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Includes the reserved PAD/BOS/EOS ids.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            feat_dim: 16,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 4,
            d_ffn: 128,
            dropout: 0.0,
            max_frames: 256,
            max_tokens: 40,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("feat_dim", self.feat_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ffn", self.d_ffn),
            ("max_frames", self.max_frames),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "model.vocab_size must be at least 4, got {}",
                self.vocab_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyMode {
    Independent,
    BigramConstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Includes the reserved ids; real tokens are `3..vocab_size`.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise_std: f64,
    /// Real tokens share this many acoustic prototypes (`(token - 3) % n`).
    /// `0` gives every token its own prototype.
    pub acoustic_classes: usize,
    /// Probability that a token is followed by its preferred successor in
    /// bigram-constrained mode.
    pub bigram_strength: f64,
    /// Neighbouring tokens never share a prototype, so every token boundary
    /// shows in the features. Off gives plain uniform draws.
    pub audible_boundaries: bool,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
    pub dependency_mode: DependencyMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            feat_dim: 16,
            min_tokens: 5,
            max_tokens: 12,
            min_frames_per_token: 2,
            max_frames_per_token: 5,
            noise_std: 0.5,
            acoustic_classes: 8,
            bigram_strength: 0.9,
            audible_boundaries: true,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            seed: 7,
            dependency_mode: DependencyMode::BigramConstrained,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("synth.vocab_size must be at least 4".into()));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("synth.feat_dim must be at least 1".into()));
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return Err(Error::Config(format!(
                "synth token range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.min_frames_per_token == 0 || self.max_frames_per_token < self.min_frames_per_token
        {
            return Err(Error::Config(format!(
                "synth frames-per-token range {}..={} is invalid",
                self.min_frames_per_token, self.max_frames_per_token
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("synth.noise_std must be >= 0".into()));
        }
        if self.dependency_mode == DependencyMode::BigramConstrained && self.vocab_size < 6 {
            return Err(Error::Config(
                "bigram-constrained mode needs synth.vocab_size >= 6".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bigram_strength) {
            return Err(Error::Config("synth.bigram_strength must be in [0, 1]".into()));
        }
        if self.audible_boundaries && (self.num_real_tokens() < 2 || self.acoustic_classes == 1) {
            return Err(Error::Config(
                "synth.audible_boundaries needs at least two distinct prototypes".into(),
            ));
        }
        Ok(())
    }

    pub fn num_real_tokens(&self) -> usize {
        self.vocab_size - crate::seq::FIRST_TOKEN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Paraformer,
    VanillaNar,
    Ar,
}

impl TrainMode {
    pub fn is_nar(self) -> bool {
        !matches!(self, TrainMode::Ar)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Paraformer => "paraformer",
            TrainMode::VanillaNar => "vanilla_nar",
            TrainMode::Ar => "ar",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paraformer" => Ok(TrainMode::Paraformer),
            "vanilla_nar" => Ok(TrainMode::VanillaNar),
            "ar" => Ok(TrainMode::Ar),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected paraformer, vanilla_nar or ar)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `beta = S / ceil(S)`.
    Dynamic,
    /// `beta = 1`, trailing partial fire dropped.
    #[serde(rename = "fixed_1.0")]
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub peak_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 400,
            peak_lr: 1e-3,
        }
    }
}

impl LrSchedule {
    /// Linear warmup to `peak_lr`, then `peak_lr * sqrt(warmup / step)`.
    /// `step` counts from 1.
    pub fn lr(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        if step < warm {
            self.peak_lr * step / warm
        } else {
            self.peak_lr * (warm / step).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlmConfig {
    pub lambda: f64,
}

impl Default for GlmConfig {
    fn default() -> Self {
        Self { lambda: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwerConfig {
    pub enabled: bool,
    /// First epoch (0-based) with the MWER term switched on. `None` means
    /// the final quarter of training.
    pub enabled_after_epoch: Option<usize>,
    pub n_cand: usize,
    pub p_mask: f64,
}

impl Default for MwerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            enabled_after_epoch: None,
            n_cand: 4,
            p_mask: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub schedule: LrSchedule,
    pub glm: GlmConfig,
    pub loss: LossConfig,
    pub mwer: MwerConfig,
    pub threshold_mode: ThresholdMode,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Paraformer,
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            schedule: LrSchedule::default(),
            glm: GlmConfig::default(),
            loss: LossConfig::default(),
            mwer: MwerConfig::default(),
            threshold_mode: ThresholdMode::Dynamic,
            grad_clip: 5.0,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.loss.gamma > 0.0) {
            return Err(Error::Config("train.loss.gamma must be positive".into()));
        }
        if !(self.schedule.peak_lr > 0.0) {
            return Err(Error::Config("train.schedule.peak_lr must be positive".into()));
        }
        if self.mode == TrainMode::Paraformer {
            if !(self.glm.lambda >= 0.0) {
                return Err(Error::Config("train.glm.lambda must be >= 0".into()));
            }
            if self.mwer.enabled && self.mwer.n_cand < 2 {
                return Err(Error::Config("train.mwer.n_cand must be at least 2".into()));
            }
            if !(0.0..=1.0).contains(&self.mwer.p_mask) {
                return Err(Error::Config("train.mwer.p_mask must be in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Whether the MWER term is active in `epoch` (0-based).
    pub fn mwer_active(&self, epoch: usize) -> bool {
        if self.mode != TrainMode::Paraformer || !self.mwer.enabled {
            return false;
        }
        let start = self
            .mwer
            .enabled_after_epoch
            .unwrap_or_else(|| self.epochs - self.epochs / 4);
        epoch >= start
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != self.synth.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} differs from synth.vocab_size {}",
                self.model.vocab_size, self.synth.vocab_size
            )));
        }
        if self.model.feat_dim != self.synth.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim {} differs from synth.feat_dim {}",
                self.model.feat_dim, self.synth.feat_dim
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML scalar, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let value = parse_scalar(raw.trim());
    let (last, parents) = keys.split_last().expect("split yields one element");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {k} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn model_invariants() {
        let mut m = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
        m.n_heads = 2;
        m.validate().unwrap();
        m.vocab_size = 3;
        assert!(m.validate().is_err());
        m.vocab_size = 4;
        m.dropout = 1.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn bigram_mode_needs_six_symbols() {
        let s = SynthConfig {
            vocab_size: 5,
            ..SynthConfig::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let text = "[train]\nepochs = 3\n";
        let cfg = ExperimentConfig::from_toml_str(
            text,
            &[
                "train.glm.lambda=0.5".into(),
                "train.mode=vanilla_nar".into(),
                "synth.noise_std=0.25".into(),
                "train.threshold_mode=fixed_1.0".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.glm.lambda, 0.5);
        assert_eq!(cfg.train.mode, TrainMode::VanillaNar);
        assert_eq!(cfg.synth.noise_std, 0.25);
        assert_eq!(cfg.train.threshold_mode, ThresholdMode::Fixed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[train]\nepoch = 3\n", &[]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            warmup_steps: 100,
            peak_lr: 1e-3,
        };
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
        assert!((s.lr(100) - 1e-3).abs() < 1e-15);
        assert!((s.lr(400) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn mwer_defaults_to_final_quarter() {
        let t = TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        };
        assert!(!t.mwer_active(5));
        assert!(t.mwer_active(6));
        let v = TrainConfig {
            mode: TrainMode::VanillaNar,
            ..t
        };
        assert!(!v.mwer_active(7));
    }
}

//! Toy-scale Paraformer: a single-step non-autoregressive encoder-decoder
//! with a continuous integrate-and-fire length predictor, glancing sampler
//! and MWER fine-tuning, next to an autoregressive baseline.
//!
//! Everything runs on the CPU in `f64` through a small reverse-mode tape
//! ([`autograd`]). The typed per-utterance operations live on
//! [`model::Model`]; training and evaluation drivers live in [`train`] and
//! [`eval`].

pub mod autograd;
pub mod bench;
pub mod cif;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod glm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seq;
pub mod tensor;
pub mod train;

pub use config::{ExperimentConfig, ModelConfig, SynthConfig, TrainConfig, TrainMode};
pub use error::{Error, Result};
pub use model::{Architecture, Model};

//! Generative pre-training of per-region forecaster parameters.
//!
//! Source-city regions each get their own small forecaster ([`predictor`]).
//! The optimised weights are cut into fixed-width tokens ([`tokenizer`]) and a
//! prompt-conditioned transformer ([`denoiser`]) learns to denoise them
//! ([`diffusion`]). Region prompts ([`prompt`]) combine a knowledge-graph
//! embedding with a masked-autoencoder summary of a few days of flow, so a
//! data-poor target city can be given forecaster weights straight from noise.
//! [`harness`] strings the stages together.

pub mod autograd;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod harness;
pub mod predictor;
pub mod prompt;
pub mod stgraph;
pub mod store;
pub mod tokenizer;

pub use denoiser::{DenoiserConfig, Strategy};
pub use diffusion::{DiffusionConfig, DiffusionModel, NoiseSchedule};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, RunReport};
pub use predictor::{CheckpointRecord, LayerDescriptor, LayerKind, PredictorConfig};
pub use prompt::{PromptConfig, PromptMode, RegionPrompt, UKGTriple};
pub use stgraph::{SpatioTemporalGraph, SyntheticCitySpec, TimeSpan, WindowedSample};
pub use tokenizer::{NormStats, TokenLayout, TokenSequence};

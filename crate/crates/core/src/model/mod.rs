//! Seeded toy transformers: vision encoder, language decoder and the
//! diffusion action decoder, all issued as substrate commands.

mod action;
mod config;
mod language;
mod layers;
mod vision;
mod weights;

use std::sync::Arc;

use thiserror::Error;

use crate::kv::KvError;
use crate::substrate::{BufferId, Substrate, SubstrateError};

pub use action::{
    initial_actions, ActionSequence, ActionStep, DiffusionOutput, Executor, IterationMode, IterationTrace,
};
pub use config::{patch_features, ModelConfig, Vocab, ACTION_STEPS, TRAJECTORY_BINS};
pub use language::{sample_token, DecodeOptions, Generation, PrefillOutput, SampleMode, TokenSampler};
pub use vision::{patchify, FrameSet, Patches, Visual, CAMERAS, TIMESTEPS};
pub use weights::{sinusoidal_table, BlockWeights, BoundWeights, ModelWeights, Tensor, INIT_RANGE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad input shape: {0}")]
    Shape(String),
    #[error("logits contain NaN")]
    NanLogits,
    #[error("lane count mismatch: expected {expected}, got {got}")]
    LaneMismatch { expected: usize, got: usize },
    #[error("KV cache already holds {0} tokens; prefill needs an empty cache")]
    CacheNotEmpty(usize),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
}

/// A substrate with the model weights bound into it.
///
/// Weights are shared immutably; everything mutable lives in the substrate
/// and in per-run caches, so independent runtimes can run in parallel.
#[derive(Debug)]
pub struct ModelRuntime {
    pub sub: Substrate,
    weights: Arc<ModelWeights>,
    bound: BoundWeights,
}

impl ModelRuntime {
    pub fn new(weights: Arc<ModelWeights>) -> Result<Self, ModelError> {
        Self::with_substrate(weights, Substrate::new())
    }

    pub fn with_substrate(weights: Arc<ModelWeights>, mut sub: Substrate) -> Result<Self, ModelError> {
        weights.config.validate()?;
        let bound = weights.bind(&mut sub)?;
        Ok(Self { sub, weights, bound })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }

    /// Copies the first `rows` rows of a `[.., width]` buffer to the host.
    fn read_rows(&self, id: BufferId, rows: usize, width: usize) -> Result<Vec<f32>, ModelError> {
        Ok(self.sub.read(id)?[..rows * width].to_vec())
    }
}

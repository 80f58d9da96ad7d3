use serde::{Deserialize, Serialize};

use super::ModelError;

/// Number of (acceleration, curvature) steps in an action sequence.
pub const ACTION_STEPS: usize = 64;

/// Pixel values per patch for RGB frames.
pub fn patch_features(patch_size: usize) -> usize {
    patch_size * patch_size * 3
}

/// Architecture and size of the toy model. Defaults are desk-scale; the
/// reference system uses 27 vision blocks and 36 decoder blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision_blocks: usize,
    /// Shared by the language decoder and the action decoder.
    pub decoder_blocks: usize,
    pub hidden_dim: usize,
    pub action_hidden_dim: usize,
    /// Key/value width per token, shared by both decoders.
    pub kv_dim: usize,
    pub heads: usize,
    /// Includes the text, trajectory and control tokens.
    pub vocab_size: usize,
    pub patch_size: usize,
    pub action_steps: usize,
    pub diffusion_iters: usize,
    pub update_scale: f32,
    pub max_new_tokens: usize,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision_blocks: 4,
            decoder_blocks: 6,
            hidden_dim: 64,
            action_hidden_dim: 32,
            kv_dim: 32,
            heads: 4,
            vocab_size: 512,
            patch_size: 14,
            action_steps: ACTION_STEPS,
            diffusion_iters: 10,
            update_scale: 0.1,
            max_new_tokens: 256,
            weight_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.action_steps != ACTION_STEPS {
            return bad(format!(
                "action_steps must be {ACTION_STEPS}, got {}",
                self.action_steps
            ));
        }
        if self.diffusion_iters == 0 {
            return bad("diffusion_iters must be at least 1".into());
        }
        if self.update_scale.is_nan() || self.update_scale <= 0.0 {
            return bad(format!("update_scale must be positive, got {}", self.update_scale));
        }
        if self.heads == 0 || !self.kv_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "kv_dim {} is not divisible by heads {}",
                self.kv_dim, self.heads
            ));
        }
        if self.decoder_blocks == 0 || self.hidden_dim == 0 || self.action_hidden_dim == 0 {
            return bad("block counts and widths must be non-zero".into());
        }
        if self.patch_size == 0 {
            return bad("patch_size must be non-zero".into());
        }
        if self.vocab_size < Vocab::min_size() {
            return bad(format!(
                "vocab_size {} too small, need at least {}",
                self.vocab_size,
                Vocab::min_size()
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.kv_dim / self.heads
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }
}

/// Bins per pose component in the trajectory vocabulary.
pub const TRAJECTORY_BINS: usize = 32;

/// Partition of token ids.
///
/// `0` is the image placeholder, `1` terminates generation, text ids follow,
/// and the top `3 * TRAJECTORY_BINS` ids hold the x, y and yaw bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub const IMAGE_PLACEHOLDER: u32 = 0;
    pub const TERMINATION: u32 = 1;
    pub const TEXT_START: u32 = 2;

    pub fn new(size: usize) -> Self {
        Self { size }
    }

    /// Smallest vocabulary with room for a handful of text ids.
    pub fn min_size() -> usize {
        Self::TEXT_START as usize + 3 * TRAJECTORY_BINS + 16
    }

    pub fn text_end(&self) -> u32 {
        (self.size - 3 * TRAJECTORY_BINS) as u32
    }

    pub fn text_len(&self) -> usize {
        (self.text_end() - Self::TEXT_START) as usize
    }

    /// First id of the bins for pose component `component` (0 = x, 1 = y, 2 = yaw).
    pub fn trajectory_base(&self, component: usize) -> u32 {
        self.text_end() + (component * TRAJECTORY_BINS) as u32
    }

    pub fn is_trajectory(&self, id: u32) -> bool {
        id >= self.text_end() && (id as usize) < self.size
    }
}

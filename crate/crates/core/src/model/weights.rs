use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{patch_features, ModelConfig, ACTION_STEPS};
use super::ModelError;
use crate::substrate::{BufferId, Substrate, SubstrateError};

/// Half-width of the uniform weight initialisation range.
pub const INIT_RANGE: f32 = 0.05;

/// Host tensor with shared, immutable storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Arc<[f32]>,
}

impl Tensor {
    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n].into(),
        }
    }

    fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        Self {
            shape: shape.to_vec(),
            data: data.into(),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data: data.into(),
        }
    }
}

/// Pre-LN transformer block: attention then a 4x GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `[hidden, kv_dim]`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[kv_dim, hidden]`
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// `[hidden, 4 * hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[4 * hidden, hidden]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockWeights {
    fn random(hidden: usize, kv_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mlp = 4 * hidden;
        Self {
            ln1_gamma: Tensor::filled(&[hidden], 1.0),
            ln1_beta: Tensor::filled(&[hidden], 0.0),
            wq: Tensor::uniform(&[hidden, kv_dim], rng),
            wk: Tensor::uniform(&[hidden, kv_dim], rng),
            wv: Tensor::uniform(&[hidden, kv_dim], rng),
            wo: Tensor::uniform(&[kv_dim, hidden], rng),
            ln2_gamma: Tensor::filled(&[hidden], 1.0),
            ln2_beta: Tensor::filled(&[hidden], 0.0),
            w1: Tensor::uniform(&[hidden, mlp], rng),
            b1: Tensor::uniform(&[mlp], rng),
            w2: Tensor::uniform(&[mlp, hidden], rng),
            b2: Tensor::uniform(&[hidden], rng),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }
}

/// All parameters of the vision encoder, language decoder and action model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `[patch_features, hidden]`
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub vision_blocks: Vec<BlockWeights>,
    pub vision_ln_gamma: Tensor,
    pub vision_ln_beta: Tensor,
    /// `[vocab, hidden]`
    pub embed: Tensor,
    pub language_blocks: Vec<BlockWeights>,
    pub language_ln_gamma: Tensor,
    pub language_ln_beta: Tensor,
    /// `[hidden, vocab]`
    pub lm_head: Tensor,
    /// `[2, action_hidden]`
    pub action_in_w: Tensor,
    pub action_in_b: Tensor,
    pub action_out_w: Tensor,
    pub action_out_b: Tensor,
    pub action_blocks: Vec<BlockWeights>,
    pub action_ln_gamma: Tensor,
    pub action_ln_beta: Tensor,
    /// `[action_hidden, 2]`
    pub action_head_w: Tensor,
    pub action_head_b: Tensor,
}

impl ModelWeights {
    /// Uniform weights in `[-INIT_RANGE, INIT_RANGE)` drawn from `config.weight_seed`;
    /// layer-norm gains start at 1 and shifts at 0.
    pub fn random(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let h = config.hidden_dim;
        let ah = config.action_hidden_dim;
        let kv = config.kv_dim;
        let rng = &mut rng;
        Ok(Self {
            config: config.clone(),
            patch_w: Tensor::uniform(&[patch_features(config.patch_size), h], rng),
            patch_b: Tensor::uniform(&[h], rng),
            vision_blocks: (0..config.vision_blocks)
                .map(|_| BlockWeights::random(h, kv, rng))
                .collect(),
            vision_ln_gamma: Tensor::filled(&[h], 1.0),
            vision_ln_beta: Tensor::filled(&[h], 0.0),
            embed: Tensor::uniform(&[config.vocab_size, h], rng),
            language_blocks: (0..config.decoder_blocks)
                .map(|_| BlockWeights::random(h, kv, rng))
                .collect(),
            language_ln_gamma: Tensor::filled(&[h], 1.0),
            language_ln_beta: Tensor::filled(&[h], 0.0),
            lm_head: Tensor::uniform(&[h, config.vocab_size], rng),
            action_in_w: Tensor::uniform(&[2, ah], rng),
            action_in_b: Tensor::uniform(&[ah], rng),
            action_out_w: Tensor::uniform(&[ah, ah], rng),
            action_out_b: Tensor::uniform(&[ah], rng),
            action_blocks: (0..config.decoder_blocks)
                .map(|_| BlockWeights::random(ah, kv, rng))
                .collect(),
            action_ln_gamma: Tensor::filled(&[ah], 1.0),
            action_ln_beta: Tensor::filled(&[ah], 0.0),
            action_head_w: Tensor::uniform(&[ah, 2], rng),
            action_head_b: Tensor::uniform(&[2], rng),
        })
    }

    /// Replaces the action head with constants, making the update
    /// `Δ = weight * Σ features + bias` (with `weight = 0`, exactly `bias`).
    pub fn with_action_head(mut self, weight: f32, bias: f32) -> Self {
        let ah = self.config.action_hidden_dim;
        self.action_head_w = Tensor::filled(&[ah, 2], weight);
        self.action_head_b = Tensor::filled(&[2], bias);
        self
    }

    /// Binds every tensor into `sub` as a read-only buffer.
    pub fn bind(&self, sub: &mut Substrate) -> Result<BoundWeights, SubstrateError> {
        let mut bind = |t: &Tensor| -> Result<BoundTensor, SubstrateError> {
            Ok(BoundTensor {
                id: sub.bind_const(&t.shape, t.data.clone())?,
                shape: t.shape.clone(),
            })
        };
        let blocks = |bs: &[BlockWeights], bind: &mut dyn FnMut(&Tensor) -> Result<BoundTensor, SubstrateError>| {
            bs.iter()
                .map(|b| {
                    let [g1, be1, wq, wk, wv, wo, g2, be2, w1, b1, w2, b2] = b.tensors();
                    Ok(BoundBlock {
                        ln1_gamma: bind(g1)?,
                        ln1_beta: bind(be1)?,
                        wq: bind(wq)?,
                        wk: bind(wk)?,
                        wv: bind(wv)?,
                        wo: bind(wo)?,
                        ln2_gamma: bind(g2)?,
                        ln2_beta: bind(be2)?,
                        w1: bind(w1)?,
                        b1: bind(b1)?,
                        w2: bind(w2)?,
                        b2: bind(b2)?,
                    })
                })
                .collect::<Result<Vec<_>, SubstrateError>>()
        };
        let action_pos = Tensor::from_vec(
            &[ACTION_STEPS, self.config.action_hidden_dim],
            sinusoidal_table(ACTION_STEPS, self.config.action_hidden_dim),
        );
        Ok(BoundWeights {
            patch_w: bind(&self.patch_w)?,
            patch_b: bind(&self.patch_b)?,
            vision_blocks: blocks(&self.vision_blocks, &mut bind)?,
            vision_ln_gamma: bind(&self.vision_ln_gamma)?,
            vision_ln_beta: bind(&self.vision_ln_beta)?,
            embed: bind(&self.embed)?,
            language_blocks: blocks(&self.language_blocks, &mut bind)?,
            language_ln_gamma: bind(&self.language_ln_gamma)?,
            language_ln_beta: bind(&self.language_ln_beta)?,
            lm_head: bind(&self.lm_head)?,
            action_in_w: bind(&self.action_in_w)?,
            action_in_b: bind(&self.action_in_b)?,
            action_out_w: bind(&self.action_out_w)?,
            action_out_b: bind(&self.action_out_b)?,
            action_blocks: blocks(&self.action_blocks, &mut bind)?,
            action_ln_gamma: bind(&self.action_ln_gamma)?,
            action_ln_beta: bind(&self.action_ln_beta)?,
            action_head_w: bind(&self.action_head_w)?,
            action_head_b: bind(&self.action_head_b)?,
            action_pos: bind(&action_pos)?,
        })
    }
}

/// Fixed sinusoidal position table, `[positions, width]`.
pub fn sinusoidal_table(positions: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; positions * width];
    for pos in 0..positions {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            out[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundTensor {
    pub id: BufferId,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub ln1_gamma: BoundTensor,
    pub ln1_beta: BoundTensor,
    pub wq: BoundTensor,
    pub wk: BoundTensor,
    pub wv: BoundTensor,
    pub wo: BoundTensor,
    pub ln2_gamma: BoundTensor,
    pub ln2_beta: BoundTensor,
    pub w1: BoundTensor,
    pub b1: BoundTensor,
    pub w2: BoundTensor,
    pub b2: BoundTensor,
}

/// Buffer ids of the weights inside one substrate.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    pub patch_w: BoundTensor,
    pub patch_b: BoundTensor,
    pub vision_blocks: Vec<BoundBlock>,
    pub vision_ln_gamma: BoundTensor,
    pub vision_ln_beta: BoundTensor,
    pub embed: BoundTensor,
    pub language_blocks: Vec<BoundBlock>,
    pub language_ln_gamma: BoundTensor,
    pub language_ln_beta: BoundTensor,
    pub lm_head: BoundTensor,
    pub action_in_w: BoundTensor,
    pub action_in_b: BoundTensor,
    pub action_out_w: BoundTensor,
    pub action_out_b: BoundTensor,
    pub action_blocks: Vec<BoundBlock>,
    pub action_ln_gamma: BoundTensor,
    pub action_ln_beta: BoundTensor,
    pub action_head_w: BoundTensor,
    pub action_head_b: BoundTensor,
    /// Position encodings handed to the action decoder, `[ACTION_STEPS, action_hidden]`.
    pub action_pos: BoundTensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_weights_are_reproducible() {
        let c = ModelConfig::default();
        let a = ModelWeights::random(&c).unwrap();
        let b = ModelWeights::random(&c).unwrap();
        assert_eq!(a, b);
        let other = ModelWeights::random(&ModelConfig { weight_seed: 1, ..c }).unwrap();
        assert_ne!(a.lm_head, other.lm_head);
        assert!(a.wq_in_range());
    }

    impl ModelWeights {
        fn wq_in_range(&self) -> bool {
            self.language_blocks[0]
                .wq
                .data
                .iter()
                .all(|v| (-INIT_RANGE..INIT_RANGE).contains(v))
        }
    }

    #[test]
    fn sinusoid_starts_at_sin0_cos0() {
        let t = sinusoidal_table(3, 4);
        assert_eq!(&t[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t[4] - 1f32.sin()).abs() < 1e-7);
    }
}

use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Vocab;
use super::layers::{self, AttendSource, BlockDims, BlockScratch};
use super::vision::Visual;
use super::weights::sinusoidal_table;
use super::{ModelError, ModelRuntime};
use crate::kv::{KvCache, KvError};
use crate::substrate::{BufferId, Op, OpCommand, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Greedy,
    #[default]
    Stochastic,
}

impl FromStr for SampleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "stochastic" => Ok(Self::Stochastic),
            other => Err(format!("unknown sample mode '{other}' (expected greedy or stochastic)")),
        }
    }
}

/// Picks the next token. Greedy takes the argmax with the lowest index on
/// ties; stochastic draws from `softmax(logits)` at temperature 1.
pub fn sample_token(logits: &[f32], mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<u32, ModelError> {
    if logits.is_empty() {
        return Err(ModelError::Shape("empty logits".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(ModelError::NanLogits);
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    if mode == SampleMode::Greedy {
        return Ok(best as u32);
    }
    let max = logits[best] as f64;
    let weights: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return Ok(i as u32);
        }
        target -= w;
    }
    Ok(best as u32)
}

/// Per-lane sampling streams seeded with `seed + lane`.
#[derive(Debug, Clone)]
pub struct TokenSampler {
    mode: SampleMode,
    rngs: Vec<ChaCha8Rng>,
}

impl TokenSampler {
    pub fn new(mode: SampleMode, seed: u64, lanes: usize) -> Self {
        Self {
            mode,
            rngs: (0..lanes as u64)
                .map(|lane| ChaCha8Rng::seed_from_u64(seed.wrapping_add(lane)))
                .collect(),
        }
    }

    pub fn sample(&mut self, lane: usize, logits: &[f32]) -> Result<u32, ModelError> {
        sample_token(logits, self.mode, &mut self.rngs[lane])
    }
}

/// Final hidden state and logits of the last position of every lane.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    pub lanes: usize,
    /// `[lanes, hidden]`, after the final norm.
    pub hidden: Vec<f32>,
    /// `[lanes, vocab]`
    pub logits: Vec<f32>,
}

impl PrefillOutput {
    pub fn lane_logits(&self, lane: usize) -> &[f32] {
        let v = self.logits.len() / self.lanes;
        &self.logits[lane * v..(lane + 1) * v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    /// When false, generation always runs `max_new_tokens` steps.
    pub stop_on_termination: bool,
}

/// Result of autoregressive generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// CoT token ids per lane, termination token excluded.
    pub cot: Vec<Vec<u32>>,
    /// Decode steps run; every lane's KV grew by this many tokens.
    pub steps: usize,
}

impl ModelRuntime {
    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        let vocab = self.config().vocab_size;
        match ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Embeds `ids` (replicated over the cache's lanes), splices `visual`
    /// over the image-placeholder run, and processes every position in
    /// parallel, filling the reasoning KV of each block.
    pub fn prefill(
        &mut self,
        ids: &[u32],
        visual: Option<&Visual>,
        kv: &mut KvCache,
    ) -> Result<PrefillOutput, ModelError> {
        if kv.reasoning_len() != 0 {
            return Err(ModelError::CacheNotEmpty(kv.reasoning_len()));
        }
        if ids.is_empty() {
            return Err(ModelError::Shape("prefill needs at least one token".into()));
        }
        self.check_ids(ids)?;
        let lanes = kv.batch();
        let t = ids.len();
        let h = self.config().hidden_dim;
        let placeholders: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == Vocab::IMAGE_PLACEHOLDER)
            .map(|(i, _)| i)
            .collect();
        let visual_tokens = visual.map_or(0, |v| v.tokens);
        let contiguous = placeholders.windows(2).all(|w| w[1] == w[0] + 1);
        if placeholders.len() != visual_tokens || !contiguous {
            return Err(ModelError::Shape(format!(
                "{} image placeholders (contiguous: {contiguous}) for {visual_tokens} visual embeddings",
                placeholders.len()
            )));
        }
        if let Some(v) = visual {
            if v.lanes != lanes {
                return Err(ModelError::LaneMismatch {
                    expected: lanes,
                    got: v.lanes,
                });
            }
        }

        let replicated: Vec<f32> = (0..lanes).flat_map(|_| ids.iter().map(|&id| id as f32)).collect();
        let id_buf = self.sub.alloc_from(&[lanes * t], &replicated)?;
        let x = self.sub.alloc(&[lanes * t, h])?;
        self.sub
            .dispatch(OpCommand::new(Op::EmbedLookup, vec![self.bound.embed.id, id_buf], x))?;
        self.sub.free(id_buf)?;
        if let (Some(v), Some(&start)) = (visual, placeholders.first()) {
            self.sub.dispatch(OpCommand::new(
                Op::WriteSlice {
                    src: View::batched(lanes, v.tokens, h),
                    dst: View {
                        offset: start * h,
                        batches: lanes,
                        batch_stride: t * h,
                        rows: v.tokens,
                        row_stride: h,
                        cols: h,
                    },
                },
                vec![v.buffer],
                x,
            ))?;
        }
        let pos = self.sub.alloc_from(&[t, h], &sinusoidal_table(t, h))?;
        layers::add_in_place(&mut self.sub, x, pos)?;
        self.sub.free(pos)?;

        self.decoder_stack(x, lanes, t, kv)?;

        let last = self.sub.alloc(&[lanes, h])?;
        self.sub.dispatch(OpCommand::new(
            Op::ReadSlice {
                src: View {
                    offset: (t - 1) * h,
                    batches: lanes,
                    batch_stride: t * h,
                    rows: 1,
                    row_stride: h,
                    cols: h,
                },
            },
            vec![x],
            last,
        ))?;
        self.sub.free(x)?;
        let out = self.lm_head(last, lanes)?;
        self.sub.free(last)?;
        Ok(out)
    }

    /// Processes one new token per lane at the next position, appending its
    /// keys and values, and returns the next-token logits.
    pub fn decode_step(&mut self, tokens: &[u32], kv: &mut KvCache) -> Result<PrefillOutput, ModelError> {
        let lanes = kv.batch();
        if tokens.len() != lanes {
            return Err(ModelError::LaneMismatch {
                expected: lanes,
                got: tokens.len(),
            });
        }
        self.check_ids(tokens)?;
        let p = kv.reasoning_len();
        if p == 0 {
            return Err(ModelError::Shape("decode before prefill".into()));
        }
        if kv.is_sealed() {
            return Err(KvError::Sealed.into());
        }
        if p + 1 > kv.reasoning_capacity() {
            return Err(KvError::CapacityExceeded {
                block: 0,
                requested: p + 1,
                capacity: kv.reasoning_capacity(),
            }
            .into());
        }
        let h = self.config().hidden_dim;
        let ids: Vec<f32> = tokens.iter().map(|&id| id as f32).collect();
        let id_buf = self.sub.alloc_from(&[lanes], &ids)?;
        let x = self.sub.alloc(&[lanes, h])?;
        self.sub
            .dispatch(OpCommand::new(Op::EmbedLookup, vec![self.bound.embed.id, id_buf], x))?;
        self.sub.free(id_buf)?;
        let row = sinusoidal_table(p + 1, h).split_off(p * h);
        let pos = self.sub.alloc_from(&[1, h], &row)?;
        layers::add_in_place(&mut self.sub, x, pos)?;
        self.sub.free(pos)?;

        self.decoder_stack(x, lanes, 1, kv)?;
        let out = self.lm_head(x, lanes)?;
        self.sub.free(x)?;
        Ok(out)
    }

    /// Samples from `first` and keeps decoding until every lane has produced
    /// the termination token or `max_new_tokens` CoT tokens. Lanes that have
    /// finished are fed the termination token so all lanes stay aligned.
    pub fn generate(
        &mut self,
        first: &PrefillOutput,
        kv: &mut KvCache,
        sampler: &mut TokenSampler,
        opts: DecodeOptions,
    ) -> Result<Generation, ModelError> {
        let lanes = kv.batch();
        let mut next = (0..lanes)
            .map(|lane| sampler.sample(lane, first.lane_logits(lane)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut done = vec![false; lanes];
        let mut cot = vec![Vec::new(); lanes];
        let mut steps = 0;
        while steps < opts.max_new_tokens {
            for lane in 0..lanes {
                if done[lane] {
                    continue;
                }
                if opts.stop_on_termination && next[lane] == Vocab::TERMINATION {
                    done[lane] = true;
                } else {
                    cot[lane].push(next[lane]);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            let feed: Vec<u32> = (0..lanes)
                .map(|lane| if done[lane] { Vocab::TERMINATION } else { next[lane] })
                .collect();
            let out = self.decode_step(&feed, kv)?;
            steps += 1;
            for lane in 0..lanes {
                if !done[lane] {
                    next[lane] = sampler.sample(lane, out.lane_logits(lane))?;
                }
            }
        }
        Ok(Generation { cot, steps })
    }

    /// Runs the language blocks over `x` (`[lanes * rows, hidden]`), the
    /// newest `rows` positions of every lane.
    fn decoder_stack(&mut self, x: BufferId, lanes: usize, rows: usize, kv: &mut KvCache) -> Result<(), ModelError> {
        let cfg = self.config().clone();
        let dims = BlockDims {
            groups: lanes,
            rows,
            hidden: cfg.hidden_dim,
            kv_dim: cfg.kv_dim,
            heads: cfg.heads,
            tokens: kv.reasoning_len() + rows,
        };
        let scratch = BlockScratch::alloc(&mut self.sub, dims)?;
        for (b, blk) in self.bound.language_blocks.iter().enumerate() {
            layers::project_qkv(&mut self.sub, blk, x, &scratch)?;
            kv.append_reasoning(&mut self.sub, b, scratch.k, scratch.v, rows)?;
            let view = kv.reasoning_view(b)?;
            let src = AttendSource {
                keys: (view.buffer, view.keys),
                values: (view.buffer, view.values),
            };
            layers::attend_and_mlp(&mut self.sub, blk, x, &scratch, src, Some(view.tokens - rows))?;
        }
        scratch.free(&mut self.sub)?;
        Ok(())
    }

    fn lm_head(&mut self, last: BufferId, lanes: usize) -> Result<PrefillOutput, ModelError> {
        let h = self.config().hidden_dim;
        let vocab = self.config().vocab_size;
        let normed = self.sub.alloc(&[lanes, h])?;
        layers::layer_norm(
            &mut self.sub,
            last,
            &self.bound.language_ln_gamma,
            &self.bound.language_ln_beta,
            normed,
        )?;
        let logits = self.sub.alloc(&[lanes, vocab])?;
        layers::linear(&mut self.sub, normed, lanes, &self.bound.lm_head, None, logits)?;
        let out = PrefillOutput {
            lanes,
            hidden: self.read_rows(normed, lanes, h)?,
            logits: self.read_rows(logits, lanes, vocab)?,
        };
        self.sub.free(normed)?;
        self.sub.free(logits)?;
        Ok(out)
    }
}

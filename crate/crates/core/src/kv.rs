//! Per-block key/value storage for the language and action decoders.
//!
//! Each block owns one substrate buffer laid out as `[2, batch, tokens, kv_dim]`
//! (keys first, then values). Two strategies manage it:
//!
//! * [`KvStrategy::Dynamic`] grows by allocating a fresh buffer on every
//!   append and copying the old contents over. Each diffusion iteration
//!   allocates a new `reasoning + action` buffer per block and copies the full
//!   reasoning KV into it.
//! * [`KvStrategy::Static`] allocates `reasoning_capacity + action_len` tokens
//!   per block up front and writes in place at a per-block cursor. After
//!   construction it never allocates.
//!
//! The action region is overwritten every iteration, so the cache size stays
//! constant across diffusion iterations: the cursor is reset to the start of
//! the action region by [`KvCache::begin_iteration`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::substrate::{BufferId, Op, OpCommand, Substrate, SubstrateError, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvStrategy {
    Dynamic,
    Static,
}

impl std::str::FromStr for KvStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(KvStrategy::Dynamic),
            "static" => Ok(KvStrategy::Static),
            other => Err(format!("unknown kv strategy `{other}` (expected dynamic|static)")),
        }
    }
}

impl std::fmt::Display for KvStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KvStrategy::Dynamic => "dynamic",
            KvStrategy::Static => "static",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("capacity exceeded in block {block}: {requested} tokens requested, capacity {capacity}")]
    CapacityExceeded {
        block: usize,
        requested: usize,
        capacity: usize,
    },
    #[error("block {block} out of range (cache has {blocks})")]
    BlockOutOfRange { block: usize, blocks: usize },
    #[error("reasoning region is sealed")]
    Sealed,
    #[error("reasoning region is not sealed yet")]
    NotSealed,
    #[error("action region of block {0} not written this iteration")]
    ActionNotWritten(usize),
    #[error("append of zero tokens")]
    EmptyAppend,
    #[error("source buffer {id} holds {got} elements, expected {expected}")]
    SourceShape { id: BufferId, expected: usize, got: usize },
    #[error("blocks disagree on reasoning length: {0:?}")]
    UnevenBlocks(Vec<usize>),
    #[error("cannot replicate to zero lanes")]
    ZeroReplication,
    #[error("replication source must have one lane, has {0}")]
    NotSingleLane(usize),
    #[error("graph replay requires the static strategy")]
    ReplayRequiresStatic,
}

/// Shape summary of a cache. Also used to size caches at arbitrary scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLayout {
    pub num_blocks: usize,
    pub batch: usize,
    pub kv_dim: usize,
    pub reasoning_len: usize,
    pub action_len: usize,
}

/// Byte sizes of the regions of a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvFootprint {
    pub reasoning_bytes: u64,
    pub action_bytes: u64,
    pub total_bytes: u64,
}

impl KvLayout {
    /// Bytes for `tokens` tokens of keys and values across all blocks and lanes.
    pub fn token_bytes(&self, tokens: usize, bytes_per_element: usize) -> u64 {
        (self.num_blocks * self.batch * tokens * self.kv_dim * 2 * bytes_per_element) as u64
    }

    pub fn footprint(&self, bytes_per_element: usize) -> KvFootprint {
        let reasoning_bytes = self.token_bytes(self.reasoning_len, bytes_per_element);
        let action_bytes = self.token_bytes(self.action_len, bytes_per_element);
        KvFootprint {
            reasoning_bytes,
            action_bytes,
            total_bytes: reasoning_bytes + action_bytes,
        }
    }

    /// Elements in one block's static buffer.
    pub fn static_block_elements(&self) -> usize {
        self.batch * (self.reasoning_len + self.action_len) * self.kv_dim * 2
    }
}

/// Read-only description of the keys and values an attention pass may read.
///
/// Holds only ids and views; nothing reachable from it can write the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvView {
    pub buffer: BufferId,
    pub keys: View,
    pub values: View,
    pub tokens: usize,
}

#[derive(Debug, Clone, Default)]
struct BlockState {
    reasoning_len: usize,
    /// Static: the preallocated buffer. Dynamic: the reasoning-only buffer.
    storage: Option<BufferId>,
    /// Dynamic only: reasoning + action buffer of the current iteration.
    full: Option<BufferId>,
    cursor: usize,
    action_written: bool,
}

#[derive(Debug)]
pub struct KvCache {
    strategy: KvStrategy,
    num_blocks: usize,
    batch: usize,
    kv_dim: usize,
    action_len: usize,
    reasoning_capacity: usize,
    blocks: Vec<BlockState>,
    sealed: bool,
    kv_allocs: u64,
}

const ELEM_BYTES: usize = std::mem::size_of::<f32>();

/// View of `tokens` rows starting at `start` in the key (`half = 0`) or value
/// (`half = 1`) half of a `[2, batch, capacity, kv_dim]` buffer.
fn region(half: usize, batch: usize, capacity: usize, kv_dim: usize, start: usize, tokens: usize) -> View {
    View {
        offset: (half * batch * capacity + start) * kv_dim,
        batches: batch,
        batch_stride: capacity * kv_dim,
        rows: tokens,
        row_stride: kv_dim,
        cols: kv_dim,
    }
}

impl KvCache {
    /// A dynamic cache; allocates lazily on the first append.
    pub fn new_dynamic(num_blocks: usize, batch: usize, kv_dim: usize, action_len: usize) -> Self {
        Self {
            strategy: KvStrategy::Dynamic,
            num_blocks,
            batch,
            kv_dim,
            action_len,
            reasoning_capacity: usize::MAX,
            blocks: vec![BlockState::default(); num_blocks],
            sealed: false,
            kv_allocs: 0,
        }
    }

    /// A static cache holding up to `reasoning_capacity` reasoning tokens plus
    /// one action region, allocated now.
    pub fn new_static(
        sub: &mut Substrate,
        num_blocks: usize,
        batch: usize,
        kv_dim: usize,
        reasoning_capacity: usize,
        action_len: usize,
    ) -> Result<Self, KvError> {
        let mut cache = Self {
            strategy: KvStrategy::Static,
            num_blocks,
            batch,
            kv_dim,
            action_len,
            reasoning_capacity,
            blocks: vec![BlockState::default(); num_blocks],
            sealed: false,
            kv_allocs: 0,
        };
        for b in 0..num_blocks {
            let id = sub.alloc(&[2, batch, reasoning_capacity + action_len, kv_dim])?;
            cache.kv_allocs += 1;
            cache.blocks[b].storage = Some(id);
        }
        Ok(cache)
    }

    pub fn new(
        sub: &mut Substrate,
        strategy: KvStrategy,
        num_blocks: usize,
        batch: usize,
        kv_dim: usize,
        reasoning_capacity: usize,
        action_len: usize,
    ) -> Result<Self, KvError> {
        match strategy {
            KvStrategy::Dynamic => Ok(Self::new_dynamic(num_blocks, batch, kv_dim, action_len)),
            KvStrategy::Static => Self::new_static(sub, num_blocks, batch, kv_dim, reasoning_capacity, action_len),
        }
    }

    pub fn strategy(&self) -> KvStrategy {
        self.strategy
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Substrate allocations performed by this cache since it was created.
    pub fn kv_allocations(&self) -> u64 {
        self.kv_allocs
    }

    /// Tokens available for the reasoning region (unbounded for dynamic).
    pub fn reasoning_capacity(&self) -> usize {
        self.reasoning_capacity
    }

    /// Reasoning length of block 0; all blocks agree once a step completes.
    pub fn reasoning_len(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.reasoning_len)
    }

    pub fn block_reasoning_len(&self, block: usize) -> Result<usize, KvError> {
        Ok(self.block(block)?.reasoning_len)
    }

    pub fn layout(&self) -> KvLayout {
        KvLayout {
            num_blocks: self.num_blocks,
            batch: self.batch,
            kv_dim: self.kv_dim,
            reasoning_len: self.reasoning_len(),
            action_len: self.action_len,
        }
    }

    /// Static: token offset where the next in-place write lands.
    pub fn write_cursor(&self, block: usize) -> Result<usize, KvError> {
        Ok(self.block(block)?.cursor)
    }

    fn block(&self, block: usize) -> Result<&BlockState, KvError> {
        self.blocks.get(block).ok_or(KvError::BlockOutOfRange {
            block,
            blocks: self.num_blocks,
        })
    }

    fn check_block(&self, block: usize) -> Result<(), KvError> {
        self.block(block).map(|_| ())
    }

    fn check_source(&self, sub: &Substrate, id: BufferId, tokens: usize) -> Result<(), KvError> {
        let expected = self.batch * tokens * self.kv_dim;
        let got: usize = sub.shape(id)?.iter().product();
        if got != expected {
            return Err(KvError::SourceShape { id, expected, got });
        }
        Ok(())
    }

    fn static_capacity(&self) -> usize {
        self.reasoning_capacity + self.action_len
    }

    /// Dispatches the two commands that copy `tokens` rows of keys and values
    /// (each `[batch, tokens, kv_dim]`) into `dst` at token offset `start`.
    #[allow(clippy::too_many_arguments)]
    fn write_tokens(
        &self,
        sub: &mut Substrate,
        dst: BufferId,
        capacity: usize,
        start: usize,
        tokens: usize,
        keys: BufferId,
        values: BufferId,
    ) -> Result<(), KvError> {
        let src = View::batched(self.batch, tokens, self.kv_dim);
        for (half, source) in [(0, keys), (1, values)] {
            let dst_view = region(half, self.batch, capacity, self.kv_dim, start, tokens);
            sub.dispatch(OpCommand::new(Op::WriteSlice { src, dst: dst_view }, vec![source], dst))?;
        }
        Ok(())
    }

    /// Copies the first `tokens` rows of every lane from `src` into `dst`.
    fn copy_prefix(
        &self,
        sub: &mut Substrate,
        src: BufferId,
        src_capacity: usize,
        dst: BufferId,
        dst_capacity: usize,
        tokens: usize,
    ) -> Result<(), KvError> {
        let view = |capacity: usize| View {
            offset: 0,
            batches: 2 * self.batch,
            batch_stride: capacity * self.kv_dim,
            rows: tokens,
            row_stride: self.kv_dim,
            cols: self.kv_dim,
        };
        sub.dispatch(OpCommand::new(
            Op::WriteSlice {
                src: view(src_capacity),
                dst: view(dst_capacity),
            },
            vec![src],
            dst,
        ))?;
        Ok(())
    }

    /// Appends `tokens` tokens of keys and values (each laid out
    /// `[batch, tokens, kv_dim]`) to the reasoning region of `block`.
    pub fn append_reasoning(
        &mut self,
        sub: &mut Substrate,
        block: usize,
        keys: BufferId,
        values: BufferId,
        tokens: usize,
    ) -> Result<(), KvError> {
        self.check_block(block)?;
        if self.sealed {
            return Err(KvError::Sealed);
        }
        if tokens == 0 {
            return Err(KvError::EmptyAppend);
        }
        self.check_source(sub, keys, tokens)?;
        self.check_source(sub, values, tokens)?;
        let len = self.blocks[block].reasoning_len;
        match self.strategy {
            KvStrategy::Static => {
                if len + tokens > self.reasoning_capacity {
                    return Err(KvError::CapacityExceeded {
                        block,
                        requested: len + tokens,
                        capacity: self.reasoning_capacity,
                    });
                }
                let dst = self.blocks[block]
                    .storage
                    .expect("static cache allocates at construction");
                self.write_tokens(sub, dst, self.static_capacity(), len, tokens, keys, values)?;
                let state = &mut self.blocks[block];
                state.reasoning_len = len + tokens;
                state.cursor = len + tokens;
            }
            KvStrategy::Dynamic => {
                let grown = len + tokens;
                let dst = sub.alloc(&[2, self.batch, grown, self.kv_dim])?;
                self.kv_allocs += 1;
                if let Some(old) = self.blocks[block].storage {
                    self.copy_prefix(sub, old, len, dst, grown, len)?;
                    sub.free(old)?;
                }
                self.write_tokens(sub, dst, grown, len, tokens, keys, values)?;
                let state = &mut self.blocks[block];
                state.storage = Some(dst);
                state.reasoning_len = grown;
                state.cursor = grown;
            }
        }
        Ok(())
    }

    /// Keys and values visible while the reasoning region is still growing.
    pub fn reasoning_view(&self, block: usize) -> Result<KvView, KvError> {
        let state = self.block(block)?;
        let buffer = state.storage.ok_or(KvError::EmptyAppend)?;
        let capacity = match self.strategy {
            KvStrategy::Static => self.static_capacity(),
            KvStrategy::Dynamic => state.reasoning_len,
        };
        let tokens = state.reasoning_len;
        Ok(KvView {
            buffer,
            keys: region(0, self.batch, capacity, self.kv_dim, 0, tokens),
            values: region(1, self.batch, capacity, self.kv_dim, 0, tokens),
            tokens,
        })
    }

    /// Freezes the reasoning region. All blocks must hold the same length.
    pub fn seal(&mut self) -> Result<(), KvError> {
        let lens: Vec<usize> = self.blocks.iter().map(|b| b.reasoning_len).collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            return Err(KvError::UnevenBlocks(lens));
        }
        if lens.first().copied().unwrap_or(0) == 0 {
            return Err(KvError::EmptyAppend);
        }
        self.sealed = true;
        for b in &mut self.blocks {
            b.cursor = b.reasoning_len;
            b.action_written = false;
        }
        Ok(())
    }

    /// Starts a diffusion iteration: the cursor returns to the start of the
    /// action region and every block must be written again before attending.
    pub fn begin_iteration(&mut self) -> Result<(), KvError> {
        if !self.sealed {
            return Err(KvError::NotSealed);
        }
        for b in &mut self.blocks {
            b.cursor = b.reasoning_len;
            b.action_written = false;
        }
        Ok(())
    }

    /// Writes the action keys/values of one iteration (each laid out
    /// `[batch, action_len, kv_dim]`) for `block`.
    pub fn write_action_kv(
        &mut self,
        sub: &mut Substrate,
        block: usize,
        keys: BufferId,
        values: BufferId,
    ) -> Result<(), KvError> {
        self.check_block(block)?;
        if !self.sealed {
            return Err(KvError::NotSealed);
        }
        self.check_source(sub, keys, self.action_len)?;
        self.check_source(sub, values, self.action_len)?;
        let r = self.blocks[block].reasoning_len;
        match self.strategy {
            KvStrategy::Static => {
                let cursor = self.blocks[block].cursor;
                if cursor + self.action_len > self.static_capacity() {
                    return Err(KvError::CapacityExceeded {
                        block,
                        requested: cursor + self.action_len,
                        capacity: self.static_capacity(),
                    });
                }
                let dst = self.blocks[block]
                    .storage
                    .expect("static cache allocates at construction");
                self.write_tokens(sub, dst, self.static_capacity(), cursor, self.action_len, keys, values)?;
                self.blocks[block].cursor = cursor + self.action_len;
            }
            KvStrategy::Dynamic => {
                let total = r + self.action_len;
                if let Some(prev) = self.blocks[block].full.take() {
                    sub.free(prev)?;
                }
                let dst = sub.alloc(&[2, self.batch, total, self.kv_dim])?;
                self.kv_allocs += 1;
                let reasoning = self.blocks[block].storage.ok_or(KvError::NotSealed)?;
                self.copy_prefix(sub, reasoning, r, dst, total, r)?;
                self.write_tokens(sub, dst, total, r, self.action_len, keys, values)?;
                self.blocks[block].full = Some(dst);
            }
        }
        self.blocks[block].action_written = true;
        Ok(())
    }

    /// Host bookkeeping after a captured iteration has been replayed: the
    /// replayed commands already wrote every block's action region.
    pub fn mark_replayed_iteration(&mut self) -> Result<(), KvError> {
        if self.strategy != KvStrategy::Static {
            return Err(KvError::ReplayRequiresStatic);
        }
        for b in &mut self.blocks {
            b.cursor = b.reasoning_len + self.action_len;
            b.action_written = true;
        }
        Ok(())
    }

    /// Reasoning plus current action keys/values of `block`.
    pub fn attend_view(&self, block: usize) -> Result<KvView, KvError> {
        let state = self.block(block)?;
        if !self.sealed {
            return Err(KvError::NotSealed);
        }
        if !state.action_written {
            return Err(KvError::ActionNotWritten(block));
        }
        let tokens = state.reasoning_len + self.action_len;
        let (buffer, capacity) = match self.strategy {
            KvStrategy::Static => (state.storage, self.static_capacity()),
            KvStrategy::Dynamic => (state.full, tokens),
        };
        let buffer = buffer.ok_or(KvError::ActionNotWritten(block))?;
        Ok(KvView {
            buffer,
            keys: region(0, self.batch, capacity, self.kv_dim, 0, tokens),
            values: region(1, self.batch, capacity, self.kv_dim, 0, tokens),
            tokens,
        })
    }

    /// Copies the single-lane sealed reasoning region into a new cache with
    /// `n` lanes; action regions start unwritten.
    pub fn replicate_for_batch(&self, sub: &mut Substrate, n: usize) -> Result<KvCache, KvError> {
        if n == 0 {
            return Err(KvError::ZeroReplication);
        }
        if self.batch != 1 {
            return Err(KvError::NotSingleLane(self.batch));
        }
        if !self.sealed {
            return Err(KvError::NotSealed);
        }
        let r = self.reasoning_len();
        let mut out = match self.strategy {
            KvStrategy::Static => KvCache::new_static(
                sub,
                self.num_blocks,
                n,
                self.kv_dim,
                self.reasoning_capacity,
                self.action_len,
            )?,
            KvStrategy::Dynamic => KvCache::new_dynamic(self.num_blocks, n, self.kv_dim, self.action_len),
        };
        let src_capacity = match self.strategy {
            KvStrategy::Static => self.static_capacity(),
            KvStrategy::Dynamic => r,
        };
        for block in 0..self.num_blocks {
            let src = self.blocks[block].storage.ok_or(KvError::NotSealed)?;
            let (dst, dst_capacity) = match self.strategy {
                KvStrategy::Static => (out.blocks[block].storage.expect("allocated"), out.static_capacity()),
                KvStrategy::Dynamic => {
                    let id = sub.alloc(&[2, n, r, self.kv_dim])?;
                    out.kv_allocs += 1;
                    out.blocks[block].storage = Some(id);
                    (id, r)
                }
            };
            for half in 0..2 {
                // Lane 0 of the source, read once per destination lane.
                let mut src_view = region(half, 1, src_capacity, self.kv_dim, 0, r);
                src_view.batches = n;
                src_view.batch_stride = 0;
                sub.dispatch(OpCommand::new(
                    Op::WriteSlice {
                        src: src_view,
                        dst: region(half, n, dst_capacity, self.kv_dim, 0, r),
                    },
                    vec![src],
                    dst,
                ))?;
            }
            out.blocks[block].reasoning_len = r;
        }
        out.seal()?;
        Ok(out)
    }

    /// Digest over the logical contents in (block, lane, token, channel) order:
    /// reasoning tokens, then the action tokens if written this iteration.
    pub fn content_fingerprint(&self, sub: &Substrate) -> Result<String, KvError> {
        self.digest(sub, 0..self.batch, true)
    }

    /// Digest of one lane; equal lanes give equal digests.
    pub fn lane_fingerprint(&self, sub: &Substrate, lane: usize) -> Result<String, KvError> {
        self.digest(sub, lane..lane + 1, true)
    }

    /// Digest of one lane's reasoning region.
    pub fn lane_reasoning_fingerprint(&self, sub: &Substrate, lane: usize) -> Result<String, KvError> {
        self.digest(sub, lane..lane + 1, false)
    }

    /// Digest of the reasoning region only.
    pub fn reasoning_fingerprint(&self, sub: &Substrate) -> Result<String, KvError> {
        self.digest(sub, 0..self.batch, false)
    }

    fn digest(&self, sub: &Substrate, lanes: std::ops::Range<usize>, include_action: bool) -> Result<String, KvError> {
        let mut h = Sha256::new();
        h.update((self.num_blocks as u64).to_le_bytes());
        h.update((lanes.len() as u64).to_le_bytes());
        h.update((self.kv_dim as u64).to_le_bytes());
        for (b, state) in self.blocks.iter().enumerate() {
            let with_action = include_action && state.action_written;
            let (buffer, capacity, tokens) = if with_action {
                let v = self.attend_view(b)?;
                let cap = v.keys.batch_stride / self.kv_dim.max(1);
                (Some(v.buffer), cap, v.tokens)
            } else {
                let cap = match self.strategy {
                    KvStrategy::Static => self.static_capacity(),
                    KvStrategy::Dynamic => state.reasoning_len,
                };
                (state.storage, cap, state.reasoning_len)
            };
            h.update((tokens as u64).to_le_bytes());
            let Some(buffer) = buffer else { continue };
            let data = sub.read(buffer)?;
            for lane in lanes.clone() {
                for t in 0..tokens {
                    for half in 0..2 {
                        let start = ((half * self.batch + lane) * capacity + t) * self.kv_dim;
                        for v in &data[start..start + self.kv_dim] {
                            h.update(v.to_bits().to_le_bytes());
                        }
                    }
                }
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Live logical KV bytes: reasoning tokens plus the action region once written.
    pub fn footprint_bytes(&self) -> u64 {
        let tokens: usize = self
            .blocks
            .iter()
            .map(|b| b.reasoning_len + if b.action_written { self.action_len } else { 0 })
            .sum();
        (tokens * self.batch * self.kv_dim * 2 * ELEM_BYTES) as u64
    }

    /// Bytes physically held in substrate buffers right now.
    pub fn resident_bytes(&self, sub: &Substrate) -> u64 {
        self.buffers()
            .filter_map(|id| sub.shape(id).ok())
            .map(|s| (s.iter().product::<usize>() * ELEM_BYTES) as u64)
            .sum()
    }

    fn buffers(&self) -> impl Iterator<Item = BufferId> + '_ {
        self.blocks.iter().flat_map(|b| b.storage.into_iter().chain(b.full))
    }

    /// Frees every buffer owned by the cache.
    pub fn release(self, sub: &mut Substrate) -> Result<(), KvError> {
        for id in self.buffers() {
            sub.free(id)?;
        }
        Ok(())
    }
}

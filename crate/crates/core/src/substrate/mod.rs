//! Dense f32 compute substrate with eager dispatch and graph capture/replay.
//!
//! Every buffer lives in a [`Substrate`] and is addressed by a [`BufferId`].
//! Eager [`Substrate::dispatch`] pays per-command bookkeeping: id resolution,
//! shape validation and counter updates, plus an optional synthetic delay
//! standing in for a kernel launch. A captured [`ExecGraph`] is validated once
//! at capture and replayed as one dispatch.

mod graph;
mod op;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{CaptureToken, ExecGraph};
pub use op::{gelu, Op, OpCommand, OpKind, View};

use graph::BoundBuffer;

/// Opaque buffer handle; never reused within one substrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BufferId(pub u64);

impl std::fmt::Display for BufferId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubstrateError {
    #[error("unknown buffer {0}")]
    UnknownBuffer(BufferId),
    #[error("shape mismatch in {kind:?}: {detail}")]
    ShapeMismatch { kind: OpKind, detail: String },
    #[error("buffer {0} is read-only")]
    ReadOnly(BufferId),
    #[error("output buffer {0} aliases an input of a matmul")]
    MatmulAlias(BufferId),
    #[error("a capture is already active")]
    NestedCapture,
    #[error("no matching capture is active")]
    NoActiveCapture,
    #[error("allocation during capture")]
    AllocationDuringCapture,
    #[error("stale graph: bound buffer {0} was freed or reshaped")]
    StaleGraph(BufferId),
    #[error("host write of {got} elements into buffer {id} of {expected}")]
    HostWriteLength { id: BufferId, expected: usize, got: usize },
}

/// Monotone counters describing dispatch and allocation activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchStats {
    /// Per-command dispatches plus one per graph replay.
    pub dispatch_count: u64,
    pub replay_count: u64,
    pub alloc_count: u64,
    pub bytes_allocated: u64,
}

impl DispatchStats {
    /// Counter increase since `earlier`.
    pub fn since(&self, earlier: &DispatchStats) -> DispatchStats {
        DispatchStats {
            dispatch_count: self.dispatch_count - earlier.dispatch_count,
            replay_count: self.replay_count - earlier.replay_count,
            alloc_count: self.alloc_count - earlier.alloc_count,
            bytes_allocated: self.bytes_allocated - earlier.bytes_allocated,
        }
    }

    pub fn accumulate(&mut self, other: &DispatchStats) {
        self.dispatch_count += other.dispatch_count;
        self.replay_count += other.replay_count;
        self.alloc_count += other.alloc_count;
        self.bytes_allocated += other.bytes_allocated;
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Owned(Vec<f32>),
    Shared(Arc<[f32]>),
}

impl Storage {
    fn as_slice(&self) -> &[f32] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(v) => v,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    shape: Vec<usize>,
    storage: Storage,
    generation: u64,
}

/// Read-only snapshot of a buffer's metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferInfo {
    pub id: BufferId,
    pub shape: Vec<usize>,
    pub generation: u64,
    pub read_only: bool,
}

struct Capture {
    token: u64,
    commands: Vec<OpCommand>,
    bound: BTreeMap<BufferId, BoundBuffer>,
}

/// A single-owner execution stream over its own buffer pool.
pub struct Substrate {
    slots: HashMap<BufferId, Slot>,
    next_id: u64,
    stats: DispatchStats,
    capture: Option<Capture>,
    next_token: u64,
    dispatch_overhead: Duration,
}

impl fmt::Debug for Substrate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Substrate")
            .field("live_buffers", &self.slots.len())
            .field("stats", &self.stats)
            .field("capturing", &self.capture.is_some())
            .finish()
    }
}

impl Default for Substrate {
    fn default() -> Self {
        Self::new()
    }
}

impl Substrate {
    pub fn new() -> Self {
        Self {
            slots: HashMap::new(),
            next_id: 0,
            stats: DispatchStats::default(),
            capture: None,
            next_token: 0,
            dispatch_overhead: Duration::ZERO,
        }
    }

    /// Adds a busy-wait of `overhead` to every dispatch, including the single
    /// dispatch that issues a graph replay.
    pub fn with_dispatch_overhead(mut self, overhead: Duration) -> Self {
        self.dispatch_overhead = overhead;
        self
    }

    pub fn set_dispatch_overhead(&mut self, overhead: Duration) {
        self.dispatch_overhead = overhead;
    }

    pub fn stats(&self) -> DispatchStats {
        self.stats
    }

    pub fn is_capturing(&self) -> bool {
        self.capture.is_some()
    }

    pub fn live_buffers(&self) -> usize {
        self.slots.len()
    }

    /// Allocates a zero-filled buffer. An empty shape is a one-element scalar.
    pub fn alloc(&mut self, shape: &[usize]) -> Result<BufferId, SubstrateError> {
        if self.capture.is_some() {
            return Err(SubstrateError::AllocationDuringCapture);
        }
        let shape = if shape.is_empty() { vec![1] } else { shape.to_vec() };
        let count: usize = shape.iter().product();
        self.stats.alloc_count += 1;
        self.stats.bytes_allocated += (count * std::mem::size_of::<f32>()) as u64;
        Ok(self.insert(shape, Storage::Owned(vec![0.0; count])))
    }

    /// Allocates a buffer and fills it from host memory.
    pub fn alloc_from(&mut self, shape: &[usize], data: &[f32]) -> Result<BufferId, SubstrateError> {
        let id = self.alloc(shape)?;
        self.write(id, data)?;
        Ok(id)
    }

    /// Registers immutable shared data (model weights) without copying it.
    /// Binding is not an allocation and does not move the counters.
    pub fn bind_const(&mut self, shape: &[usize], data: Arc<[f32]>) -> Result<BufferId, SubstrateError> {
        if self.capture.is_some() {
            return Err(SubstrateError::AllocationDuringCapture);
        }
        let expected: usize = shape.iter().product::<usize>().max(1);
        if expected != data.len() {
            return Err(SubstrateError::HostWriteLength {
                id: BufferId(self.next_id),
                expected,
                got: data.len(),
            });
        }
        Ok(self.insert(shape.to_vec(), Storage::Shared(data)))
    }

    fn insert(&mut self, shape: Vec<usize>, storage: Storage) -> BufferId {
        let id = BufferId(self.next_id);
        self.next_id += 1;
        self.slots.insert(
            id,
            Slot {
                shape,
                storage,
                generation: self.stats.alloc_count,
            },
        );
        id
    }

    pub fn free(&mut self, id: BufferId) -> Result<(), SubstrateError> {
        self.slots
            .remove(&id)
            .map(|_| ())
            .ok_or(SubstrateError::UnknownBuffer(id))
    }

    pub fn info(&self, id: BufferId) -> Result<BufferInfo, SubstrateError> {
        let slot = self.slot(id)?;
        Ok(BufferInfo {
            id,
            shape: slot.shape.clone(),
            generation: slot.generation,
            read_only: matches!(slot.storage, Storage::Shared(_)),
        })
    }

    pub fn shape(&self, id: BufferId) -> Result<&[usize], SubstrateError> {
        Ok(&self.slot(id)?.shape)
    }

    pub fn read(&self, id: BufferId) -> Result<&[f32], SubstrateError> {
        Ok(self.slot(id)?.storage.as_slice())
    }

    /// Host-to-buffer copy. Not a dispatch.
    pub fn write(&mut self, id: BufferId, data: &[f32]) -> Result<(), SubstrateError> {
        let slot = self.slots.get_mut(&id).ok_or(SubstrateError::UnknownBuffer(id))?;
        match &mut slot.storage {
            Storage::Shared(_) => Err(SubstrateError::ReadOnly(id)),
            Storage::Owned(v) if v.len() != data.len() => Err(SubstrateError::HostWriteLength {
                id,
                expected: v.len(),
                got: data.len(),
            }),
            Storage::Owned(v) => {
                v.copy_from_slice(data);
                Ok(())
            }
        }
    }

    fn slot(&self, id: BufferId) -> Result<&Slot, SubstrateError> {
        self.slots.get(&id).ok_or(SubstrateError::UnknownBuffer(id))
    }

    /// Validates and executes one command. While a capture is open the
    /// command is also appended to the graph being recorded.
    pub fn dispatch(&mut self, cmd: OpCommand) -> Result<BufferId, SubstrateError> {
        self.spin();
        self.validate(&cmd)?;
        self.run(&cmd)?;
        self.stats.dispatch_count += 1;
        let out = cmd.output;
        if let Some(cap) = &mut self.capture {
            for id in cmd.inputs.iter().chain(std::iter::once(&cmd.output)) {
                if !cap.bound.contains_key(id) {
                    let slot = &self.slots[id];
                    cap.bound.insert(
                        *id,
                        BoundBuffer {
                            shape: slot.shape.clone(),
                            generation: slot.generation,
                        },
                    );
                }
            }
            cap.commands.push(cmd);
        }
        Ok(out)
    }

    fn validate(&self, cmd: &OpCommand) -> Result<(), SubstrateError> {
        let mut shapes = Vec::with_capacity(cmd.inputs.len());
        for id in &cmd.inputs {
            shapes.push(self.slot(*id)?.shape.as_slice());
        }
        let out = self.slot(cmd.output)?;
        if matches!(out.storage, Storage::Shared(_)) {
            return Err(SubstrateError::ReadOnly(cmd.output));
        }
        if matches!(cmd.op, Op::MatMul { .. }) && cmd.inputs.contains(&cmd.output) {
            return Err(SubstrateError::MatmulAlias(cmd.output));
        }
        op::validate(&cmd.op, &shapes, &out.shape)
    }

    fn run(&mut self, cmd: &OpCommand) -> Result<(), SubstrateError> {
        let out_slot = self
            .slots
            .get_mut(&cmd.output)
            .ok_or(SubstrateError::UnknownBuffer(cmd.output))?;
        let out_shape = out_slot.shape.clone();
        let mut out = match &mut out_slot.storage {
            Storage::Owned(v) => std::mem::take(v),
            Storage::Shared(_) => return Err(SubstrateError::ReadOnly(cmd.output)),
        };
        // Inputs that alias the output read a snapshot taken before the op.
        let snapshot = if cmd.inputs.contains(&cmd.output) {
            Some(out.clone())
        } else {
            None
        };
        let result = cmd
            .inputs
            .iter()
            .map(|id| {
                if *id == cmd.output {
                    Ok(snapshot.as_deref().unwrap_or(&[]))
                } else {
                    self.slot(*id).map(|s| s.storage.as_slice())
                }
            })
            .collect::<Result<Vec<&[f32]>, _>>()
            .and_then(|inputs| op::execute(&cmd.op, &inputs, &mut out, &out_shape));
        if let Some(Slot {
            storage: Storage::Owned(v),
            ..
        }) = self.slots.get_mut(&cmd.output)
        {
            *v = out;
        }
        result
    }

    pub fn begin_capture(&mut self) -> Result<CaptureToken, SubstrateError> {
        if self.capture.is_some() {
            return Err(SubstrateError::NestedCapture);
        }
        let token = self.next_token;
        self.next_token += 1;
        self.capture = Some(Capture {
            token,
            commands: Vec::new(),
            bound: BTreeMap::new(),
        });
        Ok(CaptureToken(token))
    }

    pub fn end_capture(&mut self, token: CaptureToken) -> Result<ExecGraph, SubstrateError> {
        match self.capture.take() {
            Some(cap) if cap.token == token.0 => Ok(ExecGraph {
                commands: cap.commands,
                bound: cap.bound,
                capture_iteration: None,
            }),
            other => {
                self.capture = other;
                Err(SubstrateError::NoActiveCapture)
            }
        }
    }

    /// Abandons an open capture, e.g. after a failed dispatch inside it.
    pub fn abort_capture(&mut self) {
        self.capture = None;
    }

    /// Executes every command of `graph` as a single dispatch.
    pub fn replay(&mut self, graph: &ExecGraph) -> Result<(), SubstrateError> {
        if self.capture.is_some() {
            return Err(SubstrateError::NestedCapture);
        }
        for (id, bound) in &graph.bound {
            match self.slots.get(id) {
                Some(s) if s.shape == bound.shape && s.generation == bound.generation => {}
                _ => return Err(SubstrateError::StaleGraph(*id)),
            }
        }
        self.spin();
        self.stats.dispatch_count += 1;
        self.stats.replay_count += 1;
        for cmd in &graph.commands {
            self.run(cmd)?;
        }
        Ok(())
    }

    fn spin(&self) {
        if self.dispatch_overhead.is_zero() {
            return;
        }
        let start = Instant::now();
        while start.elapsed() < self.dispatch_overhead {
            std::hint::spin_loop();
        }
    }
}

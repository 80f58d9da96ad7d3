use std::collections::BTreeMap;

use super::{BufferId, OpCommand};

/// Handle returned by [`Substrate::begin_capture`](super::Substrate::begin_capture).
#[derive(Debug, PartialEq, Eq)]
pub struct CaptureToken(pub(crate) u64);

/// A recorded command sequence with fixed buffer bindings.
///
/// Replaying it issues all commands as a single dispatch. The command list
/// cannot change after capture; the graph is only valid while every bound
/// buffer is still alive with the shape it had at capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecGraph {
    pub(crate) commands: Vec<OpCommand>,
    pub(crate) bound: BTreeMap<BufferId, BoundBuffer>,
    pub(crate) capture_iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BoundBuffer {
    pub(crate) shape: Vec<usize>,
    pub(crate) generation: u64,
}

impl ExecGraph {
    pub fn commands(&self) -> &[OpCommand] {
        &self.commands
    }

    /// Number of commands, i.e. launches the graph stands in for.
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn bound_buffers(&self) -> impl Iterator<Item = BufferId> + '_ {
        self.bound.keys().copied()
    }

    /// Diffusion iteration (1-based) during which the graph was recorded.
    pub fn capture_iteration(&self) -> Option<usize> {
        self.capture_iteration
    }

    pub fn tagged(mut self, iteration: usize) -> Self {
        self.capture_iteration = Some(iteration);
        self
    }
}

//! Command sequences shared by the three transformer stacks.

use super::weights::{BoundBlock, BoundTensor};
use crate::substrate::{BufferId, Op, OpCommand, Substrate, SubstrateError, View};

pub(crate) const LN_EPS: f32 = 1e-5;

/// Shape of one block invocation: `groups` independent attention groups of
/// `rows` queries each, over `tokens` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockDims {
    pub groups: usize,
    pub rows: usize,
    pub hidden: usize,
    pub kv_dim: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl BlockDims {
    fn total_rows(&self) -> usize {
        self.groups * self.rows
    }

    fn head_dim(&self) -> usize {
        self.kv_dim / self.heads
    }
}

/// Scratch buffers for one block invocation; reused across blocks of a stack.
#[derive(Debug, Clone)]
pub(crate) struct BlockScratch {
    pub dims: BlockDims,
    pub normed: BufferId,
    pub q: BufferId,
    pub k: BufferId,
    pub v: BufferId,
    pub scores: BufferId,
    pub attn: BufferId,
    pub proj: BufferId,
    pub mlp: BufferId,
}

impl BlockScratch {
    pub fn alloc(sub: &mut Substrate, dims: BlockDims) -> Result<Self, SubstrateError> {
        let n = dims.total_rows();
        Ok(Self {
            dims,
            normed: sub.alloc(&[n, dims.hidden])?,
            q: sub.alloc(&[n, dims.kv_dim])?,
            k: sub.alloc(&[n, dims.kv_dim])?,
            v: sub.alloc(&[n, dims.kv_dim])?,
            scores: sub.alloc(&[dims.groups, dims.rows, dims.tokens])?,
            attn: sub.alloc(&[n, dims.kv_dim])?,
            proj: sub.alloc(&[n, dims.hidden])?,
            mlp: sub.alloc(&[n, 4 * dims.hidden])?,
        })
    }

    pub fn free(self, sub: &mut Substrate) -> Result<(), SubstrateError> {
        for id in [
            self.normed,
            self.q,
            self.k,
            self.v,
            self.scores,
            self.attn,
            self.proj,
            self.mlp,
        ] {
            sub.free(id)?;
        }
        Ok(())
    }
}

/// Keys and values an attention pass reads, as (buffer, view) pairs with
/// `cols == kv_dim`; heads are column windows of these views.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttendSource {
    pub keys: (BufferId, View),
    pub values: (BufferId, View),
}

fn dispatch(sub: &mut Substrate, op: Op, inputs: Vec<BufferId>, out: BufferId) -> Result<(), SubstrateError> {
    sub.dispatch(OpCommand::new(op, inputs, out)).map(|_| ())
}

/// `out[rows, n] = x[rows, k] · w[k, n]`, plus `b` when given.
pub(crate) fn linear(
    sub: &mut Substrate,
    x: BufferId,
    rows: usize,
    w: &BoundTensor,
    b: Option<&BoundTensor>,
    out: BufferId,
) -> Result<(), SubstrateError> {
    let (k, n) = (w.shape[0], w.shape[1]);
    dispatch(
        sub,
        Op::MatMul {
            lhs: View::matrix(rows, k),
            rhs: View::matrix(k, n),
            out: View::matrix(rows, n),
            transpose_rhs: false,
        },
        vec![x, w.id],
        out,
    )?;
    if let Some(b) = b {
        add_in_place(sub, out, b.id)?;
    }
    Ok(())
}

/// `x += y`, with `y` broadcast cyclically.
pub(crate) fn add_in_place(sub: &mut Substrate, x: BufferId, y: BufferId) -> Result<(), SubstrateError> {
    dispatch(sub, Op::Add, vec![x, y], x)
}

pub(crate) fn layer_norm(
    sub: &mut Substrate,
    x: BufferId,
    gamma: &BoundTensor,
    beta: &BoundTensor,
    out: BufferId,
) -> Result<(), SubstrateError> {
    dispatch(sub, Op::LayerNorm { eps: LN_EPS }, vec![x, gamma.id, beta.id], out)
}

/// First half of a block: pre-norm and the q, k, v projections into
/// `scratch`, with q already scaled by `1/sqrt(head_dim)`.
pub(crate) fn project_qkv(
    sub: &mut Substrate,
    blk: &BoundBlock,
    x: BufferId,
    s: &BlockScratch,
) -> Result<(), SubstrateError> {
    let n = s.dims.total_rows();
    layer_norm(sub, x, &blk.ln1_gamma, &blk.ln1_beta, s.normed)?;
    linear(sub, s.normed, n, &blk.wq, None, s.q)?;
    let factor = 1.0 / (s.dims.head_dim() as f32).sqrt();
    dispatch(sub, Op::Scale { factor }, vec![s.q], s.q)?;
    linear(sub, s.normed, n, &blk.wk, None, s.k)?;
    linear(sub, s.normed, n, &blk.wv, None, s.v)?;
    Ok(())
}

/// Keys and values taken straight from the scratch projections.
pub(crate) fn own_source(s: &BlockScratch) -> AttendSource {
    let d = s.dims;
    let view = View::batched(d.groups, d.rows, d.kv_dim);
    AttendSource {
        keys: (s.k, view),
        values: (s.v, view),
    }
}

/// Second half of a block: multi-head attention over `src`, output
/// projection, residual, then the GELU MLP with its residual. Updates `x`.
pub(crate) fn attend_and_mlp(
    sub: &mut Substrate,
    blk: &BoundBlock,
    x: BufferId,
    s: &BlockScratch,
    src: AttendSource,
    causal_offset: Option<usize>,
) -> Result<(), SubstrateError> {
    let d = s.dims;
    let hd = d.head_dim();
    let n = d.total_rows();
    let q_view = View {
        offset: 0,
        batches: d.groups,
        batch_stride: d.rows * d.kv_dim,
        rows: d.rows,
        row_stride: d.kv_dim,
        cols: hd,
    };
    let scores = View::batched(d.groups, d.rows, d.tokens);
    for h in 0..d.heads {
        let col = h * hd;
        let head = |v: View| View {
            offset: v.offset + col,
            cols: hd,
            ..v
        };
        dispatch(
            sub,
            Op::MatMul {
                lhs: q_view.with_offset(col),
                rhs: head(src.keys.1),
                out: scores,
                transpose_rhs: true,
            },
            vec![s.q, src.keys.0],
            s.scores,
        )?;
        dispatch(
            sub,
            Op::Softmax {
                view: scores,
                causal_offset,
            },
            vec![s.scores],
            s.scores,
        )?;
        dispatch(
            sub,
            Op::MatMul {
                lhs: scores,
                rhs: head(src.values.1),
                out: q_view.with_offset(col),
                transpose_rhs: false,
            },
            vec![s.scores, src.values.0],
            s.attn,
        )?;
    }
    linear(sub, s.attn, n, &blk.wo, None, s.proj)?;
    add_in_place(sub, x, s.proj)?;

    layer_norm(sub, x, &blk.ln2_gamma, &blk.ln2_beta, s.normed)?;
    linear(sub, s.normed, n, &blk.w1, Some(&blk.b1), s.mlp)?;
    dispatch(sub, Op::Gelu, vec![s.mlp], s.mlp)?;
    linear(sub, s.mlp, n, &blk.w2, Some(&blk.b2), s.proj)?;
    add_in_place(sub, x, s.proj)?;
    Ok(())
}

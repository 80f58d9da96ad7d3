//! Operation commands and their reference kernels.
//!
//! Every kernel is a plain scalar loop over `f32` with a fixed reduction
//! order: sums run left to right over the reduced index, starting from
//! `0.0`. Nothing is reassociated, so the same command list over the same
//! inputs produces the same bits whether it is dispatched eagerly or
//! replayed from a captured graph.

use serde::{Deserialize, Serialize};

use super::{BufferId, SubstrateError};

/// Strided window into a flat buffer: `batches` matrices of `rows x cols`.
///
/// Element `(b, r, c)` lives at `offset + b * batch_stride + r * row_stride + c`.
/// A `batch_stride` of zero broadcasts one matrix to every batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub offset: usize,
    pub batches: usize,
    pub batch_stride: usize,
    pub rows: usize,
    pub row_stride: usize,
    pub cols: usize,
}

impl View {
    /// Dense row-major `rows x cols` matrix starting at element 0.
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Self::batched(1, rows, cols)
    }

    /// Dense row-major stack of `batches` matrices.
    pub fn batched(batches: usize, rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            batches,
            batch_stride: rows * cols,
            rows,
            row_stride: cols,
            cols,
        }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn element_count(&self) -> usize {
        self.batches * self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, batch: usize, row: usize, col: usize) -> usize {
        self.offset + batch * self.batch_stride + row * self.row_stride + col
    }

    /// One past the largest index touched, or 0 for an empty view.
    pub fn extent(&self) -> usize {
        if self.element_count() == 0 {
            return 0;
        }
        self.index(self.batches - 1, self.rows - 1, self.cols - 1) + 1
    }

    fn same_dims(&self, other: &View) -> bool {
        self.batches == other.batches && self.rows == other.rows && self.cols == other.cols
    }
}

/// Discriminant of [`Op`], used for diagnostics and statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Matmul,
    Add,
    Scale,
    Softmax,
    Layernorm,
    Gelu,
    Copy,
    WriteSlice,
    ReadSlice,
    EmbedLookup,
    Concat,
}

/// An operation together with its static attributes.
///
/// Input and output buffer roles per variant:
///
/// | op | inputs | output |
/// |---|---|---|
/// | `MatMul` | `[lhs, rhs]` | written through `out` view only |
/// | `Add` | `[x, y]`, `y` repeated cyclically over `x` | same length as `x` |
/// | `Scale` | `[x]` | same length as `x` |
/// | `Softmax` | `[x]` | same length as `x`, written through `view` only |
/// | `LayerNorm` | `[x, gamma, beta]`, normalized over `gamma.len()` | same length as `x` |
/// | `Gelu`, `Copy` | `[x]` | same length as `x` |
/// | `WriteSlice` | `[src]` | written through `dst` view only |
/// | `ReadSlice` | `[src]` | dense, exactly `src.element_count()` elements |
/// | `EmbedLookup` | `[table, ids]`, ids stored as integral floats | `ids.len() * table_width` |
/// | `Concat` | `[a, b, ...]` | shape decides outer/inner split around `axis` |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    MatMul {
        lhs: View,
        rhs: View,
        out: View,
        transpose_rhs: bool,
    },
    Add,
    Scale {
        factor: f32,
    },
    Softmax {
        view: View,
        /// Column `c` of row `r` is masked when `c > r + offset`.
        causal_offset: Option<usize>,
    },
    LayerNorm {
        eps: f32,
    },
    Gelu,
    Copy,
    WriteSlice {
        src: View,
        dst: View,
    },
    ReadSlice {
        src: View,
    },
    EmbedLookup,
    Concat {
        axis: usize,
    },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul { .. } => OpKind::Matmul,
            Op::Add => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::Layernorm,
            Op::Gelu => OpKind::Gelu,
            Op::Copy => OpKind::Copy,
            Op::WriteSlice { .. } => OpKind::WriteSlice,
            Op::ReadSlice { .. } => OpKind::ReadSlice,
            Op::EmbedLookup => OpKind::EmbedLookup,
            Op::Concat { .. } => OpKind::Concat,
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul { .. } | Op::Add | Op::EmbedLookup => Some(2),
            Op::LayerNorm { .. } => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// One compute command: the unit that a dispatch (or a kernel launch) issues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCommand {
    pub op: Op,
    pub inputs: Vec<BufferId>,
    pub output: BufferId,
}

impl OpCommand {
    pub fn new(op: Op, inputs: Vec<BufferId>, output: BufferId) -> Self {
        Self { op, inputs, output }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(kind: OpKind, detail: String) -> SubstrateError {
    SubstrateError::ShapeMismatch { kind, detail }
}

/// Checks that `op` is well formed for the given input and output shapes.
pub(crate) fn validate(op: &Op, inputs: &[&[usize]], output: &[usize]) -> Result<(), SubstrateError> {
    let kind = op.kind();
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(mismatch(kind, format!("expected {n} inputs, got {}", inputs.len())));
        }
    } else if inputs.is_empty() {
        return Err(mismatch(kind, "expected at least one input".into()));
    }
    let len = |i: usize| element_count(inputs[i]);
    let out_len = element_count(output);
    let fits = |view: &View, buf_len: usize, what: &str| {
        if view.extent() > buf_len {
            Err(mismatch(
                kind,
                format!("{what} view extent {} exceeds buffer of {buf_len}", view.extent()),
            ))
        } else {
            Ok(())
        }
    };

    match op {
        Op::MatMul {
            lhs,
            rhs,
            out,
            transpose_rhs,
        } => {
            fits(lhs, len(0), "lhs")?;
            fits(rhs, len(1), "rhs")?;
            fits(out, out_len, "out")?;
            let (k_rhs, n) = if *transpose_rhs {
                (rhs.cols, rhs.rows)
            } else {
                (rhs.rows, rhs.cols)
            };
            if lhs.cols != k_rhs || out.rows != lhs.rows || out.cols != n {
                return Err(mismatch(
                    kind,
                    format!(
                        "[{}x{}] x [{}x{}]{} -> [{}x{}]",
                        lhs.rows,
                        lhs.cols,
                        rhs.rows,
                        rhs.cols,
                        if *transpose_rhs { "^T" } else { "" },
                        out.rows,
                        out.cols
                    ),
                ));
            }
            if out.batches != lhs.batches || (rhs.batches != 1 && rhs.batches != lhs.batches) {
                return Err(mismatch(
                    kind,
                    format!(
                        "batch counts lhs {} rhs {} out {}",
                        lhs.batches, rhs.batches, out.batches
                    ),
                ));
            }
        }
        Op::Add => {
            if len(1) == 0 || len(0) % len(1) != 0 {
                return Err(mismatch(
                    kind,
                    format!("cannot broadcast {} elements over {}", len(1), len(0)),
                ));
            }
            if out_len != len(0) {
                return Err(mismatch(kind, format!("output {out_len} != input {}", len(0))));
            }
        }
        Op::Scale { .. } | Op::Gelu | Op::Copy => {
            if out_len != len(0) {
                return Err(mismatch(kind, format!("output {out_len} != input {}", len(0))));
            }
        }
        Op::Softmax { view, .. } => {
            if out_len != len(0) {
                return Err(mismatch(kind, format!("output {out_len} != input {}", len(0))));
            }
            fits(view, len(0), "softmax")?;
        }
        Op::LayerNorm { .. } => {
            let width = len(1);
            if width == 0 || len(2) != width || len(0) % width != 0 || out_len != len(0) {
                return Err(mismatch(
                    kind,
                    format!("x {} gamma {} beta {} out {out_len}", len(0), len(1), len(2)),
                ));
            }
        }
        Op::WriteSlice { src, dst } => {
            fits(src, len(0), "src")?;
            fits(dst, out_len, "dst")?;
            if !src.same_dims(dst) {
                return Err(mismatch(kind, format!("src {src:?} vs dst {dst:?}")));
            }
        }
        Op::ReadSlice { src } => {
            fits(src, len(0), "src")?;
            if out_len != src.element_count() {
                return Err(mismatch(
                    kind,
                    format!("output {out_len} != slice {}", src.element_count()),
                ));
            }
        }
        Op::EmbedLookup => {
            let table = inputs[0];
            if table.len() != 2 {
                return Err(mismatch(kind, format!("table must be 2-D, got {table:?}")));
            }
            if out_len != len(1) * table[1] {
                return Err(mismatch(
                    kind,
                    format!("output {out_len} != {} ids x width {}", len(1), table[1]),
                ));
            }
        }
        Op::Concat { axis } => {
            if *axis >= output.len() {
                return Err(mismatch(kind, format!("axis {axis} out of range for {output:?}")));
            }
            let outer: usize = output[..*axis].iter().product();
            let inner: usize = output[axis + 1..].iter().product();
            let slab = outer * inner;
            let mut along = 0;
            for (i, shape) in inputs.iter().enumerate() {
                let n = element_count(shape);
                if slab == 0 || !n.is_multiple_of(slab) {
                    return Err(mismatch(
                        kind,
                        format!("input {i} of {n} elements does not tile outer {outer} x inner {inner}"),
                    ));
                }
                along += n / slab;
            }
            if along != output[*axis] {
                return Err(mismatch(
                    kind,
                    format!("inputs sum to {along} along axis {axis}, output has {}", output[*axis]),
                ));
            }
        }
    }
    Ok(())
}

/// Runs `op`. `inputs` and `out` must already have passed [`validate`].
pub(crate) fn execute(op: &Op, inputs: &[&[f32]], out: &mut [f32], out_shape: &[usize]) -> Result<(), SubstrateError> {
    match op {
        Op::MatMul {
            lhs,
            rhs,
            out: ov,
            transpose_rhs,
        } => matmul(inputs[0], lhs, inputs[1], rhs, *transpose_rhs, out, ov),
        Op::Add => {
            let (x, y) = (inputs[0], inputs[1]);
            let ylen = y.len();
            for (i, o) in out.iter_mut().enumerate() {
                *o = x[i] + y[i % ylen];
            }
        }
        Op::Scale { factor } => {
            for (o, &x) in out.iter_mut().zip(inputs[0]) {
                *o = x * factor;
            }
        }
        Op::Softmax { view, causal_offset } => softmax(inputs[0], out, view, *causal_offset),
        Op::LayerNorm { eps } => layernorm(inputs[0], inputs[1], inputs[2], *eps, out),
        Op::Gelu => {
            for (o, &x) in out.iter_mut().zip(inputs[0]) {
                *o = gelu(x);
            }
        }
        Op::Copy => out.copy_from_slice(inputs[0]),
        Op::WriteSlice { src, dst } => {
            let x = inputs[0];
            for b in 0..src.batches {
                for r in 0..src.rows {
                    let s = src.index(b, r, 0);
                    let d = dst.index(b, r, 0);
                    out[d..d + src.cols].copy_from_slice(&x[s..s + src.cols]);
                }
            }
        }
        Op::ReadSlice { src } => {
            let x = inputs[0];
            let mut d = 0;
            for b in 0..src.batches {
                for r in 0..src.rows {
                    let s = src.index(b, r, 0);
                    out[d..d + src.cols].copy_from_slice(&x[s..s + src.cols]);
                    d += src.cols;
                }
            }
        }
        Op::EmbedLookup => {
            let (table, ids) = (inputs[0], inputs[1]);
            let width = out.len() / ids.len().max(1);
            let vocab = table.len() / width.max(1);
            for (row, &id) in ids.iter().enumerate() {
                if id < 0.0 || id.fract() != 0.0 || id as usize >= vocab {
                    return Err(mismatch(
                        OpKind::EmbedLookup,
                        format!("token id {id} outside vocabulary of {vocab}"),
                    ));
                }
                let src = id as usize * width;
                out[row * width..(row + 1) * width].copy_from_slice(&table[src..src + width]);
            }
        }
        Op::Concat { axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let mut d = 0;
            for o in 0..outer {
                for x in inputs {
                    let chunk = x.len() / outer;
                    out[d..d + chunk].copy_from_slice(&x[o * chunk..(o + 1) * chunk]);
                    d += chunk;
                }
            }
            debug_assert_eq!(d, outer * inner * out_shape[*axis]);
        }
    }
    Ok(())
}

fn matmul(a: &[f32], av: &View, b: &[f32], bv: &View, transpose_rhs: bool, out: &mut [f32], ov: &View) {
    let (m, k) = (av.rows, av.cols);
    let n = ov.cols;
    let mut row = vec![0.0f32; n];
    for batch in 0..av.batches {
        let rb = if bv.batches == 1 { 0 } else { batch };
        for i in 0..m {
            let a_row = av.index(batch, i, 0);
            if transpose_rhs {
                for (j, acc) in row.iter_mut().enumerate() {
                    let b_row = bv.index(rb, j, 0);
                    let mut s = 0.0f32;
                    for p in 0..k {
                        s += a[a_row + p] * b[b_row + p];
                    }
                    *acc = s;
                }
            } else {
                // i-k-j order; each output still accumulates over p = 0..k in sequence.
                row.iter_mut().for_each(|v| *v = 0.0);
                for p in 0..k {
                    let coef = a[a_row + p];
                    let b_row = bv.index(rb, p, 0);
                    for (j, acc) in row.iter_mut().enumerate() {
                        *acc += coef * b[b_row + j];
                    }
                }
            }
            let o = ov.index(batch, i, 0);
            out[o..o + n].copy_from_slice(&row);
        }
    }
}

fn softmax(x: &[f32], out: &mut [f32], view: &View, causal_offset: Option<usize>) {
    for b in 0..view.batches {
        for r in 0..view.rows {
            let base = view.index(b, r, 0);
            let valid = match causal_offset {
                Some(off) => (r + off + 1).min(view.cols),
                None => view.cols,
            };
            let row = &x[base..base + valid];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (o, &v) in out[base..base + valid].iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in &mut out[base..base + valid] {
                *o /= sum;
            }
            for o in &mut out[base + valid..base + view.cols] {
                *o = 0.0;
            }
        }
    }
}

fn layernorm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let width = gamma.len();
    for (xr, or) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mut mean = 0.0f32;
        for &v in xr {
            mean += v;
        }
        mean /= width as f32;
        let mut var = 0.0f32;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var /= width as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..width {
            or[i] = (xr[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_extent_accounts_for_strides() {
        let v = View {
            offset: 3,
            batches: 2,
            batch_stride: 10,
            rows: 2,
            row_stride: 4,
            cols: 2,
        };
        assert_eq!(v.extent(), 3 + 10 + 4 + 1 + 1);
        assert_eq!(View::matrix(0, 5).extent(), 0);
    }

    #[test]
    fn concat_rejects_wrong_total() {
        let op = Op::Concat { axis: 1 };
        let err = validate(&op, &[&[2, 3, 4], &[2, 1, 4]], &[2, 5, 4]).unwrap_err();
        assert!(matches!(err, SubstrateError::ShapeMismatch { .. }));
        validate(&op, &[&[2, 3, 4], &[2, 2, 4]], &[2, 5, 4]).unwrap();
    }

    #[test]
    fn transposed_and_plain_matmul_agree() {
        // b and its transpose, multiplied both ways, must give the same bits.
        let a = [0.3f32, -1.2, 2.5, 0.7, 0.1, -0.4];
        let b = [1.5f32, -0.25, 0.5, 2.0, -3.0, 0.125];
        let bt = [1.5f32, 0.5, -3.0, -0.25, 2.0, 0.125];
        let mut o1 = [0.0f32; 4];
        let mut o2 = [0.0f32; 4];
        let av = View::matrix(2, 3);
        matmul(&a, &av, &b, &View::matrix(3, 2), false, &mut o1, &View::matrix(2, 2));
        matmul(&a, &av, &bt, &View::matrix(2, 3), true, &mut o2, &View::matrix(2, 2));
        assert_eq!(o1.map(f32::to_bits), o2.map(f32::to_bits));
    }

    #[test]
    fn causal_softmax_zeroes_future_columns() {
        let x = [1.0f32; 9];
        let mut out = [9.0f32; 9];
        softmax(&x, &mut out, &View::matrix(3, 3), Some(0));
        assert_eq!(out, [1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn layernorm_of_constant_row_is_beta() {
        let mut out = [0.0f32; 3];
        layernorm(&[2.0; 3], &[1.0; 3], &[0.5, -0.5, 0.0], 1e-5, &mut out);
        assert_eq!(out, [0.5, -0.5, 0.0]);
    }
}

//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it executes. [`Tape::backward`]
//! replays the record once in reverse, accumulating adjoints, and leaves
//! `dLoss/dTensor` in the grad buffer of every tensor that requires
//! gradients. Tapes are cheap and are meant to be built per forward pass
//! and dropped after backward.
//!
//! All values are 64-bit; tensors are row-major and rank 1 or 2.

use crate::{Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LN_EPSILON: f64 = 1e-5;

/// Floor used by `clamp_min` callers that guard logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddRow { a: TensorId, row: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    Gelu { a: TensorId },
    Sigmoid { a: TensorId },
    Relu { a: TensorId },
    Abs { a: TensorId },
    Log { a: TensorId },
    ClampMin { a: TensorId, min: f64 },
    Minimum { a: TensorId, b: TensorId },
    Maximum { a: TensorId, b: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { a: TensorId, gain: TensorId, bias: TensorId },
    Sum { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    ConcatCols { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize },
    EmbedLookup { table: TensorId, ids: Vec<usize> },
    L2NormalizeRows { a: TensorId },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Execution record of tensor operations in the order they ran.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// C[m,n] += A[m,k] . B[k,n]
fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

// C[m,n] += A[m,k] . B[n,k]^T
fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            *cv += s;
        }
    }
}

// C[m,n] += A[k,m]^T . B[k,n]
fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded tensors.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        id
    }

    /// Record a tensor that does not require gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(Error::Dimension(format!(
                "constant: {} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    /// Record a tensor that requires gradients (a parameter copy or input
    /// under test).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(Error::Dimension(format!(
                "leaf: {} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, true, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element tensor.
    pub fn item(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rows_cols(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what}: rank-2 tensor required, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rows_cols(a, "matmul lhs")?;
        let (k2, n) = self.rows_cols(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents {k} and {k2} differ"
            )));
        }
        let mut data = vec![0.0; m * n];
        mm_acc(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose { a }))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        self.same_shape(a, b, what)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(data, shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "minimum", f64::min, Op::Minimum { a, b })
    }

    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op(a, b, "maximum", f64::max, Op::Maximum { a, b })
    }

    /// Broadcast-add a row vector (shape `[c]` or `[1, c]`) to every row of
    /// an r x c matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(a, "add_row lhs")?;
        let rs = &self.nodes[row.0].shape;
        let row_ok = matches!(rs.as_slice(), [n] if *n == c) || matches!(rs.as_slice(), [1, n] if *n == c);
        if !row_ok {
            return Err(Error::Dimension(format!(
                "add_row: row shape {rs:?} does not match {c} columns"
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        let rv = &self.nodes[row.0].data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rv[j];
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(data, vec![r, c], rg, Op::AddRow { a, row }))
    }

    fn map_op(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push(data, shape, rg, op)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.map_op(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.map_op(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.map_op(a, gelu_tanh, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.map_op(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.map_op(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.map_op(a, f64::abs, Op::Abs { a })
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.map_op(a, f64::ln, Op::Log { a })
    }

    pub fn clamp_min(&mut self, a: TensorId, min: f64) -> TensorId {
        self.map_op(a, |x| x.max(min), Op::ClampMin { a, min })
    }

    // ── Structured ops ──────────────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let src = &self.nodes[a.0].data;
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax: non-finite input".into()));
        }
        let k = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |s: usize| o * k * inner + s * inner + i;
                let mut max = f64::NEG_INFINITY;
                for s in 0..k {
                    max = max.max(src[idx(s)]);
                }
                let mut total = 0.0;
                for s in 0..k {
                    let e = (src[idx(s)] - max).exp();
                    data[idx(s)] = e;
                    total += e;
                }
                for s in 0..k {
                    data[idx(s)] /= total;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(data, shape, rg, Op::Softmax { a, axis }))
    }

    /// Per-row normalization to zero mean and unit variance, then an affine
    /// map by `gain` and `bias` (both length equal to the row width).
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, d) = self.rows_cols(a, "layer_norm")?;
        for (t, name) in [(gain, "gain"), (bias, "bias")] {
            let s = &self.nodes[t.0].shape;
            if s.len() != 1 || s[0] != d {
                return Err(Error::Dimension(format!(
                    "layer_norm: {name} shape {s:?} does not match width {d}"
                )));
            }
        }
        let src = &self.nodes[a.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPSILON).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(data, vec![r, d], rg, Op::LayerNorm { a, gain, bias }))
    }

    /// Full reduction to a single-element tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![s], vec![1], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: no parts".into()));
        }
        let (_, c) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.rows_cols(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: widths {c} and {pc} differ"
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.rg(parts);
        Ok(self.push(data, vec![rows, c], rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.rows_cols(a, "slice_rows")?;
        if start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows: rows [{start}, {}) out of {r}",
                start + len
            )));
        }
        let data = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(data, vec![len, c], rg, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no parts".into()));
        }
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {r} and {pr} differ"
                )));
            }
            cols += pc;
        }
        let mut data = vec![0.0; r * cols];
        let mut at = 0;
        for &p in parts {
            let (_, pc) = self.rows_cols(p, "concat_cols")?;
            let src = &self.nodes[p.0].data;
            for i in 0..r {
                data[i * cols + at..i * cols + at + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            at += pc;
        }
        let rg = self.rg(parts);
        Ok(self.push(data, vec![r, cols], rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.rows_cols(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols: cols [{start}, {}) out of {c}",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(data, vec![r, len], rg, Op::SliceCols { a, start }))
    }

    /// Gather columns of a d x v table: output row i is column `ids[i]`.
    /// This is the one-hot projection `W . onehot(id)` without the
    /// materialized one-hots.
    pub fn embed_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (d, v) = self.rows_cols(table, "embed_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!(
                "embed_lookup: id {bad} outside vocabulary of {v}"
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..d {
                data[i * d + j] = src[j * v + id];
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(data, vec![ids.len(), d], rg, Op::EmbedLookup { table, ids: ids.to_vec() }))
    }

    /// Scale each row to unit L2 norm (rows with norm below 1e-12 are left
    /// to that floor).
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.rows_cols(a, "l2_normalize_rows")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt().max(1e-12);
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(data, vec![r, c], rg, Op::L2NormalizeRows { a }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a single-element loss tensor. Adjoints are
    /// propagated through every recorded node exactly once (the returned
    /// count), and `dLoss/dTensor` is accumulated into the grad buffer of
    /// every tensor with `requires_grad`. Calling backward again without
    /// clearing accumulates another pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<usize> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        let mut visits = 0usize;
        for i in (0..n).rev() {
            visits += 1;
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (dst, src) in grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        Ok(visits)
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let add_to = |adj: &mut [Option<Vec<f64>>], t: TensorId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[t.0].requires_grad {
                return;
            }
            let buf = adj[t.0].get_or_insert_with(|| vec![0.0; self.nodes[t.0].data.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n2 = self.nodes[b.0].shape[1];
                let (a, b) = (*a, *b);
                add_to(adj, a, &mut |buf| {
                    mm_nt_acc(buf, g, &self.nodes[b.0].data, m, n2, k);
                });
                add_to(adj, b, &mut |buf| {
                    mm_tn_acc(buf, &self.nodes[a.0].data, g, k, m, n2);
                });
            }
            Op::Transpose { a } => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                add_to(adj, *a, &mut |buf| {
                    for x in 0..c {
                        for y in 0..r {
                            buf[y * c + x] += g[x * r + y];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                add_to(adj, *a, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                add_to(adj, *b, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Sub { a, b } => {
                add_to(adj, *a, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                add_to(adj, *b, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                add_to(adj, *a, &mut |buf| {
                    for ((d, s), y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                });
                add_to(adj, *b, &mut |buf| {
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Div { a, b } => {
                let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                add_to(adj, *a, &mut |buf| {
                    for ((d, s), y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += s / y;
                    }
                });
                add_to(adj, *b, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        *d -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddRow { a, row } => {
                let c = self.nodes[row.0].data.len();
                add_to(adj, *a, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                add_to(adj, *row, &mut |buf| {
                    for (j, s) in g.iter().enumerate() {
                        buf[j % c] += s;
                    }
                });
            }
            Op::Scale { a, c } => {
                add_to(adj, *a, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += c * s;
                    }
                });
            }
            Op::AddScalar { a } => {
                add_to(adj, *a, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Gelu { a } => {
                let av = &self.nodes[a.0].data;
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        *d += g[j] * gelu_tanh_derivative(av[j]);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = &node.data;
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        *d += g[j] * out[j] * (1.0 - out[j]);
                    }
                });
            }
            Op::Relu { a } => {
                let av = &self.nodes[a.0].data;
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        if av[j] > 0.0 {
                            *d += g[j];
                        }
                    }
                });
            }
            Op::Abs { a } => {
                let av = &self.nodes[a.0].data;
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        *d += g[j] * if av[j] > 0.0 { 1.0 } else if av[j] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Log { a } => {
                let av = &self.nodes[a.0].data;
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        *d += g[j] / av[j];
                    }
                });
            }
            Op::ClampMin { a, min } => {
                let av = &self.nodes[a.0].data;
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        if av[j] > *min {
                            *d += g[j];
                        }
                    }
                });
            }
            Op::Minimum { a, b } => {
                let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        if av[j] <= bv[j] {
                            *d += g[j];
                        }
                    }
                });
                add_to(adj, *b, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        if bv[j] < av[j] {
                            *d += g[j];
                        }
                    }
                });
            }
            Op::Maximum { a, b } => {
                let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                add_to(adj, *a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        if av[j] >= bv[j] {
                            *d += g[j];
                        }
                    }
                });
                add_to(adj, *b, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        if bv[j] > av[j] {
                            *d += g[j];
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let s = &node.data;
                let shape = &node.shape;
                let k = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                add_to(adj, *a, &mut |buf| {
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let idx = |p: usize| o * k * inner + p * inner + i2;
                            let mut dot = 0.0;
                            for p in 0..k {
                                dot += g[idx(p)] * s[idx(p)];
                            }
                            for p in 0..k {
                                buf[idx(p)] += s[idx(p)] * (g[idx(p)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias } => {
                let src = &self.nodes[a.0].data;
                let gv = &self.nodes[gain.0].data;
                let d = self.nodes[a.0].shape[1];
                let r = self.nodes[a.0].shape[0];
                // Per-row statistics are cheap to recompute.
                let mut stats = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &src[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                    stats.push((mean, 1.0 / (var + LN_EPSILON).sqrt()));
                }
                add_to(adj, *a, &mut |buf| {
                    for i in 0..r {
                        let (mean, inv) = stats[i];
                        let row = &src[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gr[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let df = d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gr[j] * gv[j];
                            buf[i * d + j] +=
                                inv / df * (df * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                });
                add_to(adj, *gain, &mut |buf| {
                    for i in 0..r {
                        let (mean, inv) = stats[i];
                        for j in 0..d {
                            buf[j] += g[i * d + j] * (src[i * d + j] - mean) * inv;
                        }
                    }
                });
                add_to(adj, *bias, &mut |buf| {
                    for i in 0..r {
                        for j in 0..d {
                            buf[j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                add_to(adj, *a, &mut |buf| {
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    add_to(adj, p, &mut |buf| {
                        for (d, s) in buf.iter_mut().zip(&g[at..at + len]) {
                            *d += s;
                        }
                    });
                    at += len;
                }
            }
            Op::SliceRows { a, start } => {
                let c = self.nodes[a.0].shape[1];
                add_to(adj, *a, &mut |buf| {
                    for (j, s) in g.iter().enumerate() {
                        buf[start * c + j] += s;
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let r = node.shape[0];
                let cols = node.shape[1];
                let mut at = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].shape[1];
                    let off = at;
                    add_to(adj, p, &mut |buf| {
                        for i in 0..r {
                            for j in 0..pc {
                                buf[i * pc + j] += g[i * cols + off + j];
                            }
                        }
                    });
                    at += pc;
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.nodes[a.0].shape[1];
                let w = node.shape[1];
                let r = node.shape[0];
                add_to(adj, *a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..w {
                            buf[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::EmbedLookup { table, ids } => {
                let v = self.nodes[table.0].shape[1];
                let d = node.shape[1];
                add_to(adj, *table, &mut |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[j * v + id] += g[i * d + j];
                        }
                    }
                });
            }
            Op::L2NormalizeRows { a } => {
                let src = &self.nodes[a.0].data;
                let out = &node.data;
                let (r, c) = (node.shape[0], node.shape[1]);
                add_to(adj, *a, &mut |buf| {
                    for i in 0..r {
                        let row = &src[i * c..(i + 1) * c];
                        let y = &out[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt().max(1e-12);
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            buf[i * c + j] += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
        }
    }
}

fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

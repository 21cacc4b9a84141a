//! Reverse-mode automatic differentiation on a flat tape of 2D matrix ops.
//!
//! Forward calls evaluate eagerly and record one op per node; `backward`
//! replays the tape in reverse, accumulating vector-Jacobian products into
//! per-node gradient buffers. Nodes are written once by the op that creates
//! them and never mutated afterwards. The tape is single-owner: build a
//! fresh `Graph` per loss evaluation.
//!
//! All values are f64. Every op checks its output for non-finite entries and
//! fails rather than propagating NaN/Inf.

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub usize);

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// out = a @ b^T
    MatMulBT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    StandardizeRows { a: NodeId, eps: f64 },
    /// Per-row Hadamard with a 1 x n vector.
    RowMulVec { a: NodeId, v: NodeId },
    /// Per-row addition of a 1 x n vector.
    RowAddVec { a: NodeId, v: NodeId },
    MeanCols { a: NodeId },
    SumAll { a: NodeId },
    GatherCols { a: NodeId, idx: Vec<usize> },
    SelectEntries { a: NodeId, entries: Vec<(usize, usize)> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    RowL2Normalize { a: NodeId },
    RowDot { a: NodeId, b: NodeId },
    Reshape { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
}

pub struct Graph {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            needs_grad,
        });
        self.ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(&self, id: NodeId, op: &'static str) -> Result<NodeId> {
        if self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            Ok(id)
        } else {
            Err(Error::NumericDomain {
                op,
                detail: "produced non-finite value".into(),
            })
        }
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(rows, cols, data, false)
    }

    /// Parameter leaf: gradient is accumulated during backward.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(rows, cols, data, true)
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{rows}x{cols} wants {} values, got {}", rows * cols, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "leaf",
                detail: "non-finite input".into(),
            });
        }
        Ok(self.push(rows, cols, data, needs_grad, Op::Leaf))
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0].cols
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Self::shape_err(
                "matmul",
                format!("{m}x{k} @ {k2}x{n}"),
            ));
        }
        let data = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let id = self.push(m, n, data, ng, Op::MatMul { a, b });
        self.check_finite(id, "matmul")
    }

    /// out = a @ b^T, with a: m x k and b: n x k.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Self::shape_err(
                "matmul_bt",
                format!("{m}x{k} @ ({n}x{k2})^T"),
            ));
        }
        let data = kernels::matmul_bt(self.value(a), self.value(b), m, k, n);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let id = self.push(m, n, data, ng, Op::MatMulBT { a, b });
        self.check_finite(id, "matmul_bt")
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if (self.rows(b), self.cols(b)) != (r, c) {
            return Err(Self::shape_err(
                op_name,
                format!(
                    "{r}x{c} vs {}x{}",
                    self.rows(b),
                    self.cols(b)
                ),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let id = self.push(r, c, data, ng, op);
        self.check_finite(id, op_name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let (r, cl) = (self.rows(a), self.cols(a));
        let data: Vec<f64> = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, cl, data, ng, Op::Scale { a, c });
        self.check_finite(id, "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::Relu { a });
        self.check_finite(id, "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<f64> = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::Sigmoid { a });
        self.check_finite(id, "sigmoid")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.value(a)[i * c..(i + 1) * c];
            data.extend(kernels::softmax(row)?);
        }
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::SoftmaxRows { a });
        self.check_finite(id, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.value(a)[i * c..(i + 1) * c];
            data.extend(kernels::log_softmax(row)?);
        }
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::LogSoftmaxRows { a });
        self.check_finite(id, "log_softmax_rows")
    }

    /// Standardize each row to mean 0, variance 1 (eps inside the sqrt).
    pub fn standardize_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.value(a)[i * c..(i + 1) * c];
            data.extend(kernels::standardize(row, eps));
        }
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::StandardizeRows { a, eps });
        self.check_finite(id, "standardize_rows")
    }

    pub fn row_mul_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if self.rows(v) != 1 || self.cols(v) != c {
            return Err(Self::shape_err(
                "row_mul_vec",
                format!("{r}x{c} with {}x{}", self.rows(v), self.cols(v)),
            ));
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(self.value(a)[i * c + j] * self.value(v)[j]);
            }
        }
        let ng = self.nodes[a.0].needs_grad || self.nodes[v.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::RowMulVec { a, v });
        self.check_finite(id, "row_mul_vec")
    }

    pub fn row_add_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if self.rows(v) != 1 || self.cols(v) != c {
            return Err(Self::shape_err(
                "row_add_vec",
                format!("{r}x{c} with {}x{}", self.rows(v), self.cols(v)),
            ));
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(self.value(a)[i * c + j] + self.value(v)[j]);
            }
        }
        let ng = self.nodes[a.0].needs_grad || self.nodes[v.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::RowAddVec { a, v });
        self.check_finite(id, "row_add_vec")
    }

    /// Mean over columns: m x n -> m x 1.
    pub fn mean_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if c == 0 {
            return Err(Error::EmptyInput("mean_cols"));
        }
        let data: Vec<f64> = (0..r)
            .map(|i| self.value(a)[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, 1, data, ng, Op::MeanCols { a });
        self.check_finite(id, "mean_cols")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(1, 1, vec![s], ng, Op::SumAll { a });
        self.check_finite(id, "sum_all")
    }

    /// Column subset: out[:, j] = a[:, idx[j]].
    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if idx.iter().any(|&j| j >= c) {
            return Err(Self::shape_err(
                "gather_cols",
                format!("index out of range for {c} columns"),
            ));
        }
        if idx.is_empty() {
            return Err(Error::EmptyInput("gather_cols"));
        }
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                data.push(self.value(a)[i * c + j]);
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, idx.len(), data, ng, Op::GatherCols { a, idx: idx.to_vec() });
        self.check_finite(id, "gather_cols")
    }

    /// Pick individual entries into a 1 x len row.
    pub fn select_entries(&mut self, a: NodeId, entries: &[(usize, usize)]) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if entries.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Self::shape_err(
                "select_entries",
                format!("entry out of range for {r}x{c}"),
            ));
        }
        if entries.is_empty() {
            return Err(Error::EmptyInput("select_entries"));
        }
        let data: Vec<f64> = entries.iter().map(|&(i, j)| self.value(a)[i * c + j]).collect();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(
            1,
            entries.len(),
            data,
            ng,
            Op::SelectEntries { a, entries: entries.to_vec() },
        );
        self.check_finite(id, "select_entries")
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let c = self.cols(parts[0]);
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != c {
                return Err(Self::shape_err(
                    "concat_rows",
                    format!("column mismatch {} vs {c}", self.cols(p)),
                ));
            }
            rows += self.rows(p);
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        let id = self.push(rows, c, data, ng, Op::ConcatRows { parts: parts.to_vec() });
        self.check_finite(id, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if start + len > r {
            return Err(Self::shape_err(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(len, c, data, ng, Op::SliceRows { a, start });
        self.check_finite(id, "slice_rows")
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let r = self.rows(parts[0]);
        let mut cols = 0;
        for &p in parts {
            if self.rows(p) != r {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("row mismatch {} vs {r}", self.rows(p)),
                ));
            }
            cols += self.cols(p);
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.cols(p);
                data.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        let id = self.push(r, cols, data, ng, Op::ConcatCols { parts: parts.to_vec() });
        self.check_finite(id, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if start + len > c {
            return Err(Self::shape_err(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.value(a)[i * c + start..i * c + start + len]);
        }
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, len, data, ng, Op::SliceCols { a, start });
        self.check_finite(id, "slice_cols")
    }

    /// Normalize each row to unit Euclidean norm. A zero row is a
    /// degenerate-score error, surfaced rather than silently zeroed.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.value(a)[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateScore);
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::RowL2Normalize { a });
        self.check_finite(id, "row_l2_normalize")
    }

    /// Per-row dot product of two equal-shape matrices: m x n -> m x 1.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if (self.rows(b), self.cols(b)) != (r, c) {
            return Err(Self::shape_err(
                "row_dot",
                format!("{r}x{c} vs {}x{}", self.rows(b), self.cols(b)),
            ));
        }
        let data: Vec<f64> = (0..r)
            .map(|i| {
                let ra = &self.value(a)[i * c..(i + 1) * c];
                let rb = &self.value(b)[i * c..(i + 1) * c];
                ra.iter().zip(rb.iter()).map(|(x, y)| x * y).sum()
            })
            .collect();
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let id = self.push(r, 1, data, ng, Op::RowDot { a, b });
        self.check_finite(id, "row_dot")
    }

    /// Entrywise clamp to [lo, hi]. Gradient passes through strictly inside
    /// the interval and is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let ng = self.nodes[a.0].needs_grad;
        let id = self.push(r, c, data, ng, Op::Clamp { a, lo, hi });
        self.check_finite(id, "clamp")
    }

    /// Reinterpret the buffer with new dimensions (same element count).
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if rows * cols != self.value(a).len() {
            return Err(Self::shape_err(
                "reshape",
                format!("{}x{} -> {rows}x{cols}", self.rows(a), self.cols(a)),
            ));
        }
        let data = self.value(a).to_vec();
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(rows, cols, data, ng, Op::Reshape { a }))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accum(&mut self, id: NodeId, g: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        debug_assert_eq!(g.len(), n);
        match &mut self.nodes[id.0].grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g.iter()) {
                    *e += v;
                }
            }
            None => self.nodes[id.0].grad = Some(g.to_vec()),
        }
    }

    fn take_out_grad(&self, out: usize) -> Option<Vec<f64>> {
        self.nodes[out].grad.clone()
    }

    /// Reverse sweep from a scalar loss node. Seeds d(loss) = 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: "loss must be a 1x1 node".into(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for out in (0..self.ops.len()).rev() {
            if !self.nodes[out].needs_grad {
                continue;
            }
            let Some(d_out) = self.take_out_grad(out) else {
                continue;
            };
            self.backward_op(out, &d_out);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: usize, d_out: &[f64]) {
        // Ops are moved out temporarily to satisfy the borrow checker; they
        // are cheap to clone-free swap because backward runs once per graph.
        let op = std::mem::replace(&mut self.ops[out], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                if self.nodes[a.0].needs_grad {
                    // dA = dOut @ B^T
                    let d_a = kernels::matmul_bt(d_out, self.value(*b), m, n, k);
                    self.accum(*a, &d_a);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T @ dOut
                    let a_data = self.value(*a);
                    let mut d_b = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a_data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                d_b[p * n + j] += av * d_out[i * n + j];
                            }
                        }
                    }
                    self.accum(*b, &d_b);
                }
            }
            Op::MatMulBT { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.rows(*b);
                if self.nodes[a.0].needs_grad {
                    // dA = dOut @ B
                    let d_a = kernels::matmul(d_out, self.value(*b), m, n, k);
                    self.accum(*a, &d_a);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = dOut^T @ A
                    let a_data = self.value(*a);
                    let mut d_b = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let dv = d_out[i * n + j];
                            if dv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                d_b[j * k + p] += dv * a_data[i * k + p];
                            }
                        }
                    }
                    self.accum(*b, &d_b);
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, d_out);
                self.accum(*b, d_out);
            }
            Op::Sub { a, b } => {
                self.accum(*a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let d_a: Vec<f64> = d_out
                        .iter()
                        .zip(self.value(*b).iter())
                        .map(|(d, y)| d * y)
                        .collect();
                    self.accum(*a, &d_a);
                }
                if self.nodes[b.0].needs_grad {
                    let d_b: Vec<f64> = d_out
                        .iter()
                        .zip(self.value(*a).iter())
                        .map(|(d, x)| d * x)
                        .collect();
                    self.accum(*b, &d_b);
                }
            }
            Op::Scale { a, c } => {
                let d_a: Vec<f64> = d_out.iter().map(|d| d * c).collect();
                self.accum(*a, &d_a);
            }
            Op::Relu { a } => {
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(self.value(*a).iter())
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(*a, &d_a);
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[out].data;
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(y.iter())
                    .map(|(d, &s)| d * s * (1.0 - s))
                    .collect();
                self.accum(*a, &d_a);
            }
            Op::SoftmaxRows { a } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let y = self.nodes[out].data.clone();
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let dot: f64 = (0..c).map(|j| d_out[base + j] * y[base + j]).sum();
                    for j in 0..c {
                        d_a[base + j] = y[base + j] * (d_out[base + j] - dot);
                    }
                }
                self.accum(*a, &d_a);
            }
            Op::LogSoftmaxRows { a } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let y = self.nodes[out].data.clone();
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let sum_d: f64 = (0..c).map(|j| d_out[base + j]).sum();
                    for j in 0..c {
                        d_a[base + j] = d_out[base + j] - y[base + j].exp() * sum_d;
                    }
                }
                self.accum(*a, &d_a);
            }
            Op::StandardizeRows { a, eps } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let x = self.value(*a).to_vec();
                let y = self.nodes[out].data.clone();
                let n = c as f64;
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let row = &x[base..base + c];
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_d: f64 = (0..c).map(|j| d_out[base + j]).sum::<f64>() / n;
                    let mean_dy: f64 =
                        (0..c).map(|j| d_out[base + j] * y[base + j]).sum::<f64>() / n;
                    for j in 0..c {
                        d_a[base + j] = inv * (d_out[base + j] - mean_d - y[base + j] * mean_dy);
                    }
                }
                self.accum(*a, &d_a);
            }
            Op::RowMulVec { a, v } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                if self.nodes[a.0].needs_grad {
                    let vv = self.value(*v).to_vec();
                    let mut d_a = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d_a[i * c + j] = d_out[i * c + j] * vv[j];
                        }
                    }
                    self.accum(*a, &d_a);
                }
                if self.nodes[v.0].needs_grad {
                    let av = self.value(*a).to_vec();
                    let mut d_v = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            d_v[j] += d_out[i * c + j] * av[i * c + j];
                        }
                    }
                    self.accum(*v, &d_v);
                }
            }
            Op::RowAddVec { a, v } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                self.accum(*a, d_out);
                if self.nodes[v.0].needs_grad {
                    let mut d_v = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            d_v[j] += d_out[i * c + j];
                        }
                    }
                    self.accum(*v, &d_v);
                }
            }
            Op::MeanCols { a } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    let d = d_out[i] / c as f64;
                    for j in 0..c {
                        d_a[i * c + j] = d;
                    }
                }
                self.accum(*a, &d_a);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].data.len();
                let d_a = vec![d_out[0]; n];
                self.accum(*a, &d_a);
            }
            Op::GatherCols { a, idx } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let w = idx.len();
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    for (jj, &j) in idx.iter().enumerate() {
                        d_a[i * c + j] += d_out[i * w + jj];
                    }
                }
                self.accum(*a, &d_a);
            }
            Op::SelectEntries { a, entries } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let mut d_a = vec![0.0; r * c];
                for (k, &(i, j)) in entries.iter().enumerate() {
                    d_a[i * c + j] += d_out[k];
                }
                self.accum(*a, &d_a);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    let slice = d_out[offset..offset + n].to_vec();
                    self.accum(p, &slice);
                    offset += n;
                }
            }
            Op::SliceRows { a, start } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let len = self.nodes[out].rows;
                let mut d_a = vec![0.0; r * c];
                d_a[start * c..(start + len) * c].copy_from_slice(d_out);
                self.accum(*a, &d_a);
            }
            Op::ConcatCols { parts } => {
                let r = self.nodes[out].rows;
                let total = self.nodes[out].cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.cols(p);
                    let mut d_p = vec![0.0; r * pc];
                    for i in 0..r {
                        d_p[i * pc..(i + 1) * pc]
                            .copy_from_slice(&d_out[i * total + offset..i * total + offset + pc]);
                    }
                    self.accum(p, &d_p);
                    offset += pc;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let len = self.nodes[out].cols;
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    d_a[i * c + start..i * c + start + len]
                        .copy_from_slice(&d_out[i * len..(i + 1) * len]);
                }
                self.accum(*a, &d_a);
            }
            Op::RowL2Normalize { a } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let x = self.value(*a).to_vec();
                let y = self.nodes[out].data.clone();
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    let base = i * c;
                    let norm = x[base..base + c].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..c).map(|j| d_out[base + j] * y[base + j]).sum();
                    for j in 0..c {
                        d_a[base + j] = (d_out[base + j] - y[base + j] * dot) / norm;
                    }
                }
                self.accum(*a, &d_a);
            }
            Op::RowDot { a, b } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(*b).to_vec();
                    let mut d_a = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d_a[i * c + j] = d_out[i] * bv[i * c + j];
                        }
                    }
                    self.accum(*a, &d_a);
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(*a).to_vec();
                    let mut d_b = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d_b[i * c + j] = d_out[i] * av[i * c + j];
                        }
                    }
                    self.accum(*b, &d_b);
                }
            }
            Op::Reshape { a } => {
                self.accum(*a, d_out);
            }
            Op::Clamp { a, lo, hi } => {
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(self.value(*a).iter())
                    .map(|(d, &x)| if x > *lo && x < *hi { *d } else { 0.0 })
                    .collect();
                self.accum(*a, &d_a);
            }
        }
        self.ops[out] = op;
    }
}

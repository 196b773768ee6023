//! Expression graphs and reverse-mode gradients.
//!
//! A graph is built once through [`GraphBuilder`], then evaluated against
//! leaf bindings any number of times. Node ids only ever reference earlier
//! nodes, so the graph is acyclic by construction and insertion order is a
//! topological order. The operation set is closed: matrix multiply, add,
//! broadcast add, tanh, log-softmax over the last axis, row gather, a fused
//! log-softmax-and-gather, scalar multiply, sum, and mean. Losses that need
//! anything else (ratios, clipping) are linearized by the caller into
//! constant per-token weights over gathered log-probabilities.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::{DiffError, DiffResult};

/// Identifies a node within the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Leaf values for evaluation, keyed by leaf name.
pub type Bindings = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a vector to every row of a matrix.
    BroadcastAdd(NodeId, NodeId),
    Tanh(NodeId),
    LogSoftmax(NodeId),
    /// Selects rows of a matrix by index (embedding lookup).
    GatherRows(NodeId, Vec<usize>),
    /// Row-wise `log_softmax(x)[i, indices[i]]` fused into one node, so the
    /// forward pass never materializes the full per-row distribution.
    LogSoftmaxGather(NodeId, Vec<usize>),
    ScalarMul(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::BroadcastAdd(..) => "broadcast_add",
            Op::Tanh(_) => "tanh",
            Op::LogSoftmax(_) => "log_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::LogSoftmaxGather(..) => "log_softmax_gather",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct NodeDef {
    op: Op,
    shape: Vec<usize>,
}

/// Incrementally builds an [`ExprGraph`] with shape checking at every step.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<NodeDef>,
    leaves: BTreeMap<String, NodeId>,
}

/// How a matmul operand pair maps onto `[m, k] x [k, n]`; 1-D operands are
/// treated as a single row (left) or column (right) and squeezed out of the
/// result shape.
fn matmul_dims(
    node: usize,
    a: &[usize],
    b: &[usize],
) -> DiffResult<(usize, usize, usize, Vec<usize>)> {
    let (m, ka, squeeze_m) = match a {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => {
            return Err(DiffError::ShapeMismatch {
                node,
                op: "matmul",
                detail: format!("left operand must be rank 1 or 2, got shape {a:?}"),
            })
        }
    };
    let (kb, n, squeeze_n) = match b {
        [k] => (*k, 1, true),
        [k, n] => (*k, *n, false),
        _ => {
            return Err(DiffError::ShapeMismatch {
                node,
                op: "matmul",
                detail: format!("right operand must be rank 1 or 2, got shape {b:?}"),
            })
        }
    };
    if ka != kb {
        return Err(DiffError::ShapeMismatch {
            node,
            op: "matmul",
            detail: format!("inner dimensions disagree: {a:?} x {b:?}"),
        });
    }
    let mut out = Vec::new();
    if !squeeze_m {
        out.push(m);
    }
    if !squeeze_n {
        out.push(n);
    }
    Ok((m, ka, n, out))
}

/// Rows/cols view of a rank-1 or rank-2 shape (a vector is one row).
fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("callers validate rank"),
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - max - log_sum;
    }
}

/// `log_softmax(x)[index]` for a single row, plus the row softmax needed by
/// the backward rule.
fn log_softmax_pick(x: &[f64], index: usize) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x[index] - max - log_sum
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeDef { op, shape });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Declares (or re-uses) a named leaf. Re-declaring a name with a
    /// different shape is an error.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> DiffResult<NodeId> {
        if shape.iter().product::<usize>() == 0 {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "leaf",
                detail: format!("leaf `{name}` has zero-volume shape {shape:?}"),
            });
        }
        if let Some(&existing) = self.leaves.get(name) {
            if self.shape(existing) != shape {
                return Err(DiffError::ShapeMismatch {
                    node: existing.0,
                    op: "leaf",
                    detail: format!(
                        "leaf `{name}` redeclared with shape {shape:?}, was {:?}",
                        self.shape(existing)
                    ),
                });
            }
            return Ok(existing);
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
            },
            shape.to_vec(),
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> DiffResult<NodeId> {
        if value.is_empty() {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "constant",
                detail: "constants must have at least one entry".to_string(),
            });
        }
        let shape = value.shape().to_vec();
        Ok(self.push(Op::Constant(value), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let (_, _, _, out) = matmul_dims(self.nodes.len(), self.shape(a), self.shape(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "add",
                detail: format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            });
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape))
    }

    /// `a + b` where `a` is `[m, n]` and `b` is `[n]` (or `[1, n]`), added to
    /// every row of `a`.
    pub fn broadcast_add(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = matches!((sa.as_slice(), sb.as_slice()),
            ([_, n], [bn]) | ([_, n], [1, bn]) if n == bn);
        if !ok {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "broadcast_add",
                detail: format!("cannot broadcast {sb:?} over rows of {sa:?}"),
            });
        }
        Ok(self.push(Op::BroadcastAdd(a, b), sa))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    /// Log-softmax over the last axis of a rank-1 or rank-2 input.
    pub fn log_softmax(&mut self, a: NodeId) -> DiffResult<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape.len() > 2 {
            return Err(DiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "log_softmax",
                detail: format!("input must be rank 1 or 2, got shape {shape:?}"),
            });
        }
        Ok(self.push(Op::LogSoftmax(a), shape))
    }

    /// Selects `indices.len()` rows from a rank-2 input; repeated indices are
    /// allowed and their gradients accumulate.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> DiffResult<NodeId> {
        let shape = self.shape(a).to_vec();
        let node = self.nodes.len();
        let [rows, cols] = shape[..] else {
            return Err(DiffError::ShapeMismatch {
                node,
                op: "gather_rows",
                detail: format!("input must be rank 2, got shape {shape:?}"),
            });
        };
        if indices.is_empty() {
            return Err(DiffError::ShapeMismatch {
                node,
                op: "gather_rows",
                detail: "index list is empty".to_string(),
            });
        }
        for &i in indices {
            if i >= rows {
                return Err(DiffError::IndexOutOfBounds {
                    node,
                    index: i,
                    size: rows,
                });
            }
        }
        Ok(self.push(
            Op::GatherRows(a, indices.to_vec()),
            vec![indices.len(), cols],
        ))
    }

    /// `out[i] = log_softmax(a[i, :])[indices[i]]` for a rank-2 input.
    pub fn log_softmax_gather(&mut self, a: NodeId, indices: &[usize]) -> DiffResult<NodeId> {
        let shape = self.shape(a).to_vec();
        let node = self.nodes.len();
        let [rows, cols] = shape[..] else {
            return Err(DiffError::ShapeMismatch {
                node,
                op: "log_softmax_gather",
                detail: format!("input must be rank 2, got shape {shape:?}"),
            });
        };
        if indices.len() != rows {
            return Err(DiffError::ShapeMismatch {
                node,
                op: "log_softmax_gather",
                detail: format!("{} indices for {rows} rows", indices.len()),
            });
        }
        for &i in indices {
            if i >= cols {
                return Err(DiffError::IndexOutOfBounds {
                    node,
                    index: i,
                    size: cols,
                });
            }
        }
        Ok(self.push(Op::LogSoftmaxGather(a, indices.to_vec()), vec![rows]))
    }

    pub fn scalar_mul(&mut self, a: NodeId, factor: f64) -> DiffResult<NodeId> {
        if !factor.is_finite() {
            return Err(DiffError::NonFiniteData);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::ScalarMul(a, factor), shape))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), Vec::new())
    }

    /// Seals the graph with `root` as the node returned by evaluation and
    /// differentiated by gradient queries.
    pub fn finish(self, root: NodeId) -> ExprGraph {
        assert!(root.0 < self.nodes.len(), "root id from another builder");
        ExprGraph {
            nodes: self.nodes,
            leaves: self.leaves,
            root,
        }
    }
}

/// An immutable expression graph with one designated root.
#[derive(Debug, Clone)]
pub struct ExprGraph {
    nodes: Vec<NodeDef>,
    leaves: BTreeMap<String, NodeId>,
    root: NodeId,
}

impl ExprGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root_shape(&self) -> &[usize] {
        &self.nodes[self.root.0].shape
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn leaf_shape(&self, name: &str) -> Option<&[usize]> {
        self.leaves.get(name).map(|id| self.nodes[id.0].shape.as_slice())
    }

    fn leaf_value<'a>(&self, name: &str, shape: &[usize], bindings: &'a Bindings) -> DiffResult<&'a Tensor> {
        let value = bindings
            .get(name)
            .ok_or_else(|| DiffError::UnboundLeaf(name.to_string()))?;
        if value.shape() != shape {
            return Err(DiffError::BindingShape {
                name: name.to_string(),
                got: value.shape().to_vec(),
                want: shape.to_vec(),
            });
        }
        Ok(value)
    }

    /// Computes every node value in topological (insertion) order.
    fn forward(&self, bindings: &Bindings) -> DiffResult<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Leaf { name } => self.leaf_value(name, &node.shape, bindings)?.clone(),
                Op::Constant(t) => t.clone(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&values[a.0], &values[b.0]);
                    let (m, k, n, out_shape) = matmul_dims(idx, ta.shape(), tb.shape())?;
                    let (da, db) = (ta.data(), tb.data());
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let brow = &db[p * n..(p + 1) * n];
                            let orow = &mut out[i * n..(i + 1) * n];
                            for (o, b) in orow.iter_mut().zip(brow) {
                                *o += aip * b;
                            }
                        }
                    }
                    Tensor::new(out_shape, out)?
                }
                Op::Add(a, b) => {
                    let mut out = values[a.0].clone();
                    for (o, v) in out.data_mut().iter_mut().zip(values[b.0].data()) {
                        *o += v;
                    }
                    out
                }
                Op::BroadcastAdd(a, b) => {
                    let mut out = values[a.0].clone();
                    let cols = out.shape()[1];
                    let row = values[b.0].data();
                    for (i, o) in out.data_mut().iter_mut().enumerate() {
                        *o += row[i % cols];
                    }
                    out
                }
                Op::Tanh(a) => {
                    let mut out = values[a.0].clone();
                    for o in out.data_mut() {
                        *o = o.tanh();
                    }
                    out
                }
                Op::LogSoftmax(a) => {
                    let input = &values[a.0];
                    let (rows, cols) = as_rows(input.shape());
                    let mut out = vec![0.0; rows * cols];
                    for r in 0..rows {
                        log_softmax_row(
                            &input.data()[r * cols..(r + 1) * cols],
                            &mut out[r * cols..(r + 1) * cols],
                        );
                    }
                    Tensor::new(input.shape().to_vec(), out)?
                }
                Op::GatherRows(a, indices) => {
                    let input = &values[a.0];
                    let cols = input.shape()[1];
                    let mut out = Vec::with_capacity(indices.len() * cols);
                    for &r in indices {
                        out.extend_from_slice(input.row(r));
                    }
                    Tensor::new(vec![indices.len(), cols], out)?
                }
                Op::LogSoftmaxGather(a, indices) => {
                    let input = &values[a.0];
                    let cols = input.shape()[1];
                    let out = indices
                        .iter()
                        .enumerate()
                        .map(|(r, &i)| log_softmax_pick(&input.data()[r * cols..(r + 1) * cols], i))
                        .collect();
                    Tensor::new(vec![indices.len()], out)?
                }
                Op::ScalarMul(a, factor) => {
                    let mut out = values[a.0].clone();
                    for o in out.data_mut() {
                        *o *= factor;
                    }
                    out
                }
                Op::Sum(a) => Tensor::scalar(values[a.0].data().iter().sum()),
                Op::Mean(a) => {
                    let data = values[a.0].data();
                    Tensor::scalar(data.iter().sum::<f64>() / data.len() as f64)
                }
            };
            if !value.is_finite() {
                return Err(DiffError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        Ok(values)
    }

    /// Evaluates the root against the given leaf bindings. Pure: identical
    /// bindings produce bit-identical results.
    pub fn evaluate(&self, bindings: &Bindings) -> DiffResult<Tensor> {
        let values = self.forward(bindings)?;
        Ok(values[self.root.0].clone())
    }

    /// Reverse-mode gradient of the scalar root with respect to the named
    /// leaves. Leaves the root does not depend on get zero gradients.
    pub fn gradient(
        &self,
        bindings: &Bindings,
        wrt: &[&str],
    ) -> DiffResult<BTreeMap<String, Tensor>> {
        if !self.root_shape().is_empty() {
            return Err(DiffError::NonScalarRoot(self.root_shape().to_vec()));
        }
        for name in wrt {
            if !self.leaves.contains_key(*name) {
                return Err(DiffError::UnknownLeaf((*name).to_string()));
            }
        }
        let values = self.forward(bindings)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[self.root.0] = Some(vec![1.0]);

        // Helper: accumulate `delta` into the gradient slot of `id`.
        fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
            match &mut grads[id.0] {
                Some(g) => {
                    for (g, d) in g.iter_mut().zip(delta) {
                        *g += d;
                    }
                }
                slot => *slot = Some(delta.to_vec()),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            // Re-insert so leaves keep their accumulated gradient available.
            grads[idx] = Some(upstream);
            let upstream = grads[idx].as_ref().unwrap().clone();
            match &self.nodes[idx].op {
                Op::Leaf { .. } | Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&values[a.0], &values[b.0]);
                    let (m, k, n, _) = matmul_dims(idx, ta.shape(), tb.shape())?;
                    let (da, db) = (ta.data(), tb.data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let urow = &upstream[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (u, bv) in urow.iter().zip(brow) {
                                acc += u * bv;
                            }
                            ga[i * k + p] = acc;
                            let aip = da[i * k + p];
                            if aip != 0.0 {
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for (g, u) in gbrow.iter_mut().zip(urow) {
                                    *g += aip * u;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &upstream);
                    accumulate(&mut grads, *b, &upstream);
                }
                Op::BroadcastAdd(a, b) => {
                    accumulate(&mut grads, *a, &upstream);
                    let cols = values[a.0].shape()[1];
                    let mut gb = vec![0.0; values[b.0].len()];
                    for (i, u) in upstream.iter().enumerate() {
                        gb[i % cols] += u;
                    }
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Tanh(a) => {
                    let y = values[idx].data();
                    let ga: Vec<f64> = upstream
                        .iter()
                        .zip(y)
                        .map(|(u, y)| u * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let input = &values[a.0];
                    let y = values[idx].data();
                    let (rows, cols) = as_rows(input.shape());
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let urow = &upstream[r * cols..(r + 1) * cols];
                        let usum: f64 = urow.iter().sum();
                        let yrow = &y[r * cols..(r + 1) * cols];
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        for ((g, u), yv) in garow.iter_mut().zip(urow).zip(yrow) {
                            *g = u - yv.exp() * usum;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::GatherRows(a, indices) => {
                    let cols = values[a.0].shape()[1];
                    let mut ga = vec![0.0; values[a.0].len()];
                    for (i, &r) in indices.iter().enumerate() {
                        let urow = &upstream[i * cols..(i + 1) * cols];
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        for (g, u) in garow.iter_mut().zip(urow) {
                            *g += u;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LogSoftmaxGather(a, indices) => {
                    let input = &values[a.0];
                    let cols = input.shape()[1];
                    let mut ga = vec![0.0; input.len()];
                    for (r, (&picked, &u)) in indices.iter().zip(&upstream).enumerate() {
                        if u == 0.0 {
                            continue;
                        }
                        let xrow = &input.data()[r * cols..(r + 1) * cols];
                        let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = xrow.iter().map(|v| (v - max).exp()).sum();
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        for (v, (g, x)) in garow.iter_mut().zip(xrow).enumerate() {
                            let p = (x - max).exp() / sum;
                            *g += u * (if v == picked { 1.0 - p } else { -p });
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ScalarMul(a, factor) => {
                    let ga: Vec<f64> = upstream.iter().map(|u| u * factor).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![upstream[0]; values[a.0].len()];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Mean(a) => {
                    let len = values[a.0].len();
                    let ga = vec![upstream[0] / len as f64; len];
                    accumulate(&mut grads, *a, &ga);
                }
            }
        }

        let mut out = BTreeMap::new();
        for name in wrt {
            let id = self.leaves[*name];
            let shape = &self.nodes[id.0].shape;
            let tensor = match grads[id.0].take() {
                Some(data) => Tensor::new(shape.clone(), data)?,
                None => Tensor::zeros(shape),
            };
            out.insert((*name).to_string(), tensor);
        }
        Ok(out)
    }
}

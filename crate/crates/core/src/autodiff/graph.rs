//! Append-only computation graph with eager forward evaluation and a single
//! reverse sweep for gradients.
//!
//! Design rules the rest of the crate relies on:
//!
//! * Node values are never mutated after creation; rebuilding the graph each
//!   iteration is the supported idiom.
//! * Inputs of a node always have smaller ids than the node itself, so a
//!   reverse id sweep is a reverse topological order and backward visits
//!   each node exactly once.
//! * Everything is `f64`; identical `(graph, inputs)` produce bit-identical
//!   values and gradients.
//! * Every op validates shapes up front and checks its output for
//!   non-finite values, so numerical blow-ups surface at the op that caused
//!   them rather than ten ops later.

use std::sync::Arc;

use thiserror::Error;

use super::array::{Array, ArrayError};
use super::kernels::{mm, mm_acc, mm_at, mm_bt, softmax_rows};

/// Inputs below this floor are clamped inside `log`, keeping cross-entropy
/// and entropy terms finite at (numerically) one-hot predictions.
pub const LOG_FLOOR: f64 = 1e-12;

/// Gather index sentinel that reads as 0.0 and routes no gradient; used for
/// zero padding in convolution index tables.
pub const GATHER_ZERO: usize = usize::MAX;

pub type GraphResult<T> = Result<T, GraphError>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss node, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("unknown parameter `{name}` in graph")]
    UnknownParam { name: String },
    #[error(transparent)]
    Array(#[from] ArrayError),
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Linear,
    Relu,
    Softmax,
    Log,
    Exp,
    LayerNorm,
    Mean,
    Sum,
    Mse,
    Gather { indices: Arc<Vec<usize>> },
    Concat { axis: usize },
    Attention { scale: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::LayerNorm => "layernorm",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Mse => "mse",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array,
    /// Saved intermediates needed by the backward rule (attention weights,
    /// layernorm row statistics).
    aux: Vec<Array>,
}

/// Per-node gradients produced by [`Graph::backward`]. Shape of each entry
/// equals the shape of the corresponding node's value.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> GraphResult<f64> {
        Ok(self.value(id).as_scalar()?)
    }

    /// Named trainable leaf. The name is recorded so callers can collect
    /// parameter gradients after backward.
    pub fn param(&mut self, name: &str, value: Array) -> NodeId {
        let id = self.push_unchecked(Op::Leaf, vec![], value, vec![]);
        self.params.push((name.to_string(), id));
        id
    }

    /// Unnamed leaf: inputs, targets, frozen features. Gradients flow into
    /// it (and are simply discarded by callers), never further.
    pub fn input(&mut self, value: Array) -> NodeId {
        self.push_unchecked(Op::Leaf, vec![], value, vec![])
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.input(Array::scalar(v))
    }

    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.params
    }

    /// Gradient of the given named parameter, as zeros if the loss does not
    /// depend on it.
    pub fn param_grad(&self, grads: &Gradients, name: &str) -> GraphResult<Array> {
        let (_, id) = self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| GraphError::UnknownParam {
                name: name.to_string(),
            })?;
        Ok(match grads.get(*id) {
            Some(g) => g.clone(),
            None => Array::zeros(self.value(*id).shape().to_vec()),
        })
    }

    fn push_unchecked(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Array,
        aux: Vec<Array>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
        });
        id
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Array,
        aux: Vec<Array>,
    ) -> GraphResult<NodeId> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: op.name() });
        }
        Ok(self.push_unchecked(op, inputs, value, aux))
    }

    fn binary_same_shape(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> GraphResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                op.name(),
                format!("operand shapes {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::from_vec(va.shape().to_vec(), data)?;
        self.push(op, vec![a, b], value, vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> GraphResult<NodeId> {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> GraphResult<NodeId> {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> GraphResult<NodeId> {
        self.binary_same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> GraphResult<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| c * x).collect();
        let value = Array::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Scale(c), vec![a], value, vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> GraphResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, ka) = va
            .dims2()
            .map_err(|_| shape_err("matmul", format!("lhs rank {} != 2", va.rank())))?;
        let (kb, n) = vb
            .dims2()
            .map_err(|_| shape_err("matmul", format!("rhs rank {} != 2", vb.rank())))?;
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dims {ka} vs {kb} (lhs {m}x{ka}, rhs {kb}x{n})"),
            ));
        }
        let data = mm(va.data(), vb.data(), m, ka, n);
        let value = Array::matrix(m, n, data)?;
        self.push(Op::MatMul, vec![a, b], value, vec![])
    }

    /// Affine map `x·w + bias` with the bias broadcast across rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> GraphResult<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(bias));
        let (n, din) = vx
            .dims2()
            .map_err(|_| shape_err("linear", format!("input rank {} != 2", vx.rank())))?;
        let (wi, wo) = vw
            .dims2()
            .map_err(|_| shape_err("linear", format!("weight rank {} != 2", vw.rank())))?;
        if din != wi {
            return Err(shape_err(
                "linear",
                format!("input width {din} vs weight rows {wi}"),
            ));
        }
        if vb.shape() != [wo] {
            return Err(shape_err(
                "linear",
                format!("bias shape {:?} vs weight cols {wo}", vb.shape()),
            ));
        }
        let mut data = Vec::with_capacity(n * wo);
        for _ in 0..n {
            data.extend_from_slice(vb.data());
        }
        mm_acc(vx.data(), vw.data(), &mut data, n, din, wo);
        let value = Array::matrix(n, wo, data)?;
        self.push(Op::Linear, vec![x, w, bias], value, vec![])
    }

    pub fn relu(&mut self, a: NodeId) -> GraphResult<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Array::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Relu, vec![a], value, vec![])
    }

    /// Softmax over the trailing axis. Output rows are strictly positive and
    /// sum to one.
    pub fn softmax(&mut self, a: NodeId) -> GraphResult<NodeId> {
        let va = self.value(a);
        if va.numel() == 0 || va.rank() == 0 {
            return Err(shape_err(
                "softmax",
                format!("needs at least rank 1, got shape {:?}", va.shape()),
            ));
        }
        let d = va.row_len();
        let data = softmax_rows(va.data(), d);
        let value = Array::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Softmax, vec![a], value, vec![])
    }

    /// Natural log with the input clamped to [`LOG_FLOOR`], so probabilities
    /// that have collapsed to zero still produce a finite value (and zero
    /// gradient into the clamped region).
    pub fn log(&mut self, a: NodeId) -> GraphResult<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
        let value = Array::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Log, vec![a], value, vec![])
    }

    pub fn exp(&mut self, a: NodeId) -> GraphResult<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.exp()).collect();
        let value = Array::from_vec(va.shape().to_vec(), data)?;
        self.push(Op::Exp, vec![a], value, vec![])
    }

    /// Row-wise layer normalization over the trailing axis with learned
    /// scale and shift (broadcast across rows).
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> GraphResult<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.row_len();
        if vx.rank() < 1 || vx.numel() == 0 {
            return Err(shape_err(
                "layernorm",
                format!("input shape {:?}", vx.shape()),
            ));
        }
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(shape_err(
                "layernorm",
                format!(
                    "scale {:?} / shift {:?} vs row length {d}",
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let rows = vx.numel() / d;
        let mut out = vec![0.0; vx.numel()];
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &vx.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (xr[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Array::from_vec(vx.shape().to_vec(), out)?;
        let aux = vec![
            Array::from_vec(vx.shape().to_vec(), xhat)?,
            Array::from_vec(vec![rows], inv_std)?,
        ];
        self.push(Op::LayerNorm, vec![x, gamma, beta], value, aux)
    }

    pub fn mean(&mut self, a: NodeId) -> GraphResult<NodeId> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(shape_err("mean", "empty input".to_string()));
        }
        let v = va.data().iter().sum::<f64>() / va.numel() as f64;
        self.push(Op::Mean, vec![a], Array::scalar(v), vec![])
    }

    pub fn sum(&mut self, a: NodeId) -> GraphResult<NodeId> {
        let va = self.value(a);
        let v = va.data().iter().sum::<f64>();
        self.push(Op::Sum, vec![a], Array::scalar(v), vec![])
    }

    /// Mean squared error over all entries of two same-shape arrays.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> GraphResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "mse",
                format!("operand shapes {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        if va.numel() == 0 {
            return Err(shape_err("mse", "empty input".to_string()));
        }
        let v = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.numel() as f64;
        self.push(Op::Mse, vec![a, b], Array::scalar(v), vec![])
    }

    /// Index-select from the flattened input. `indices[i]` addresses the
    /// element written to output position `i`; [`GATHER_ZERO`] reads as 0.0
    /// and routes no gradient. One index table commonly serves every
    /// iteration (patch extraction, up-sampling, im2col), so tables are
    /// shared by `Arc`.
    pub fn gather(
        &mut self,
        a: NodeId,
        indices: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> GraphResult<NodeId> {
        let va = self.value(a);
        let n_out: usize = out_shape.iter().product();
        if indices.len() != n_out {
            return Err(shape_err(
                "gather",
                format!(
                    "index table length {} vs output shape {:?}",
                    indices.len(),
                    out_shape
                ),
            ));
        }
        let n_in = va.numel();
        let src = va.data();
        let mut data = Vec::with_capacity(n_out);
        for &ix in indices.iter() {
            if ix == GATHER_ZERO {
                data.push(0.0);
            } else if ix < n_in {
                data.push(src[ix]);
            } else {
                return Err(shape_err(
                    "gather",
                    format!("index {ix} out of range for input of {n_in} elements"),
                ));
            }
        }
        let value = Array::from_vec(out_shape, data)?;
        self.push(Op::Gather { indices }, vec![a], value, vec![])
    }

    /// Concatenate rank-2 arrays along rows (`axis = 0`) or columns
    /// (`axis = 1`).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> GraphResult<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".to_string()));
        }
        if axis > 1 {
            return Err(shape_err("concat", format!("axis {axis} out of range")));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| {
                self.value(p)
                    .dims2()
                    .map_err(|_| shape_err("concat", "all inputs must be rank 2".to_string()))
            })
            .collect::<GraphResult<_>>()?;
        let value = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|&(_, c)| c != cols) {
                return Err(shape_err(
                    "concat",
                    format!("column counts differ: {dims:?}"),
                ));
            }
            let rows: usize = dims.iter().map(|&(r, _)| r).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Array::matrix(rows, cols, data)?
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|&(r, _)| r != rows) {
                return Err(shape_err("concat", format!("row counts differ: {dims:?}")));
            }
            let cols: usize = dims.iter().map(|&(_, c)| c).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    let v = self.value(p);
                    data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
                }
            }
            Array::matrix(rows, cols, data)?
        };
        self.push(Op::Concat { axis }, parts.to_vec(), value, vec![])
    }

    /// Single-head scaled dot-product attention:
    /// `softmax(q·kᵀ / sqrt(d)) · v`. Queries are n×d, keys m×d, values
    /// m×dv. The softmax weights are cached for the backward rule.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> GraphResult<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dq) = vq
            .dims2()
            .map_err(|_| shape_err("attention", format!("query rank {} != 2", vq.rank())))?;
        let (mk, dk) = vk
            .dims2()
            .map_err(|_| shape_err("attention", format!("key rank {} != 2", vk.rank())))?;
        let (mv, dv) = vv
            .dims2()
            .map_err(|_| shape_err("attention", format!("value rank {} != 2", vv.rank())))?;
        if dq != dk {
            return Err(shape_err(
                "attention",
                format!("query width {dq} vs key width {dk}"),
            ));
        }
        if mk != mv {
            return Err(shape_err(
                "attention",
                format!("key count {mk} vs value count {mv}"),
            ));
        }
        let scale = 1.0 / (dq as f64).sqrt();
        let mut scores = mm_bt(vq.data(), vk.data(), n, dq, mk);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        let weights = softmax_rows(&scores, mk);
        let out = mm(&weights, vv.data(), n, mk, dv);
        let value = Array::matrix(n, dv, out)?;
        let aux = vec![Array::matrix(n, mk, weights)?];
        self.push(Op::Attention { scale }, vec![q, k, v], value, aux)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// node; unreachable nodes have no entry.
    pub fn backward(&self, loss: NodeId) -> GraphResult<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(GraphError::NonScalarLoss { numel: lv.numel() });
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::from_vec(lv.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.vjp(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `delta` into the gradient slot of `target`.
    fn accumulate(grads: &mut [Option<Array>], target: NodeId, delta: Array) {
        match &mut grads[target.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), delta.shape());
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn vjp(&self, id: usize, g: &Array, grads: &mut Vec<Option<Array>>) -> GraphResult<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                Self::accumulate(grads, ins[0], g.clone());
                Self::accumulate(grads, ins[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, ins[0], g.clone());
                let neg = Array::from_vec(
                    g.shape().to_vec(),
                    g.data().iter().map(|&x| -x).collect(),
                )?;
                Self::accumulate(grads, ins[1], neg);
            }
            Op::Mul => {
                let (va, vb) = (self.value(ins[0]), self.value(ins[1]));
                let da = g
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&gx, &b)| gx * b)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gx, &a)| gx * a)
                    .collect();
                Self::accumulate(grads, ins[0], Array::from_vec(g.shape().to_vec(), da)?);
                Self::accumulate(grads, ins[1], Array::from_vec(g.shape().to_vec(), db)?);
            }
            Op::Scale(c) => {
                let da = g.data().iter().map(|&x| c * x).collect();
                Self::accumulate(grads, ins[0], Array::from_vec(g.shape().to_vec(), da)?);
            }
            Op::MatMul => {
                let (va, vb) = (self.value(ins[0]), self.value(ins[1]));
                let (m, k) = va.dims2()?;
                let n = vb.dims2()?.1;
                let da = mm_bt(g.data(), vb.data(), m, n, k);
                let db = mm_at(va.data(), g.data(), m, k, n);
                Self::accumulate(grads, ins[0], Array::matrix(m, k, da)?);
                Self::accumulate(grads, ins[1], Array::matrix(k, n, db)?);
            }
            Op::Linear => {
                let (vx, vw) = (self.value(ins[0]), self.value(ins[1]));
                let (n, din) = vx.dims2()?;
                let dout = vw.dims2()?.1;
                let dx = mm_bt(g.data(), vw.data(), n, dout, din);
                let dw = mm_at(vx.data(), g.data(), n, din, dout);
                let mut db = vec![0.0; dout];
                for row in g.data().chunks_exact(dout) {
                    for (acc, &gv) in db.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                Self::accumulate(grads, ins[0], Array::matrix(n, din, dx)?);
                Self::accumulate(grads, ins[1], Array::matrix(din, dout, dw)?);
                Self::accumulate(grads, ins[2], Array::from_vec(vec![dout], db)?);
            }
            Op::Relu => {
                let vx = self.value(ins[0]);
                let dx = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                Self::accumulate(grads, ins[0], Array::from_vec(g.shape().to_vec(), dx)?);
            }
            Op::Softmax => {
                let y = &node.value;
                let d = y.row_len();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, ins[0], Array::from_vec(y.shape().to_vec(), dx)?);
            }
            Op::Log => {
                let vx = self.value(ins[0]);
                let dx = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &x)| if x >= LOG_FLOOR { gv / x } else { 0.0 })
                    .collect();
                Self::accumulate(grads, ins[0], Array::from_vec(g.shape().to_vec(), dx)?);
            }
            Op::Exp => {
                let y = &node.value;
                let dx = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv)
                    .collect();
                Self::accumulate(grads, ins[0], Array::from_vec(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm => {
                let vg_param = self.value(ins[1]);
                let xhat = &node.aux[0];
                let inv_std = &node.aux[1];
                let d = xhat.row_len();
                let rows = xhat.numel() / d;
                let gamma = vg_param.data();
                let mut dx = vec![0.0; xhat.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xhat.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let is = inv_std.data()[r];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    let dr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dxh = gr[j] * gamma[j];
                        dr[j] = is * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                Self::accumulate(grads, ins[0], Array::from_vec(xhat.shape().to_vec(), dx)?);
                Self::accumulate(grads, ins[1], Array::from_vec(vec![d], dgamma)?);
                Self::accumulate(grads, ins[2], Array::from_vec(vec![d], dbeta)?);
            }
            Op::Mean => {
                let vx = self.value(ins[0]);
                let gv = g.data()[0] / vx.numel() as f64;
                Self::accumulate(grads, ins[0], Array::full(vx.shape().to_vec(), gv));
            }
            Op::Sum => {
                let vx = self.value(ins[0]);
                Self::accumulate(grads, ins[0], Array::full(vx.shape().to_vec(), g.data()[0]));
            }
            Op::Mse => {
                let (va, vb) = (self.value(ins[0]), self.value(ins[1]));
                let c = 2.0 * g.data()[0] / va.numel() as f64;
                let da: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&a, &b)| c * (a - b))
                    .collect();
                let db: Vec<f64> = da.iter().map(|&x| -x).collect();
                Self::accumulate(grads, ins[0], Array::from_vec(va.shape().to_vec(), da)?);
                Self::accumulate(grads, ins[1], Array::from_vec(vb.shape().to_vec(), db)?);
            }
            Op::Gather { indices } => {
                let vx = self.value(ins[0]);
                let mut dx = vec![0.0; vx.numel()];
                for (&ix, &gv) in indices.iter().zip(g.data()) {
                    if ix != GATHER_ZERO {
                        dx[ix] += gv;
                    }
                }
                Self::accumulate(grads, ins[0], Array::from_vec(vx.shape().to_vec(), dx)?);
            }
            Op::Concat { axis } => {
                if *axis == 0 {
                    let mut row0 = 0;
                    for &p in ins {
                        let (r, c) = self.value(p).dims2()?;
                        let part =
                            g.data()[row0 * c..(row0 + r) * c].to_vec();
                        Self::accumulate(grads, p, Array::matrix(r, c, part)?);
                        row0 += r;
                    }
                } else {
                    let rows = self.value(ins[0]).dims2()?.0;
                    let total_cols = g.dims2()?.1;
                    let mut col0 = 0;
                    for &p in ins {
                        let c = self.value(p).dims2()?.1;
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total_cols + col0;
                            part.extend_from_slice(&g.data()[base..base + c]);
                        }
                        Self::accumulate(grads, p, Array::matrix(rows, c, part)?);
                        col0 += c;
                    }
                }
            }
            Op::Attention { scale } => {
                let (vq, vk, vv) = (
                    self.value(ins[0]),
                    self.value(ins[1]),
                    self.value(ins[2]),
                );
                let (n, d) = vq.dims2()?;
                let (m, dv) = vv.dims2()?;
                let weights = &node.aux[0]; // n×m
                let dvalues = mm_at(weights.data(), g.data(), n, m, dv);
                let dweights = mm_bt(g.data(), vv.data(), n, dv, m);
                // Softmax backward over each row of the weights.
                let mut dscores = vec![0.0; n * m];
                for ((wr, dwr), dsr) in weights
                    .data()
                    .chunks_exact(m)
                    .zip(dweights.chunks_exact(m))
                    .zip(dscores.chunks_exact_mut(m))
                {
                    let dot: f64 = wr.iter().zip(dwr).map(|(&w, &dw)| w * dw).sum();
                    for j in 0..m {
                        dsr[j] = wr[j] * (dwr[j] - dot);
                    }
                }
                for s in dscores.iter_mut() {
                    *s *= scale;
                }
                let dq = mm(&dscores, vk.data(), n, m, d);
                let dk = mm_at(&dscores, vq.data(), n, m, d);
                Self::accumulate(grads, ins[0], Array::matrix(n, d, dq)?);
                Self::accumulate(grads, ins[1], Array::matrix(m, d, dk)?);
                Self::accumulate(grads, ins[2], Array::matrix(m, dv, dvalues)?);
            }
        }
        Ok(())
    }
}

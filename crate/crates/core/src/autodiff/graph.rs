//! Reverse-mode differentiation over an eagerly evaluated computation graph.
//!
//! Every operation appends a node holding its value, op tag, and parent ids,
//! so parents always precede children in creation order. `backward` walks the
//! graph in reverse creation order once and *emits the vector-Jacobian
//! products as new graph nodes*. Because the backward pass is itself built
//! from differentiable ops, a second `backward` call over the extended graph
//! yields exact second-order gradients — enough to differentiate through one
//! inner gradient step. Ops whose gradients never need further
//! differentiation (convolution, pooling, batch norm) lower to opaque
//! gradient primitives; asking for second-order gradients through those is a
//! reported error, not a silent zero.

use super::tensor::{expect_same_shape, Tensor};
use crate::error::{Error, Result};

/// Index of a node in its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Gradient mode for `backward`.
///
/// In `Second` mode the returned gradient nodes stay connected to the graph,
/// so parameters formed from them support a further backward pass. In
/// `First` mode they are detached constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    First,
    Second,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    AddRowVec,
    SumRows,
    BroadcastRow,
    SumCols,
    BroadcastCol,
    ReduceSum,
    ReduceMean,
    BroadcastFill,
    Relu,
    ReluMask,
    Softmax,
    CrossEntropy(Vec<usize>),
    Reshape,
    Conv1d { kernel: usize },
    Conv1dGradX,
    Conv1dGradW,
    Conv1dGradB,
    BatchNorm { eps: f64 },
    BatchNormGradX,
    BatchNormGradGamma,
    BatchNormGradBeta,
    MaxPool { window: usize, stride: usize },
    MaxPoolGrad,
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
            Op::Transpose => "transpose",
            Op::AddRowVec => "add_row_vec",
            Op::SumRows => "sum_rows",
            Op::BroadcastRow => "broadcast_row",
            Op::SumCols => "sum_cols",
            Op::BroadcastCol => "broadcast_col",
            Op::ReduceSum => "reduce_sum",
            Op::ReduceMean => "reduce_mean",
            Op::BroadcastFill => "broadcast_fill",
            Op::Relu => "relu",
            Op::ReluMask => "relu_mask",
            Op::Softmax => "softmax",
            Op::CrossEntropy(_) => "softmax_cross_entropy",
            Op::Reshape => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv1dGradX => "conv1d_grad_x",
            Op::Conv1dGradW => "conv1d_grad_w",
            Op::Conv1dGradB => "conv1d_grad_b",
            Op::BatchNorm { .. } => "batchnorm1d",
            Op::BatchNormGradX => "batchnorm1d_grad_x",
            Op::BatchNormGradGamma => "batchnorm1d_grad_gamma",
            Op::BatchNormGradBeta => "batchnorm1d_grad_beta",
            Op::MaxPool { .. } => "maxpool1d",
            Op::MaxPoolGrad => "maxpool1d_grad",
        }
    }
}

struct NodeRec {
    value: Tensor,
    op: Op,
    parents: Vec<NodeId>,
}

/// A computation graph. Nodes are immutable once created; `backward` only
/// appends. A graph is confined to one execution context at a time; distinct
/// graphs share no state and may run in parallel.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeRec>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeRec { value, op, parents });
        id
    }

    /// Inserts an input node (parameter, constant, or data).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, vec![])
    }

    // ─── Elementwise and scalar ops ─────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        expect_same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        expect_same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        expect_same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(c), vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu, vec![a])
    }

    fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::ReluMask, vec![a])
    }

    // ─── Reductions and broadcasts ──────────────────────────────────────

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::ReduceSum, vec![a])
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let v = Tensor::scalar(s / t.numel() as f64);
        self.push(v, Op::ReduceMean, vec![a])
    }

    fn broadcast_fill(&mut self, scalar: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if !self.value(scalar).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "broadcast_fill",
                detail: format!("expected scalar, got {:?}", self.value(scalar).shape()),
            });
        }
        let v = Tensor::new(shape.clone(), vec![self.value(scalar).item(); shape.iter().product()])?;
        Ok(self.push(v, Op::BroadcastFill, vec![scalar]))
    }

    // ─── 2-D linear algebra ─────────────────────────────────────────────

    fn dims2(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        match self.value(a).shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got {other:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (t, &aval) in arow.iter().enumerate() {
                let brow = &bv[t * n..(t + 1) * n];
                for (o, &bval) in orow.iter_mut().zip(brow) {
                    *o += aval * bval;
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul, vec![a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        Ok(self.push(v, Op::Transpose, vec![a]))
    }

    /// Adds a length-`c` vector to every row of an `[r, c]` matrix.
    pub fn add_row_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("add_row_vec", m)?;
        let vs = self.value(v).shape();
        if vs != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                detail: format!("matrix [{r}, {c}] vs vector {vs:?}"),
            });
        }
        let mv = self.value(m).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] + vv[j]);
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::AddRowVec, vec![m, v]))
    }

    /// Sums an `[r, c]` matrix over rows into `[c]`.
    pub fn sum_rows(&mut self, m: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("sum_rows", m)?;
        let mv = self.value(m).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += mv[i * c + j];
            }
        }
        let t = Tensor::new(vec![c], out)?;
        Ok(self.push(t, Op::SumRows, vec![m]))
    }

    fn broadcast_row(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        let c = match self.value(v).shape() {
            [c] => *c,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_row",
                    detail: format!("expected rank-1 tensor, got {other:?}"),
                })
            }
        };
        let vv = self.value(v).data().to_vec();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&vv);
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::BroadcastRow, vec![v]))
    }

    /// Sums an `[r, c]` matrix over columns into `[r]`.
    fn sum_cols(&mut self, m: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("sum_cols", m)?;
        let mv = self.value(m).data();
        let out: Vec<f64> = (0..r).map(|i| mv[i * c..(i + 1) * c].iter().sum()).collect();
        let t = Tensor::new(vec![r], out)?;
        Ok(self.push(t, Op::SumCols, vec![m]))
    }

    fn broadcast_col(&mut self, v: NodeId, cols: usize) -> Result<NodeId> {
        let r = match self.value(v).shape() {
            [r] => *r,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_col",
                    detail: format!("expected rank-1 tensor, got {other:?}"),
                })
            }
        };
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(r * cols);
        for &x in vv {
            out.extend(std::iter::repeat_n(x, cols));
        }
        let t = Tensor::new(vec![r, cols], out)?;
        Ok(self.push(t, Op::BroadcastCol, vec![v]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape, vec![a]))
    }

    /// Flattens `[B, C, L]` into `[B, C·L]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        match self.value(a).shape() {
            [b, c, l] => {
                let shape = vec![*b, c * l];
                self.reshape(a, shape)
            }
            other => Err(Error::ShapeMismatch {
                op: "flatten",
                detail: format!("expected rank-3 tensor, got {other:?}"),
            }),
        }
    }

    /// Fully connected layer: `x[B, I] · w[O, I]ᵀ + b[O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add_row_vec(xw, b)
    }

    // ─── Softmax / cross-entropy ────────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("softmax", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= sum;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::Softmax, vec![a]))
    }

    /// Per-sample softmax cross-entropy: `logits[B, N]` with one class index
    /// per row, producing the `[B]` vector of `-log softmax(logits)[label]`.
    pub fn cross_entropy_batch(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, n) = self.dims2("softmax_cross_entropy", logits)?;
        if n < 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("need at least 2 classes, got {n}"),
            });
        }
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{b} rows vs {} labels", labels.len()),
            });
        }
        for &y in labels {
            if y >= n {
                return Err(Error::LabelOutOfRange { label: y, classes: n });
            }
        }
        let lv = self.value(logits).data();
        let mut out = Vec::with_capacity(b);
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.push(lse - row[y]);
        }
        let t = Tensor::new(vec![b], out)?;
        Ok(self.push(t, Op::CrossEntropy(labels.to_vec()), vec![logits]))
    }

    /// Single-sample convenience: `logits[N]` and one label, scalar loss.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let n = match self.value(logits).shape() {
            [n] => *n,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    detail: format!("expected rank-1 logits, got {other:?}"),
                })
            }
        };
        let as_row = self.reshape(logits, vec![1, n])?;
        let losses = self.cross_entropy_batch(as_row, &[label])?;
        self.reshape(losses, vec![1])
    }

    // ─── Convolution / pooling / batch norm ─────────────────────────────

    fn dims3(&self, op: &'static str, a: NodeId) -> Result<(usize, usize, usize)> {
        match self.value(a).shape() {
            [b, c, l] => Ok((*b, *c, *l)),
            other => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-3 tensor, got {other:?}"),
            }),
        }
    }

    /// 1-D convolution with stride 1 and zero same-padding (odd kernel):
    /// `x[B, Ci, L] * w[Co, Ci, k] + b[Co] -> [B, Co, L]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, ci, l) = self.dims3("conv1d", x)?;
        let (co, ci2, k) = match self.value(w).shape() {
            [co, ci2, k] => (*co, *ci2, *k),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    detail: format!("expected rank-3 weight, got {other:?}"),
                })
            }
        };
        if ci != ci2 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("input channels {ci} vs weight channels {ci2}"),
            });
        }
        if k % 2 == 0 || k > l {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("kernel {k} must be odd and no longer than input {l}"),
            });
        }
        if self.value(b).shape() != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("bias {:?} vs {co} output channels", self.value(b).shape()),
            });
        }
        let v = conv1d_forward(self.value(x), self.value(w), self.value(b), bs, ci, l, co, k)?;
        Ok(self.push(v, Op::Conv1d { kernel: k }, vec![x, w, b]))
    }

    /// Batch normalization over the batch and spatial dims of `x[B, C, L]`,
    /// using current-batch statistics only.
    pub fn batchnorm1d(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (b, c, l) = self.dims3("batchnorm1d", x)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!(
                    "gamma {:?} / beta {:?} vs {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        if b < 2 {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!("batch statistics need batch >= 2, got {b}"),
            });
        }
        let v = batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), b, c, l, eps)?;
        Ok(self.push(v, Op::BatchNorm { eps }, vec![x, gamma, beta]))
    }

    /// Max pooling over the spatial dim with lowest-index tie-breaking.
    pub fn maxpool1d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (b, c, l) = self.dims3("maxpool1d", x)?;
        if window == 0 || stride == 0 || window > l {
            return Err(Error::ShapeMismatch {
                op: "maxpool1d",
                detail: format!("window {window} / stride {stride} invalid for length {l}"),
            });
        }
        let lo = (l - window) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * lo);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                for o in 0..lo {
                    let start = base + o * stride;
                    let mut m = xv[start];
                    for t in 1..window {
                        if xv[start + t] > m {
                            m = xv[start + t];
                        }
                    }
                    out.push(m);
                }
            }
        }
        let t = Tensor::new(vec![b, c, lo], out)?;
        Ok(self.push(t, Op::MaxPool { window, stride }, vec![x]))
    }

    // ─── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` with respect to `wrt` nodes.
    ///
    /// Gradients come back as graph nodes; read values with [`Graph::value`].
    /// A `wrt` node the loss does not structurally depend on is an error.
    pub fn backward(&mut self, loss: NodeId, wrt: &[NodeId], mode: GradMode) -> Result<Vec<NodeId>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let n = self.nodes.len();

        // Ancestors of the loss (nodes the loss depends on).
        let mut anc = vec![false; n];
        anc[loss.0] = true;
        for id in (0..=loss.0).rev() {
            if anc[id] {
                for p in &self.nodes[id].parents {
                    anc[p.0] = true;
                }
            }
        }
        for w in wrt {
            if !anc[w.0] {
                return Err(Error::UnreachableNode(w.0));
            }
        }

        // Descendants of the wrt set. Restricting the sweep to
        // ancestors-of-loss ∩ descendants-of-wrt skips gradient work for
        // parameters that were not asked for.
        let mut desc = vec![false; n];
        for w in wrt {
            desc[w.0] = true;
        }
        for id in 0..n {
            if !desc[id] {
                desc[id] = self.nodes[id].parents.iter().any(|p| desc[p.0]);
            }
        }
        let needed = |id: usize| anc[id] && desc[id];

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        grads[loss.0] = Some(self.leaf(Tensor::scalar(1.0)));

        for id in (0..=loss.0).rev() {
            if !needed(id) {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let contributions = self.vjp(NodeId(id), g)?;
            for (parent, contrib) in contributions {
                if !needed(parent.0) {
                    continue;
                }
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = match grads[w.0] {
                Some(g) => g,
                // Reachable but with zero derivative everywhere on the path
                // (e.g. only through a relu mask).
                None => self.leaf(Tensor::zeros(self.value(*w).shape().to_vec())),
            };
            let g = match mode {
                GradMode::Second => g,
                GradMode::First => {
                    let detached = self.value(g).clone();
                    self.leaf(detached)
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Emits the vector-Jacobian product of node `id` given upstream `g`,
    /// as `(parent, contribution)` pairs. Zero contributions are omitted.
    fn vjp(&mut self, id: NodeId, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id.0].op.clone();
        let parents = self.nodes[id.0].parents.clone();
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add => vec![(parents[0], g), (parents[1], g)],
            Op::Sub => {
                let neg = self.scale(g, -1.0);
                vec![(parents[0], g), (parents[1], neg)]
            }
            Op::Mul => {
                let da = self.mul(g, parents[1])?;
                let db = self.mul(g, parents[0])?;
                vec![(parents[0], da), (parents[1], db)]
            }
            Op::Scale(c) => vec![(parents[0], self.scale(g, c))],
            Op::MatMul => {
                let bt = self.transpose(parents[1])?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(parents[0])?;
                let db = self.matmul(at, g)?;
                vec![(parents[0], da), (parents[1], db)]
            }
            Op::Transpose => vec![(parents[0], self.transpose(g)?)],
            Op::AddRowVec => {
                let dv = self.sum_rows(g)?;
                vec![(parents[0], g), (parents[1], dv)]
            }
            Op::SumRows => {
                let rows = self.value(parents[0]).shape()[0];
                vec![(parents[0], self.broadcast_row(g, rows)?)]
            }
            Op::BroadcastRow => vec![(parents[0], self.sum_rows(g)?)],
            Op::SumCols => {
                let cols = self.value(parents[0]).shape()[1];
                vec![(parents[0], self.broadcast_col(g, cols)?)]
            }
            Op::BroadcastCol => vec![(parents[0], self.sum_cols(g)?)],
            Op::ReduceSum => {
                let shape = self.value(parents[0]).shape().to_vec();
                vec![(parents[0], self.broadcast_fill(g, shape)?)]
            }
            Op::ReduceMean => {
                let shape = self.value(parents[0]).shape().to_vec();
                let numel: usize = shape.iter().product();
                let scaled = self.scale(g, 1.0 / numel as f64);
                vec![(parents[0], self.broadcast_fill(scaled, shape)?)]
            }
            Op::BroadcastFill => vec![(parents[0], self.reduce_sum(g))],
            Op::Relu => {
                let mask = self.relu_mask(parents[0]);
                vec![(parents[0], self.mul(g, mask)?)]
            }
            // Zero almost everywhere: the mask contributes no gradient.
            Op::ReluMask => vec![],
            Op::Softmax => {
                // dx = y ⊙ (g − rowsum(g ⊙ y))
                let y = id;
                let gy = self.mul(g, y)?;
                let s = self.sum_cols(gy)?;
                let cols = self.value(y).shape()[1];
                let sb = self.broadcast_col(s, cols)?;
                let inner = self.sub(g, sb)?;
                vec![(parents[0], self.mul(y, inner)?)]
            }
            Op::CrossEntropy(labels) => {
                // d logits = (softmax(logits) − onehot) ⊙ g per row.
                let logits = parents[0];
                let (b, n) = self.dims2("softmax_cross_entropy", logits)?;
                let sm = self.softmax(logits)?;
                let mut onehot = vec![0.0; b * n];
                for (i, &y) in labels.iter().enumerate() {
                    onehot[i * n + y] = 1.0;
                }
                let oh = self.leaf(Tensor::new(vec![b, n], onehot)?);
                let diff = self.sub(sm, oh)?;
                let gb = self.broadcast_col(g, n)?;
                vec![(logits, self.mul(gb, diff)?)]
            }
            Op::Reshape => {
                let shape = self.value(parents[0]).shape().to_vec();
                vec![(parents[0], self.reshape(g, shape)?)]
            }
            Op::Conv1d { kernel } => {
                let (x, w, b) = (parents[0], parents[1], parents[2]);
                let dx = {
                    let v = conv1d_grad_x(self.value(w), self.value(g), self.value(x).shape(), kernel)?;
                    self.push(v, Op::Conv1dGradX, vec![w, g])
                };
                let dw = {
                    let v = conv1d_grad_w(self.value(x), self.value(g), self.value(w).shape(), kernel)?;
                    self.push(v, Op::Conv1dGradW, vec![x, g])
                };
                let db = {
                    let v = conv1d_grad_b(self.value(g))?;
                    self.push(v, Op::Conv1dGradB, vec![g])
                };
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::BatchNorm { eps } => {
                let (x, gamma, beta) = (parents[0], parents[1], parents[2]);
                let dx = {
                    let v = batchnorm_grad_x(self.value(x), self.value(gamma), self.value(g), eps)?;
                    self.push(v, Op::BatchNormGradX, vec![x, gamma, g])
                };
                let dgamma = {
                    let v = batchnorm_grad_gamma(self.value(x), self.value(g), eps)?;
                    self.push(v, Op::BatchNormGradGamma, vec![x, g])
                };
                let dbeta = {
                    let v = batchnorm_grad_beta(self.value(g))?;
                    self.push(v, Op::BatchNormGradBeta, vec![g])
                };
                vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
            }
            Op::MaxPool { window, stride } => {
                let x = parents[0];
                let v = maxpool_grad(self.value(x), self.value(g), window, stride)?;
                let dx = self.push(v, Op::MaxPoolGrad, vec![x, g]);
                vec![(x, dx)]
            }
            Op::Conv1dGradX
            | Op::Conv1dGradW
            | Op::Conv1dGradB
            | Op::BatchNormGradX
            | Op::BatchNormGradGamma
            | Op::BatchNormGradBeta
            | Op::MaxPoolGrad => {
                return Err(Error::SecondOrderUnsupported(op.name()));
            }
        })
    }
}

// ─── Numeric kernels for the structured ops ─────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    bs: usize,
    ci: usize,
    l: usize,
    co: usize,
    k: usize,
) -> Result<Tensor> {
    let pad = (k - 1) / 2;
    let xv = x.data();
    let wv = w.data();
    let bv = b.data();
    let mut out = vec![0.0; bs * co * l];
    for bi in 0..bs {
        for oc in 0..co {
            let obase = (bi * co + oc) * l;
            let acc = &mut out[obase..obase + l];
            acc.iter_mut().for_each(|a| *a = bv[oc]);
            for ic in 0..ci {
                let xbase = (bi * ci + ic) * l;
                let xrow = &xv[xbase..xbase + l];
                let wbase = (oc * ci + ic) * k;
                for t in 0..k {
                    let wt = wv[wbase + t];
                    if wt == 0.0 {
                        continue;
                    }
                    // out[i] += wt * x[i + t - pad] for valid indices
                    let (istart, xstart) = if t >= pad { (0, t - pad) } else { (pad - t, 0) };
                    let len = (l - istart).min(l - xstart);
                    for (a, &xval) in acc[istart..istart + len].iter_mut().zip(&xrow[xstart..xstart + len]) {
                        *a += wt * xval;
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, co, l], out)
}

fn conv1d_grad_x(w: &Tensor, g: &Tensor, xshape: &[usize], k: usize) -> Result<Tensor> {
    let (bs, ci, l) = (xshape[0], xshape[1], xshape[2]);
    let co = w.shape()[0];
    let pad = (k - 1) / 2;
    let wv = w.data();
    let gv = g.data();
    let mut out = vec![0.0; bs * ci * l];
    for bi in 0..bs {
        for ic in 0..ci {
            let xbase = (bi * ci + ic) * l;
            let acc = &mut out[xbase..xbase + l];
            for oc in 0..co {
                let gbase = (bi * co + oc) * l;
                let grow = &gv[gbase..gbase + l];
                let wbase = (oc * ci + ic) * k;
                for t in 0..k {
                    let wt = wv[wbase + t];
                    if wt == 0.0 {
                        continue;
                    }
                    // dx[i + t - pad] += wt * g[i]  ⇒  dx[j] += wt * g[j - t + pad]
                    let (jstart, gstart) = if t >= pad { (t - pad, 0) } else { (0, pad - t) };
                    let len = (l - jstart).min(l - gstart);
                    for (a, &gval) in out_slice(acc, jstart, len).iter_mut().zip(&grow[gstart..gstart + len]) {
                        *a += wt * gval;
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, ci, l], out)
}

fn out_slice(acc: &mut [f64], start: usize, len: usize) -> &mut [f64] {
    &mut acc[start..start + len]
}

fn conv1d_grad_w(x: &Tensor, g: &Tensor, wshape: &[usize], k: usize) -> Result<Tensor> {
    let (co, ci) = (wshape[0], wshape[1]);
    let (bs, _, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pad = (k - 1) / 2;
    let xv = x.data();
    let gv = g.data();
    let mut out = vec![0.0; co * ci * k];
    for bi in 0..bs {
        for oc in 0..co {
            let gbase = (bi * co + oc) * l;
            let grow = &gv[gbase..gbase + l];
            for ic in 0..ci {
                let xbase = (bi * ci + ic) * l;
                let xrow = &xv[xbase..xbase + l];
                let wbase = (oc * ci + ic) * k;
                for t in 0..k {
                    // dw[t] += Σ_i g[i] * x[i + t - pad]
                    let (istart, xstart) = if t >= pad { (0, t - pad) } else { (pad - t, 0) };
                    let len = (l - istart).min(l - xstart);
                    let mut s = 0.0;
                    for (gval, xval) in grow[istart..istart + len].iter().zip(&xrow[xstart..xstart + len]) {
                        s += gval * xval;
                    }
                    out[wbase + t] += s;
                }
            }
        }
    }
    Tensor::new(vec![co, ci, k], out)
}

fn conv1d_grad_b(g: &Tensor) -> Result<Tensor> {
    let (bs, co, l) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let gv = g.data();
    let mut out = vec![0.0; co];
    for bi in 0..bs {
        for oc in 0..co {
            let gbase = (bi * co + oc) * l;
            out[oc] += gv[gbase..gbase + l].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![co], out)
}

/// Per-channel mean and inverse std over the batch and spatial dims.
fn batch_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (bs, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = (bs * l) as f64;
    let xv = x.data();
    let mut mean = vec![0.0; c];
    let mut istd = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..bs {
            let base = (bi * c + ch) * l;
            s += xv[base..base + l].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for bi in 0..bs {
            let base = (bi * c + ch) * l;
            for &xval in &xv[base..base + l] {
                let d = xval - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        istd[ch] = 1.0 / (v / m + eps).sqrt();
    }
    (mean, istd)
}

fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    bs: usize,
    c: usize,
    l: usize,
    eps: f64,
) -> Result<Tensor> {
    let (mean, istd) = batch_stats(x, eps);
    let xv = x.data();
    let gv = gamma.data();
    let bv = beta.data();
    let mut out = vec![0.0; bs * c * l];
    for bi in 0..bs {
        for ch in 0..c {
            let base = (bi * c + ch) * l;
            let (mu, is, ga, be) = (mean[ch], istd[ch], gv[ch], bv[ch]);
            for i in 0..l {
                out[base + i] = ga * (xv[base + i] - mu) * is + be;
            }
        }
    }
    Tensor::new(vec![bs, c, l], out)
}

fn batchnorm_grad_x(x: &Tensor, gamma: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    let (bs, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = (bs * l) as f64;
    let (mean, istd) = batch_stats(x, eps);
    let xv = x.data();
    let gav = gamma.data();
    let gv = g.data();
    let mut out = vec![0.0; bs * c * l];
    for ch in 0..c {
        let (mu, is) = (mean[ch], istd[ch]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..bs {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                let xhat = (xv[base + i] - mu) * is;
                sum_g += gv[base + i];
                sum_gx += gv[base + i] * xhat;
            }
        }
        let coef = gav[ch] * is;
        for bi in 0..bs {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                let xhat = (xv[base + i] - mu) * is;
                out[base + i] = coef * (gv[base + i] - sum_g / m - xhat * sum_gx / m);
            }
        }
    }
    Tensor::new(vec![bs, c, l], out)
}

fn batchnorm_grad_gamma(x: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    let (bs, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (mean, istd) = batch_stats(x, eps);
    let xv = x.data();
    let gv = g.data();
    let mut out = vec![0.0; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], istd[ch]);
        for bi in 0..bs {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                out[ch] += gv[base + i] * (xv[base + i] - mu) * is;
            }
        }
    }
    Tensor::new(vec![c], out)
}

fn batchnorm_grad_beta(g: &Tensor) -> Result<Tensor> {
    let (bs, c, l) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let gv = g.data();
    let mut out = vec![0.0; c];
    for bi in 0..bs {
        for ch in 0..c {
            let base = (bi * c + ch) * l;
            out[ch] += gv[base..base + l].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], out)
}

fn maxpool_grad(x: &Tensor, g: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (bs, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lo = g.shape()[2];
    let xv = x.data();
    let gv = g.data();
    let mut out = vec![0.0; bs * c * l];
    for bi in 0..bs {
        for ch in 0..c {
            let xbase = (bi * c + ch) * l;
            let gbase = (bi * c + ch) * lo;
            for o in 0..lo {
                let start = xbase + o * stride;
                // Ties broken by lowest index: strict comparison keeps the
                // first maximum.
                let mut best = 0;
                for t in 1..window {
                    if xv[start + t] > xv[start + best] {
                        best = t;
                    }
                }
                out[start + best] += gv[gbase + o];
            }
        }
    }
    Tensor::new(vec![bs, c, l], out)
}

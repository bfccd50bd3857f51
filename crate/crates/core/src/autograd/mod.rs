//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as it executes (eager evaluation) and
//! hands back a [`Var`] handle. Calling [`Tape::backward`] on a scalar
//! replays the record in exact reverse order and returns the gradients of
//! every leaf that was recorded with `requires_grad`.
//!
//! Tapes are built per forward pass and dropped afterwards; there is no
//! graph reuse.
//!
//! ```
//! use alignrec::autograd::Tape;
//! use alignrec::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap().with_grad());
//! let loss = tape.sum_squares(x).unwrap();
//! let loss = tape.scale(loss, 0.5).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[1.0, -2.0, 3.0]);
//! ```

mod ops;
mod sparse;

use std::sync::Arc;

pub use ops::Pointwise;
pub use sparse::SparseMatrix;

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    Conv1dDilated,
    Conv1x1,
    GlobalAvgPool,
    BroadcastLen,
    Concat,
    SliceChannels,
    Relu,
    Sigmoid,
    Mul,
    Max,
    Add,
    Sub,
    Scale,
    Exp,
    Softplus,
    L2Normalize,
    Reshape,
    Transpose,
    MeanChannels,
    GatherRows,
    RowDot,
    MatmulNT,
    SqDists,
    LogSumExpRows,
    Diag,
    Sum,
    Mean,
    SumSquares,
    SpMM,
}

impl OpKind {
    pub const ALL: [OpKind; 31] = [
        OpKind::Leaf,
        OpKind::Linear,
        OpKind::Conv1dDilated,
        OpKind::Conv1x1,
        OpKind::GlobalAvgPool,
        OpKind::BroadcastLen,
        OpKind::Concat,
        OpKind::SliceChannels,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Mul,
        OpKind::Max,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::Exp,
        OpKind::Softplus,
        OpKind::L2Normalize,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::MeanChannels,
        OpKind::GatherRows,
        OpKind::RowDot,
        OpKind::MatmulNT,
        OpKind::SqDists,
        OpKind::LogSumExpRows,
        OpKind::Diag,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumSquares,
        OpKind::SpMM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::Conv1dDilated => "conv1d_dilated",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BroadcastLen => "broadcast_len",
            OpKind::Concat => "concat_channels",
            OpKind::SliceChannels => "slice_channels",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Mul => "mul",
            OpKind::Max => "max",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Exp => "exp",
            OpKind::Softplus => "softplus",
            OpKind::L2Normalize => "l2_normalize_rows",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::MeanChannels => "mean_channels",
            OpKind::GatherRows => "gather_rows",
            OpKind::RowDot => "row_dot",
            OpKind::MatmulNT => "matmul_nt",
            OpKind::SqDists => "sq_dists",
            OpKind::LogSumExpRows => "logsumexp_rows",
            OpKind::Diag => "diag",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumSquares => "sum_squares",
            OpKind::SpMM => "spmm",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// How the second operand of a binary pointwise op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `b` is `(.., C, 1)`: one value per channel, repeated along length.
    PerChannel,
    /// `b` is `(.., 1, L)`: one value per position, repeated over channels.
    PerPosition,
}

pub(crate) enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, k: Var, dilation: usize },
    Conv1x1 { x: Var, k: Var, b: Option<Var> },
    GlobalAvgPool { x: Var },
    BroadcastLen { x: Var },
    Concat { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    Mul { a: Var, b: Var, bc: Broadcast },
    Max { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Exp { x: Var },
    Softplus { x: Var },
    L2Normalize { x: Var, norms: Vec<f64> },
    Reshape { x: Var },
    Transpose { x: Var },
    MeanChannels { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    RowDot { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    SqDists { a: Var, b: Var },
    LogSumExpRows { x: Var },
    Diag { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumSquares { x: Var },
    SpMM { adj: Arc<SparseMatrix>, x: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv1d { .. } => OpKind::Conv1dDilated,
            Op::Conv1x1 { .. } => OpKind::Conv1x1,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::BroadcastLen { .. } => OpKind::BroadcastLen,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Mul { .. } => OpKind::Mul,
            Op::Max { .. } => OpKind::Max,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Scale { .. } => OpKind::Scale,
            Op::Exp { .. } => OpKind::Exp,
            Op::Softplus { .. } => OpKind::Softplus,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::MeanChannels { .. } => OpKind::MeanChannels,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::RowDot { .. } => OpKind::RowDot,
            Op::MatmulNT { .. } => OpKind::MatmulNT,
            Op::SqDists { .. } => OpKind::SqDists,
            Op::LogSumExpRows { .. } => OpKind::LogSumExpRows,
            Op::Diag { .. } => OpKind::Diag,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumSquares { .. } => OpKind::SumSquares,
            Op::SpMM { .. } => OpKind::SpMM,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } | Op::Conv1x1 { x, k: w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv1d { x, k, .. } => vec![*x, *k],
            Op::Concat { parts } => parts.clone(),
            Op::Mul { a, b, .. }
            | Op::Max { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::RowDot { a, b }
            | Op::MatmulNT { a, b }
            | Op::SqDists { a, b } => vec![*a, *b],
            Op::GlobalAvgPool { x }
            | Op::BroadcastLen { x }
            | Op::SliceChannels { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::Exp { x }
            | Op::Softplus { x }
            | Op::L2Normalize { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x }
            | Op::MeanChannels { x }
            | Op::GatherRows { x, .. }
            | Op::LogSumExpRows { x }
            | Op::Diag { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumSquares { x }
            | Op::SpMM { x, .. } => vec![*x],
        }
    }
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Ordered record of executed primitives.
///
/// A tape and its values belong to one thread for the duration of a
/// forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    order: Vec<usize>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it does not require one or is not
    /// an ancestor of the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor`'s grad slot; a zero gradient is
    /// used for leaves the loss does not depend on.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.len()]),
        }
    }

    /// Node indices in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Makes the backward rule of `kind` return sign-flipped gradients.
    ///
    /// This is a mutation hook for exercising gradient checks; nothing in
    /// training sets it.
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `tensor`; it takes part in differentiation when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad())
    }

    /// Records a copy of `tensor` as a differentiable parameter regardless
    /// of its flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), true)
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push_leaf(shape, tensor.into_data(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        let kind = op.kind();
        check_finite(&value, kind.name())?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded values are valid")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::dim(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("{loss:?} is not on this tape")))?;
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut order = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            order.push(id);
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backprop(id, &g, &mut grads);
        }
        for (id, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, order })
    }

    /// Zero-initialised gradient buffer for `v`, or `None` if `v` takes no
    /// gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if let Some(dst) = self.slot(grads, v) {
            dst.iter_mut().zip(contrib).for_each(|(d, c)| *d += c);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (&self.node(*x).shape, &self.node(*w).shape);
                let (n, din, dout) = (xs[0], xs[1], ws[1]);
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let wrow = &wv[i * dout..(i + 1) * dout];
                            gx[r * din + i] += dot(grow, wrow);
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let xi = xv[r * din + i];
                            if xi != 0.0 {
                                axpy(xi, grow, &mut gw[i * dout..(i + 1) * dout]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in 0..n {
                            axpy(1.0, &g[r * dout..(r + 1) * dout], gb);
                        }
                    }
                }
            }
            Op::Conv1d { x, k, dilation } => {
                let (bsz, cin, len) = ops::bcl(&self.node(*x).shape);
                let cout = self.node(*k).shape[0];
                let (xv, kv) = (self.value(*x), self.value(*k));
                let d = *dilation as isize;
                if self.wants(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for bb in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(bb * cout + o) * len..(bb * cout + o + 1) * len];
                            for c in 0..cin {
                                let dst = &mut gx[(bb * cin + c) * len..(bb * cin + c + 1) * len];
                                for t in 0..3 {
                                    let w = kv[(o * cin + c) * 3 + t];
                                    let off = (t as isize - 1) * d;
                                    let (lo, hi) = ops::tap_range(len, off);
                                    for l in lo..hi {
                                        dst[(l as isize + off) as usize] += w * grow[l];
                                    }
                                }
                            }
                        }
                    }
                    self.add_into(grads, *x, &gx);
                }
                if let Some(gk) = self.slot(grads, *k) {
                    for bb in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(bb * cout + o) * len..(bb * cout + o + 1) * len];
                            for c in 0..cin {
                                let src = &xv[(bb * cin + c) * len..(bb * cin + c + 1) * len];
                                for t in 0..3 {
                                    let off = (t as isize - 1) * d;
                                    let (lo, hi) = ops::tap_range(len, off);
                                    let mut acc = 0.0;
                                    for l in lo..hi {
                                        acc += grow[l] * src[(l as isize + off) as usize];
                                    }
                                    gk[(o * cin + c) * 3 + t] += acc;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv1x1 { x, k, b } => {
                let (bsz, cin, len) = ops::bcl(&self.node(*x).shape);
                let cout = self.node(*k).shape[0];
                let (xv, kv) = (self.value(*x), self.value(*k));
                if let Some(gx) = self.slot(grads, *x) {
                    for bb in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(bb * cout + o) * len..(bb * cout + o + 1) * len];
                            for c in 0..cin {
                                let w = kv[o * cin + c];
                                axpy(w, grow, &mut gx[(bb * cin + c) * len..(bb * cin + c + 1) * len]);
                            }
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, *k) {
                    for bb in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(bb * cout + o) * len..(bb * cout + o + 1) * len];
                            for c in 0..cin {
                                let src = &xv[(bb * cin + c) * len..(bb * cin + c + 1) * len];
                                gk[o * cin + c] += dot(grow, src);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for bb in 0..bsz {
                            for o in 0..cout {
                                gb[o] += g[(bb * cout + o) * len..(bb * cout + o + 1) * len].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, len) = ops::bcl(&self.node(*x).shape);
                if let Some(gx) = self.slot(grads, *x) {
                    let inv = 1.0 / len as f64;
                    for (row, gv) in g.iter().enumerate() {
                        gx[row * len..(row + 1) * len].iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::BroadcastLen { x } => {
                let len = *node.shape.last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, d) in gx.iter_mut().enumerate() {
                        *d += g[row * len..(row + 1) * len].iter().sum::<f64>();
                    }
                }
            }
            Op::Concat { parts } => {
                let (bsz, ctot, len) = ops::bcl(&node.shape);
                let mut offset = 0;
                for p in parts {
                    let (_, c, _) = ops::bcl(&self.node(*p).shape);
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(bsz * c * len);
                        for bb in 0..bsz {
                            let start = (bb * ctot + offset) * len;
                            gp.extend_from_slice(&g[start..start + c * len]);
                        }
                        self.add_into(grads, *p, &gp);
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (bsz, c, len) = ops::bcl(&self.node(*x).shape);
                let (_, take, _) = ops::bcl(&node.shape);
                if let Some(gx) = self.slot(grads, *x) {
                    for bb in 0..bsz {
                        let dst = (bb * c + start) * len;
                        let src = bb * take * len;
                        axpy(1.0, &g[src..src + take * len], &mut gx[dst..dst + take * len]);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Mul {
                a,
                b,
                bc: Broadcast::Same,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.add_into(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.add_into(grads, *b, &gb);
                }
            }
            Op::Mul { a, b, bc } => {
                let (bsz, c, len) = ops::bcl(&node.shape);
                let (av, bv) = (self.value(*a), self.value(*b));
                let bidx = |bb: usize, ch: usize, l: usize| match bc {
                    Broadcast::Same => (bb * c + ch) * len + l,
                    Broadcast::PerChannel => bb * c + ch,
                    Broadcast::PerPosition => bb * len + l,
                };
                let mut ga = self.wants(*a).then(|| vec![0.0; av.len()]);
                let mut gb = self.wants(*b).then(|| vec![0.0; bv.len()]);
                for bb in 0..bsz {
                    for ch in 0..c {
                        for l in 0..len {
                            let i = (bb * c + ch) * len + l;
                            let j = bidx(bb, ch, l);
                            if let Some(ga) = &mut ga {
                                ga[i] += g[i] * bv[j];
                            }
                            if let Some(gb) = &mut gb {
                                gb[j] += g[i] * av[i];
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    self.add_into(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    self.add_into(grads, *b, &gb);
                }
            }
            Op::Max { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // Ties route to the first operand.
                let ga: Vec<f64> = (0..g.len()).map(|i| if av[i] >= bv[i] { g[i] } else { 0.0 }).collect();
                let gb: Vec<f64> = (0..g.len()).map(|i| if av[i] >= bv[i] { 0.0 } else { g[i] }).collect();
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::Add { a, b } => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.add_into(grads, *a, g);
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_into(grads, *b, &neg);
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(*c, g, gx);
                }
            }
            Op::Exp { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * out[i];
                    }
                }
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * ops::sigmoid(xv[i]);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let cols = *node.shape.last().unwrap();
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (grow, yrow) = (&g[span.clone()], &out[span.clone()]);
                        let raw = dot(&xv[span.clone()], &xv[span.clone()]).sqrt();
                        if raw > ops::NORM_EPS {
                            let proj = dot(yrow, grow);
                            for (k, i) in span.enumerate() {
                                gx[i] += (grow[k] - yrow[k] * proj) / n;
                            }
                        } else {
                            for (k, i) in span.enumerate() {
                                gx[i] += grow[k] / n;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => self.add_into(grads, *x, g),
            Op::Transpose { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::MeanChannels { x } => {
                let (bsz, c, len) = ops::bcl(&self.node(*x).shape);
                if let Some(gx) = self.slot(grads, *x) {
                    let inv = 1.0 / c as f64;
                    for bb in 0..bsz {
                        let grow = &g[bb * len..(bb + 1) * len];
                        for ch in 0..c {
                            axpy(inv, grow, &mut gx[(bb * c + ch) * len..(bb * c + ch + 1) * len]);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = *node.shape.last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * cols..(r + 1) * cols], &mut gx[src * cols..(src + 1) * cols]);
                    }
                }
            }
            Op::RowDot { a, b } => {
                let cols = self.node(*a).shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for (r, gr) in g.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    axpy(*gr, &bv[span.clone()], &mut ga[span.clone()]);
                    axpy(*gr, &av[span.clone()], &mut gb[span]);
                }
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::MatmulNT { a, b } => {
                let (n, d) = (self.node(*a).shape[0], self.node(*a).shape[1]);
                let m = self.node(*b).shape[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij != 0.0 {
                            axpy(gij, &bv[j * d..(j + 1) * d], &mut ga[i * d..(i + 1) * d]);
                            axpy(gij, &av[i * d..(i + 1) * d], &mut gb[j * d..(j + 1) * d]);
                        }
                    }
                }
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::SqDists { a, b } => {
                let (n, d) = (self.node(*a).shape[0], self.node(*a).shape[1]);
                let m = self.node(*b).shape[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..n {
                    let ai = &av[i * d..(i + 1) * d];
                    for j in 0..m {
                        let w = 2.0 * g[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        let bj = &bv[j * d..(j + 1) * d];
                        for k in 0..d {
                            let diff = w * (ai[k] - bj[k]);
                            ga[i * d + k] += diff;
                            gb[j * d + k] -= diff;
                        }
                    }
                }
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::LogSumExpRows { x } => {
                let cols = self.node(*x).shape[1];
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, gr) in g.iter().enumerate() {
                        let lse = out[r];
                        for c in 0..cols {
                            gx[r * cols + c] += gr * (xv[r * cols + c] - lse).exp();
                        }
                    }
                }
            }
            Op::Diag { x } => {
                let n = node.shape[0];
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumSquares { x } => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(2.0 * g[0], xv, gx);
                }
            }
            Op::SpMM { adj, x } => {
                let width = *node.shape.last().unwrap();
                if self.wants(*x) {
                    let gx = adj.mul_dense_transposed(g, width);
                    self.add_into(grads, *x, &gx);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(d, s)| *d += alpha * s);
}

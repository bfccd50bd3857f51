//! Forward rules for every primitive. Backward rules live next to the tape.

use std::sync::Arc;

use super::{axpy, dot, Broadcast, Op, SparseMatrix, Tape, Var};
use crate::error::{Error, Result};

/// Floor applied to row norms in [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Pointwise primitive selector for [`Tape::pointwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Mul,
    Max,
}

/// Views a rank-2 `(C, L)` or rank-3 `(B, C, L)` shape as `(B, C, L)`.
pub(crate) fn bcl(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("expected a (C, L) or (B, C, L) shape, got {shape:?}"),
    }
}

/// Output positions `l` for which `l + offset` lies inside `[0, len)`.
pub(crate) fn tap_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn with_len(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = last;
    s
}

impl Tape {
    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(shape, value, op)
    }

    fn require_rank(&self, v: Var, ranks: &[usize], what: &str) -> Result<()> {
        let shape = self.shape(v);
        if !ranks.contains(&shape.len()) {
            return Err(Error::dim(format!(
                "{what}: unsupported shape {shape:?} (rank must be one of {ranks:?})"
            )));
        }
        Ok(())
    }

    /// `x · W (+ b)` for `x: (N, D_in)`, `W: (D_in, D_out)`, `b: (D_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} does not match output width {dout}",
                    self.shape(b)
                )));
            }
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let dst = &mut out[r * dout..(r + 1) * dout];
            for i in 0..din {
                let xi = xv[r * din + i];
                if xi != 0.0 {
                    axpy(xi, &wv[i * dout..(i + 1) * dout], dst);
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..n {
                axpy(1.0, bv, &mut out[r * dout..(r + 1) * dout]);
            }
        }
        self.push(vec![n, dout], out, Op::Linear { x, w, b })
    }

    /// Length-3 dilated convolution with symmetric zero padding of exactly
    /// `dilation`, so the output keeps the input length.
    ///
    /// `x: (C_in, L)` or `(B, C_in, L)`, `kernel: (C_out, C_in, 3)`.
    pub fn conv1d_dilated(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::param(format!("dilation must be at least 1, got {dilation}")));
        }
        self.require_rank(x, &[2, 3], "conv1d_dilated")?;
        let ks = self.shape(kernel).to_vec();
        let (bsz, cin, len) = bcl(self.shape(x));
        if ks.len() != 3 || ks[1] != cin || ks[2] != 3 {
            return Err(Error::dim(format!(
                "conv1d_dilated: kernel {ks:?} does not fit input {:?}",
                self.shape(x)
            )));
        }
        let cout = ks[0];
        let (xv, kv) = (self.value(x), self.value(kernel));
        let d = dilation as isize;
        let mut out = vec![0.0; bsz * cout * len];
        for bb in 0..bsz {
            for o in 0..cout {
                let dst = &mut out[(bb * cout + o) * len..(bb * cout + o + 1) * len];
                for c in 0..cin {
                    let src = &xv[(bb * cin + c) * len..(bb * cin + c + 1) * len];
                    for t in 0..3 {
                        let w = kv[(o * cin + c) * 3 + t];
                        let off = (t as isize - 1) * d;
                        let (lo, hi) = tap_range(len, off);
                        for l in lo..hi {
                            dst[l] += w * src[(l as isize + off) as usize];
                        }
                    }
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let ch = shape.len() - 2;
        shape[ch] = cout;
        self.push(shape, out, Op::Conv1d { x, k: kernel, dilation })
    }

    /// Pointwise channel mixing: `out[o, l] = Σ_c kernel[o, c]·x[c, l] (+ bias[o])`.
    pub fn conv1x1(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        self.require_rank(x, &[2, 3], "conv1x1")?;
        let ks = self.shape(kernel).to_vec();
        let (bsz, cin, len) = bcl(self.shape(x));
        if ks.len() != 2 || ks[1] != cin {
            return Err(Error::dim(format!(
                "conv1x1: kernel {ks:?} does not fit input {:?}",
                self.shape(x)
            )));
        }
        let cout = ks[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv1x1: bias {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        let (xv, kv) = (self.value(x), self.value(kernel));
        let bv = bias.map(|b| self.value(b));
        let mut out = vec![0.0; bsz * cout * len];
        for bb in 0..bsz {
            for o in 0..cout {
                let dst = &mut out[(bb * cout + o) * len..(bb * cout + o + 1) * len];
                if let Some(bv) = bv {
                    dst.iter_mut().for_each(|d| *d = bv[o]);
                }
                for c in 0..cin {
                    axpy(
                        kv[o * cin + c],
                        &xv[(bb * cin + c) * len..(bb * cin + c + 1) * len],
                        dst,
                    );
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let ch = shape.len() - 2;
        shape[ch] = cout;
        self.push(shape, out, Op::Conv1x1 { x, k: kernel, b: bias })
    }

    /// Mean over the length axis: `(C, L) → (C, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.require_rank(x, &[2, 3], "global_avg_pool")?;
        let (_, _, len) = bcl(self.shape(x));
        let value = self
            .value(x)
            .chunks(len)
            .map(|row| row.iter().sum::<f64>() / len as f64)
            .collect();
        let shape = with_len(self.shape(x), 1);
        self.push(shape, value, Op::GlobalAvgPool { x })
    }

    /// Repeats a `(C, 1)` map along a new length `len`.
    pub fn broadcast_len(&mut self, x: Var, len: usize) -> Result<Var> {
        if len < 1 {
            return Err(Error::param("broadcast length must be at least 1"));
        }
        self.require_rank(x, &[2, 3], "broadcast_len")?;
        if *self.shape(x).last().unwrap() != 1 {
            return Err(Error::dim(format!(
                "broadcast_len: source {:?} must have length 1",
                self.shape(x)
            )));
        }
        let value = self
            .value(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, len))
            .collect();
        let shape = with_len(self.shape(x), len);
        self.push(shape, value, Op::BroadcastLen { x })
    }

    /// Stacks `(C_i, L)` maps along the channel axis in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_channels: no parts"))?;
        self.require_rank(first, &[2, 3], "concat_channels")?;
        let rank = self.shape(first).len();
        let (bsz, _, len) = bcl(self.shape(first));
        let mut ctot = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || bcl(s).0 != bsz || bcl(s).2 != len {
                return Err(Error::dim(format!(
                    "concat_channels: part {s:?} does not match {:?}",
                    self.shape(first)
                )));
            }
            ctot += bcl(s).1;
        }
        let mut out = Vec::with_capacity(bsz * ctot * len);
        for bb in 0..bsz {
            for &p in parts {
                let (_, c, _) = bcl(self.shape(p));
                out.extend_from_slice(&self.value(p)[bb * c * len..(bb + 1) * c * len]);
            }
        }
        let mut shape = self.shape(first).to_vec();
        shape[rank - 2] = ctot;
        self.push(shape, out, Op::Concat { parts: parts.to_vec() })
    }

    /// Channels `start..start + count` of a `(C, L)` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        self.require_rank(x, &[2, 3], "slice_channels")?;
        let (bsz, c, len) = bcl(self.shape(x));
        if count == 0 || start + count > c {
            return Err(Error::dim(format!(
                "slice_channels: {start}..{} outside {c} channels",
                start + count
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bsz * count * len);
        for bb in 0..bsz {
            let from = (bb * c + start) * len;
            out.extend_from_slice(&xv[from..from + count * len]);
        }
        let mut shape = self.shape(x).to_vec();
        let rank = shape.len();
        shape[rank - 2] = count;
        self.push(shape, out, Op::SliceChannels { x, start })
    }

    /// Dispatches to one of the pointwise primitives. `b` is required for
    /// the binary kinds and ignored otherwise.
    pub fn pointwise(&mut self, kind: Pointwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need = |b: Option<Var>| b.ok_or_else(|| Error::dim(format!("{kind:?} needs a second operand")));
        match kind {
            Pointwise::Relu => self.relu(a),
            Pointwise::Sigmoid => self.sigmoid(a),
            Pointwise::Mul => self.mul(a, need(b)?),
            Pointwise::Max => self.max(a, need(b)?),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::exp, Op::Exp { x })
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, softplus, Op::Softplus { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Numerical(format!("scale factor {c}")));
        }
        self.map_unary(x, |v| v * c, Op::Scale { x, c })
    }

    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if (sa.len() == 2 || sa.len() == 3) && sa.len() == sb.len() {
            let r = sa.len();
            if sb[..r - 1] == sa[..r - 1] && sb[r - 1] == 1 {
                return Ok(Broadcast::PerChannel);
            }
            if sb[..r - 2] == sa[..r - 2] && sb[r - 2] == 1 && sb[r - 1] == sa[r - 1] {
                return Ok(Broadcast::PerPosition);
            }
        }
        Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} are incompatible")))
    }

    /// Elementwise product. `b` may match `a`, or be `(C, 1)` (per-channel
    /// weights) or `(1, L)` (per-position weights) against `a: (C, L)`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(a, b, "mul")?;
        let shape = self.shape(a).to_vec();
        let (av, bv) = (self.value(a), self.value(b));
        let value = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            _ => {
                let (bsz, c, len) = bcl(&shape);
                let mut out = Vec::with_capacity(av.len());
                for bb in 0..bsz {
                    for ch in 0..c {
                        for l in 0..len {
                            let j = if bc == Broadcast::PerChannel {
                                bb * c + ch
                            } else {
                                bb * len + l
                            };
                            out.push(av[(bb * c + ch) * len + l] * bv[j]);
                        }
                    }
                }
                out
            }
        };
        self.push(shape, value, Op::Mul { a, b, bc })
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "max")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x.max(*y))
            .collect();
        self.push(self.shape(a).to_vec(), value, Op::Max { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), value, Op::Sub { a, b })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Divides each row of `(N, D)` by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.require_rank(x, &[2], "l2_normalize_rows")?;
        let cols = self.shape(x)[1];
        let xv = self.value(x);
        let norms: Vec<f64> = xv.chunks(cols).map(|r| dot(r, r).sqrt().max(NORM_EPS)).collect();
        let value = xv
            .chunks(cols)
            .zip(&norms)
            .flat_map(|(r, n)| r.iter().map(move |v| v / n))
            .collect();
        self.push(self.shape(x).to_vec(), value, Op::L2Normalize { x, norms })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        self.push(shape.to_vec(), value, Op::Reshape { x })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.require_rank(x, &[2], "transpose")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose { x })
    }

    /// Mean over channels at each position: `(C, L) → (1, L)`.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        self.require_rank(x, &[2, 3], "mean_channels")?;
        let (bsz, c, len) = bcl(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; bsz * len];
        for bb in 0..bsz {
            let dst = &mut out[bb * len..(bb + 1) * len];
            for ch in 0..c {
                axpy(1.0 / c as f64, &xv[(bb * c + ch) * len..(bb * c + ch + 1) * len], dst);
            }
        }
        let mut shape = self.shape(x).to_vec();
        let rank = shape.len();
        shape[rank - 2] = 1;
        self.push(shape, out, Op::MeanChannels { x })
    }

    /// Rows `idx` of an `(R, D)` matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.require_rank(x, &[2], "gather_rows")?;
        let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
        if idx.is_empty() {
            return Err(Error::dim("gather_rows: empty index list"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!(
                    "gather_rows: row {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        self.push(vec![idx.len(), cols], out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Row-wise inner products of two `(N, D)` matrices, giving `(N, 1)`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_rank(a, &[2], "row_dot")?;
        self.same_shape(a, b, "row_dot")?;
        let cols = self.shape(a)[1];
        let value: Vec<f64> = self
            .value(a)
            .chunks(cols)
            .zip(self.value(b).chunks(cols))
            .map(|(x, y)| dot(x, y))
            .collect();
        let n = value.len();
        self.push(vec![n, 1], value, Op::RowDot { a, b })
    }

    /// `a · bᵀ` for `a: (N, D)`, `b: (M, D)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!(
                "matmul_nt: shapes {sa:?} and {sb:?} are incompatible"
            )));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
            }
        }
        self.push(vec![n, m], out, Op::MatmulNT { a, b })
    }

    /// Pairwise squared Euclidean distances between rows: `(N, M)`.
    pub fn sq_dists(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!(
                "sq_dists: shapes {sa:?} and {sb:?} are incompatible"
            )));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &bv[j * d..(j + 1) * d];
                out[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.push(vec![n, m], out, Op::SqDists { a, b })
    }

    /// Stable `log Σ_j exp(x[i, j])` per row, giving `(N, 1)`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        self.require_rank(x, &[2], "logsumexp_rows")?;
        let cols = self.shape(x)[1];
        let value: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let n = value.len();
        self.push(vec![n, 1], value, Op::LogSumExpRows { x })
    }

    /// Main diagonal of a square matrix as `(N, 1)`.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim(format!("diag: {s:?} is not square")));
        }
        let n = s[0];
        let value = (0..n).map(|i| self.value(x)[i * n + i]).collect();
        self.push(vec![n, 1], value, Op::Diag { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean { x })
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = dot(self.value(x), self.value(x));
        self.push(vec![1], vec![s], Op::SumSquares { x })
    }

    /// Sparse-dense product `adj · x` for `x: (adj.cols, D)`.
    pub fn spmm(&mut self, adj: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        self.require_rank(x, &[2], "spmm")?;
        let (rows, width) = (self.shape(x)[0], self.shape(x)[1]);
        if rows != adj.cols() {
            return Err(Error::dim(format!(
                "spmm: operator is {}x{} but input has {rows} rows",
                adj.rows(),
                adj.cols()
            )));
        }
        let value = adj.mul_dense(self.value(x), width);
        self.push(
            vec![adj.rows(), width],
            value,
            Op::SpMM {
                adj: Arc::clone(adj),
                x,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.25, 4.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let id = tape.constant(Tensor::eye(3).unwrap());
        let y = tape.linear(xv, id, None).unwrap();
        assert_eq!(tape.value(y), x.data());
        let z = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
        let y = tape.linear(xv, z, None).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut r = rng();
        let x = Tensor::random_uniform(&[2, 3], &mut r).unwrap();
        let w = Tensor::random_uniform(&[3, 2], &mut r).unwrap();
        let b = Tensor::random_uniform(&[2], &mut r).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        for n in 0..2 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for i in 0..3 {
                    acc += x.at(&[n, i]) * w.at(&[i, j]);
                }
                assert!((tape.value(y)[n * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let w = tape.constant(Tensor::zeros(&[4, 2]).unwrap());
        let msg = tape.linear(x, w, None).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv1d_identity_tap_and_zero_kernel() {
        let x = Tensor::new(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        for d in [1, 2, 6] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let k = tape.constant(Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
            let y = tape.conv1d_dilated(xv, k, d).unwrap();
            assert_eq!(tape.value(y), x.data());
            let k0 = tape.constant(Tensor::zeros(&[2, 1, 3]).unwrap());
            let y0 = tape.conv1d_dilated(xv, k0, d).unwrap();
            assert_eq!(tape.shape(y0), &[2, 5]);
            assert!(tape.value(y0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv1d_matches_direct_summation() {
        let mut r = rng();
        let x = Tensor::random_uniform(&[2, 9], &mut r).unwrap();
        let k = Tensor::random_uniform(&[3, 2, 3], &mut r).unwrap();
        let d = 2isize;
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv1d_dilated(xv, kv, 2).unwrap();
        // Explicitly padded copy of the input.
        let pad = |c: usize, p: isize| -> f64 {
            if (0..9).contains(&p) {
                x.at(&[c, p as usize])
            } else {
                0.0
            }
        };
        for o in 0..3 {
            for l in 0..9isize {
                let mut acc = 0.0;
                for c in 0..2 {
                    for kk in -1..=1isize {
                        acc += k.at(&[o, c, (kk + 1) as usize]) * pad(c, l + kk * d);
                    }
                }
                assert!((tape.value(y)[o * 9 + l as usize] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_rejects_bad_args() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
        let k = tape.constant(Tensor::zeros(&[1, 2, 3]).unwrap());
        assert!(matches!(tape.conv1d_dilated(x, k, 0), Err(Error::Parameter(_))));
        let bad = tape.constant(Tensor::zeros(&[1, 3, 3]).unwrap());
        assert!(matches!(tape.conv1d_dilated(x, bad, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1x1_reduces_to_linear_on_transpose() {
        let mut r = rng();
        let x = Tensor::random_uniform(&[3, 4], &mut r).unwrap();
        let k = Tensor::random_uniform(&[2, 3], &mut r).unwrap();
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x), tape.constant(k));
        let y = tape.conv1x1(xv, kv, None).unwrap();
        // (kernel · x)ᵀ = xᵀ · kernelᵀ
        let xt = tape.transpose(xv).unwrap();
        let kt = tape.transpose(kv).unwrap();
        let lin = tape.linear(xt, kt, None).unwrap();
        let lin = tape.transpose(lin).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(lin)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1_identity_and_zero() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let id = tape.constant(Tensor::eye(2).unwrap());
        let y = tape.conv1x1(xv, id, None).unwrap();
        assert_eq!(tape.value(y), x.data());
        let z = tape.constant(Tensor::zeros(&[4, 2]).unwrap());
        let y = tape.conv1x1(xv, z, None).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_and_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p), &[2.0]);
        let c = tape.constant(Tensor::full(&[2, 4], 1.5).unwrap());
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p), &[1.5, 1.5]);
        let src = tape.constant(Tensor::new(&[2, 1], vec![7.0, -1.0]).unwrap());
        let b = tape.broadcast_len(src, 3).unwrap();
        assert_eq!(tape.value(b), &[7.0, 7.0, 7.0, -1.0, -1.0, -1.0]);
        let same = tape.broadcast_len(src, 1).unwrap();
        assert_eq!(tape.value(same), tape.value(src));
        assert!(matches!(tape.broadcast_len(src, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn concat_preserves_order_and_slices_back() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = tape.slice_channels(c, 1, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let bad = tape.constant(Tensor::zeros(&[1, 3]).unwrap());
        assert!(tape.concat_channels(&[a, bad]).is_err());
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
    }

    #[test]
    fn pointwise_spot_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1]).unwrap());
        let s = tape.pointwise(Pointwise::Sigmoid, z, None).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
        let a = tape.constant(Tensor::new(&[3], vec![-1.0, 0.5, 2.0]).unwrap());
        let m = tape.pointwise(Pointwise::Max, a, Some(a)).unwrap();
        assert_eq!(tape.value(m), tape.value(a));
        let r = tape.pointwise(Pointwise::Relu, a, None).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.5, 2.0]);
        assert!(tape.pointwise(Pointwise::Mul, a, None).is_err());
    }

    #[test]
    fn mul_broadcast_matches_loop() {
        let mut r = rng();
        let f = Tensor::random_uniform(&[3, 5], &mut r).unwrap();
        let wc = Tensor::random_uniform(&[3, 1], &mut r).unwrap();
        let wp = Tensor::random_uniform(&[1, 5], &mut r).unwrap();
        let mut tape = Tape::new();
        let (fv, cv, pv) = (
            tape.constant(f.clone()),
            tape.constant(wc.clone()),
            tape.constant(wp.clone()),
        );
        let yc = tape.mul(fv, cv).unwrap();
        let yp = tape.mul(fv, pv).unwrap();
        for c in 0..3 {
            for l in 0..5 {
                let i = c * 5 + l;
                assert!((tape.value(yc)[i] - f.at(&[c, l]) * wc.at(&[c, 0])).abs() < 1e-12);
                assert!((tape.value(yp)[i] - f.at(&[c, l]) * wp.at(&[0, l])).abs() < 1e-12);
            }
        }
        let bad = tape.constant(Tensor::zeros(&[2, 1]).unwrap());
        assert!(tape.mul(fv, bad).is_err());
    }

    #[test]
    fn normalize_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2], vec![3.0, 4.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..4], &[0.0, 0.0]);
        assert_eq!(&v[4..6], &[1.0, 0.0]);
    }

    #[test]
    fn logsumexp_is_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1000.0, 1000.0]).unwrap());
        let y = tape.logsumexp_rows(x).unwrap();
        assert!((tape.value(y)[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tap_range_bounds() {
        assert_eq!(tap_range(5, 0), (0, 5));
        assert_eq!(tap_range(5, 2), (0, 3));
        assert_eq!(tap_range(5, -2), (2, 5));
        assert_eq!(tap_range(5, 7), (0, 0));
        let (lo, hi) = tap_range(5, -7);
        assert!(lo >= hi);
    }
}

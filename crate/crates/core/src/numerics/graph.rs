//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough saved state to apply its adjoint. [`Graph::backward`] walks the tape
//! once, from the loss node down to index 0.

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    SoftmaxRows { x: Var, scale: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Tensor, inv_std: Vec<f64> },
    Conv1d { x: Var, kernel: Var, bias: Var, width: usize, stride: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowL2Normalize { x: Var, norms: Vec<f64> },
    ContrastiveNll { sim: Var, positives: Vec<Vec<usize>>, tau: f64, pairs: usize },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowL2Normalize { .. } => "row_l2_normalize",
            Op::ContrastiveNll { .. } => "contrastive_nll",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when some leaf upstream requires a gradient.
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, needs_grad: requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().into() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, requires_grad: false, needs_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape { op: "matmul", lhs: av.shape(), rhs: bv.shape() });
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        matmul_into(av, bv, &mut out);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape { op: "add", lhs: av.shape(), rhs: bv.shape() });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape { op: "add_row", lhs: av.shape(), rhs: rv.shape() });
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.values()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape { op: "mul", lhs: av.shape(), rhs: bv.shape() });
        }
        let values = av.values().iter().zip(bv.values()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), values)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Row-wise softmax of `x / scale`, evaluated with the row max subtracted.
    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::contract(format!("softmax scale must be positive, got {scale}")));
        }
        let out = softmax_rows(self.value(x), scale);
        self.push(out, Op::SoftmaxRows { x, scale }, &[x])
    }

    /// Per-row standardization (population variance + `eps`), then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gamma, beta] {
            if self.shape(p) != (1, cols) {
                return Err(Error::Shape { op: "layer_norm", lhs: xv.shape(), rhs: self.shape(p) });
            }
        }
        let mut normalized = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = normalized.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.values()).zip(b.values()) {
                *o = *o * gv + bv;
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, normalized, inv_std }, &[x, gamma, beta])
    }

    /// Valid cross-correlation along the token (row) axis.
    ///
    /// `kernel` is stored as `(width·c_in) × c_out`, row `j·c_in + c` holding
    /// the weights for offset `j` and input channel `c`; `bias` is `1 × c_out`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, width: usize, stride: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (tokens, c_in) = xv.shape();
        if width == 0 || stride == 0 {
            return Err(Error::contract("conv1d width and stride must be at least 1"));
        }
        if width > tokens {
            return Err(Error::Shape { op: "conv1d", lhs: xv.shape(), rhs: (width, c_in) });
        }
        if kv.rows() != width * c_in {
            return Err(Error::Shape { op: "conv1d", lhs: xv.shape(), rhs: kv.shape() });
        }
        let c_out = kv.cols();
        if bv.shape() != (1, c_out) {
            return Err(Error::Shape { op: "conv1d", lhs: kv.shape(), rhs: bv.shape() });
        }
        let tokens_out = (tokens - width) / stride + 1;
        let patch_len = width * c_in;
        let mut out = Tensor::zeros(tokens_out, c_out);
        for t in 0..tokens_out {
            let start = t * stride * c_in;
            let patch = &xv.values()[start..start + patch_len];
            let out_row = out.row_mut(t);
            out_row.copy_from_slice(bv.values());
            for (p, &pv) in patch.iter().enumerate() {
                if pv == 0.0 {
                    continue;
                }
                for (o, w) in out_row.iter_mut().zip(kv.row(p)) {
                    *o += pv * w;
                }
            }
        }
        self.push(out, Op::Conv1d { x, kernel, bias, width, stride }, &[x, kernel, bias])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape { op: "slice_cols", lhs: xv.shape(), rhs: (start, len) });
        }
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape { op: "concat_cols", lhs: self.shape(*first), rhs: self.shape(p) });
            }
            cols += self.shape(p).1;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = self.shape(*first).1;
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::Shape { op: "concat_rows", lhs: self.shape(*first), rhs: pv.shape() });
            }
            values.extend_from_slice(pv.values());
            rows += pv.rows();
        }
        let out = Tensor::from_vec(rows, cols, values)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Scales each row to unit Euclidean norm; zero rows are a contract error.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::contract(format!("row {r} has zero norm")));
            }
            for v in out.row_mut(r) {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.push(out, Op::RowL2Normalize { x, norms }, &[x])
    }

    /// Mean over (anchor, positive) pairs of
    /// `logsumexp_{k≠i}(S_ik/τ) − S_ip/τ`, where `sim` is a `B×B` similarity
    /// matrix and `positives[i]` lists the positives of anchor `i`.
    pub fn contrastive_nll(&mut self, sim: Var, positives: Vec<Vec<usize>>, tau: f64) -> Result<Var> {
        let sv = self.value(sim);
        let b = sv.rows();
        if sv.cols() != b || positives.len() != b {
            return Err(Error::Shape { op: "contrastive_nll", lhs: sv.shape(), rhs: (positives.len(), positives.len()) });
        }
        let (value, pairs) = contrastive_nll_value(sv, &positives, tau)?;
        self.push(Tensor::scalar(value), Op::ContrastiveNll { sim, positives, tau, pairs }, &[sim])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`, in the
    /// stable `max(z,0) − z·y + ln(1 + e^{−|z|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape { op: "bce_with_logits", lhs: lv.shape(), rhs: (labels.len(), 1) });
        }
        let value = lv.values().iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum::<f64>() / labels.len() as f64;
        self.push(Tensor::scalar(value), Op::BceWithLogits { logits, labels: labels.to_vec() }, &[logits])
    }

    /// Replays adjoints from `loss` (a 1×1 node) back to the leaves, adding
    /// dLoss/dLeaf into the grad of every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                if node.requires_grad {
                    match &mut node.grad {
                        Some(g) => g.add_assign(&upstream),
                        None => node.grad = Some(upstream),
                    }
                }
                continue;
            }
            self.apply_adjoint(idx, &upstream, &mut adj);
        }
        Ok(())
    }

    fn apply_adjoint(&self, idx: usize, dy: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let g = slot(adj, *a, av.shape());
                    matmul_nt_into(dy, bv, g);
                }
                if wants(*b) {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let g = slot(adj, *b, bv.shape());
                    matmul_tn_into(av, dy, g);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let g = slot(adj, *a, self.shape(*a));
                    g.add_assign(&dy.transpose());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(adj, v, dy.shape()).add_assign(dy);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    slot(adj, *a, dy.shape()).add_assign(dy);
                }
                if wants(*row) {
                    let g = slot(adj, *row, (1, dy.cols()));
                    for r in 0..dy.rows() {
                        for (o, d) in g.values_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if wants(this) {
                        let ov = self.value(other);
                        let g = slot(adj, this, dy.shape());
                        for ((o, d), w) in g.values_mut().iter_mut().zip(dy.values()).zip(ov.values()) {
                            *o += d * w;
                        }
                    }
                }
            }
            Op::Scale(a, factor) => {
                if wants(*a) {
                    let g = slot(adj, *a, dy.shape());
                    for (o, d) in g.values_mut().iter_mut().zip(dy.values()) {
                        *o += d * factor;
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let xv = self.value(*a);
                    let g = slot(adj, *a, dy.shape());
                    for ((o, d), x) in g.values_mut().iter_mut().zip(dy.values()).zip(xv.values()) {
                        if *x > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let g = slot(adj, *a, dy.shape());
                    for ((o, d), y) in g.values_mut().iter_mut().zip(dy.values()).zip(node.value.values()) {
                        *o += d * (1.0 - y * y);
                    }
                }
            }
            Op::Softplus(a) => {
                if wants(*a) {
                    let xv = self.value(*a);
                    let g = slot(adj, *a, dy.shape());
                    for ((o, d), x) in g.values_mut().iter_mut().zip(dy.values()).zip(xv.values()) {
                        *o += d * sigmoid(*x);
                    }
                }
            }
            Op::SoftmaxRows { x, scale } => {
                if wants(*x) {
                    let y = &node.value;
                    let g = slot(adj, *x, dy.shape());
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, yv), dv) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o += yv * (dv - dot) / scale;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                let cols = dy.cols();
                if wants(*gamma) {
                    let g = slot(adj, *gamma, (1, cols));
                    for r in 0..dy.rows() {
                        for ((o, d), n) in g.values_mut().iter_mut().zip(dy.row(r)).zip(normalized.row(r)) {
                            *o += d * n;
                        }
                    }
                }
                if wants(*beta) {
                    let g = slot(adj, *beta, (1, cols));
                    for r in 0..dy.rows() {
                        for (o, d) in g.values_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
                if wants(*x) {
                    let gamma_v = self.value(*gamma);
                    let g = slot(adj, *x, dy.shape());
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..dy.rows() {
                        for ((dh, d), gv) in dxhat.iter_mut().zip(dy.row(r)).zip(gamma_v.values()) {
                            *dh = d * gv;
                        }
                        let nr = normalized.row(r);
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dn = dxhat.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((o, dh), n) in g.row_mut(r).iter_mut().zip(&dxhat).zip(nr) {
                            *o += inv_std[r] * (dh - mean_d - n * mean_dn);
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel, bias, width, stride } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let c_in = xv.cols();
                let patch_len = width * c_in;
                if wants(*bias) {
                    let g = slot(adj, *bias, (1, dy.cols()));
                    for t in 0..dy.rows() {
                        for (o, d) in g.values_mut().iter_mut().zip(dy.row(t)) {
                            *o += d;
                        }
                    }
                }
                if wants(*kernel) {
                    let g = slot(adj, *kernel, kv.shape());
                    for t in 0..dy.rows() {
                        let start = t * stride * c_in;
                        let patch = &xv.values()[start..start + patch_len];
                        let dr = dy.row(t);
                        for (p, &pv) in patch.iter().enumerate() {
                            for (o, d) in g.row_mut(p).iter_mut().zip(dr) {
                                *o += pv * d;
                            }
                        }
                    }
                }
                if wants(*x) {
                    let g = slot(adj, *x, xv.shape());
                    for t in 0..dy.rows() {
                        let start = t * stride * c_in;
                        let dr = dy.row(t);
                        for p in 0..patch_len {
                            let s: f64 = kv.row(p).iter().zip(dr).map(|(w, d)| w * d).sum();
                            g.values_mut()[start + p] += s;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let g = slot(adj, *x, self.shape(*x));
                    for r in 0..dy.rows() {
                        for (o, d) in g.row_mut(r)[*start..*start + dy.cols()].iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if wants(p) {
                        let g = slot(adj, p, (rows, cols));
                        for r in 0..rows {
                            for (o, d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[offset..offset + cols]) {
                                *o += d;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if wants(p) {
                        let g = slot(adj, p, (rows, cols));
                        let src = &dy.values()[offset * cols..(offset + rows) * cols];
                        for (o, d) in g.values_mut().iter_mut().zip(src) {
                            *o += d;
                        }
                    }
                    offset += rows;
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if wants(*x) {
                    let shape = self.shape(*x);
                    let mut d = dy.values()[0];
                    if let Op::Mean(_) = node.op {
                        d /= (shape.0 * shape.1) as f64;
                    }
                    for o in slot(adj, *x, shape).values_mut() {
                        *o += d;
                    }
                }
            }
            Op::RowL2Normalize { x, norms } => {
                if wants(*x) {
                    let y = &node.value;
                    let g = slot(adj, *x, dy.shape());
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, yv), dv) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o += (dv - yv * dot) / norms[r];
                        }
                    }
                }
            }
            Op::ContrastiveNll { sim, positives, tau, pairs } => {
                if wants(*sim) {
                    let sv = self.value(*sim);
                    let b = sv.rows();
                    let scale = dy.values()[0] / *pairs as f64 / tau;
                    let g = slot(adj, *sim, sv.shape());
                    for i in 0..b {
                        let n_pos = positives[i].len();
                        if n_pos == 0 {
                            continue;
                        }
                        let probs = masked_softmax_row(sv.row(i), i, *tau);
                        let gr = g.row_mut(i);
                        for k in 0..b {
                            if k != i {
                                gr[k] += scale * n_pos as f64 * probs[k];
                            }
                        }
                        for &p in &positives[i] {
                            gr[p] -= scale;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if wants(*logits) {
                    let lv = self.value(*logits);
                    let d = dy.values()[0] / labels.len() as f64;
                    let g = slot(adj, *logits, lv.shape());
                    for ((o, z), y) in g.values_mut().iter_mut().zip(lv.values()).zip(labels) {
                        *o += d * (sigmoid(*z) - y);
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

pub(crate) fn softmax_rows(x: &Tensor, scale: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / scale));
        let mut total = 0.0;
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v / scale - max).exp();
            total += *o;
        }
        for o in out.row_mut(r) {
            *o /= total;
        }
    }
    out
}

/// Softmax of `row / tau` over every index except `skip` (which gets 0).
fn masked_softmax_row(row: &[f64], skip: usize, tau: f64) -> Vec<f64> {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v / tau));
    let mut probs: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == skip { 0.0 } else { (v / tau - max).exp() })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Value of the supervised contrastive objective on a similarity matrix,
/// plus the number of (anchor, positive) pairs it averages over.
pub(crate) fn contrastive_nll_value(sim: &Tensor, positives: &[Vec<usize>], tau: f64) -> Result<(f64, usize)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let b = sim.rows();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..b {
        if positives[i].is_empty() {
            continue;
        }
        let row = sim.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v / tau));
        let lse = max
            + row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, &v)| (v / tau - max).exp())
                .sum::<f64>()
                .ln();
        for &p in &positives[i] {
            if p == i || p >= b {
                return Err(Error::contract(format!("invalid positive {p} for anchor {i}")));
            }
            total += lse - row[p] / tau;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::contract("degenerate batch: no anchor has a positive"));
    }
    Ok((total / pairs as f64, pairs))
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

//! Append-only computation graph with eager forward evaluation and
//! reverse-mode gradients.
//!
//! Every op evaluates immediately and records its inputs, so node order is a
//! topological order and `backward` is a single reverse sweep.

use super::tensor::{gemm, softmax_in_place, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, live: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Bce { p: Var, labels: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add(a, b) | Mul(a, b) => vec![*a, *b],
            AddBias { x, bias } => vec![*x, *bias],
            Scale(x, _) | Relu(x) | Gelu(x) | Sigmoid(x) | Reshape(x) | Sum(x) | Mean(x)
            | MeanRows(x) => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Softmax { x, .. } | Slice { x, .. } => vec![*x],
            Embedding { table, .. } => vec![*table],
            Concat { parts, .. } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            Bce { p, .. } => vec![*p],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul { .. } => "matmul",
            Add(..) => "add",
            Mul(..) => "mul",
            AddBias { .. } => "add_bias",
            Scale(..) => "scale",
            Relu(_) => "relu",
            Gelu(_) => "gelu",
            Sigmoid(_) => "sigmoid",
            LayerNorm { .. } => "layer_norm",
            Softmax { .. } => "softmax",
            Embedding { .. } => "embedding",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Reshape(_) => "reshape",
            Sum(_) => "sum",
            Mean(_) => "mean",
            MeanRows(_) => "mean_rows",
            CrossEntropy { .. } => "cross_entropy",
            Bce { .. } => "bce",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds an input tensor. Only leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// `a · b` for `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `[m,k]·[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return shape_err(format!("matmul [{m},{k}] x [{kb},{n}] (trans_b={trans_b})"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).len() != n {
            return shape_err(format!("bias of {} for {n} columns", self.value(bias).len()));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.scale_assign(c);
        self.push(out, Op::Scale(x, c))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = f(*v);
        }
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Normalizes over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return shape_err(format!("layer_norm params for width {n}"));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        self.masked_softmax(x, vec![cols; rows])
    }

    /// Row-wise softmax where row `r` only spans its first `live[r]` columns;
    /// the remaining columns get probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, live: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if live.len() != rows || live.iter().any(|&l| l == 0 || l > cols) {
            return shape_err(format!("softmax mask for [{rows},{cols}]"));
        }
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            softmax_in_place(row, live[r]);
        }
        self.push(out, Op::Softmax { x, live })
    }

    /// Gathers rows of `table` (`[V,d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange { index: id, len: v });
            }
            out.extend_from_slice(self.value(table).row_slice(id));
        }
        self.push(Tensor::new([ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return shape_err("concat needs parts and axis 0 or 1");
        }
        let dims: Vec<_> = parts.iter().map(|&p| self.dims(p)).collect();
        let out = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return shape_err(format!("concat rows with widths {dims:?}"));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new([dims.iter().map(|d| d.0).sum::<usize>(), cols], data)?
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return shape_err(format!("concat cols with heights {dims:?}"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Tensor::new([rows, total], data)?
        };
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a matrix.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start >= end || end > extent {
            return shape_err(format!("slice {start}..{end} on axis {axis} of [{rows},{cols}]"));
        }
        let xv = self.value(x);
        let out = if axis == 0 {
            Tensor::new([end - start, cols], xv.data()[start * cols..end * cols].to_vec())?
        } else {
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&xv.row_slice(r)[start..end]);
            }
            Tensor::new([rows, end - start], data)?
        };
        self.push(out, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Column means of an `[m,n]` matrix as a `[1,n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let mut out = vec![0.0; cols];
        for row in self.value(x).data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push(Tensor::row(out), Op::MeanRows(x))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`; rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows {
            return shape_err(format!("{} targets for {rows} rows", targets.len()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            softmax_in_place(row, cols);
            if let Some(t) = targets[r] {
                if t >= cols {
                    return Err(Error::OutOfRange { index: t, len: cols });
                }
                loss -= row[t].ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("cross-entropy targets".into()));
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        self.push(Tensor::scalar(loss / count as f64), op)
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != labels.len() {
            return shape_err(format!("{} labels for {} scores", labels.len(), pv.len()));
        }
        let mut total = 0.0;
        for (&q, &y) in pv.iter().zip(labels) {
            total += bce_loss(q, y)?;
        }
        let mean = total / labels.len() as f64;
        self.push(Tensor::scalar(mean), Op::Bce { p, labels: labels.to_vec() })
    }

    /// Reverse sweep from a scalar `loss`, adding into the gradients of every
    /// reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for v in node.op.inputs() {
                if v.0 >= i {
                    return Err(Error::Graph(format!("cycle: node {i} reads node {}", v.0)));
                }
            }
            self.local_backward(i, &g, &mut grads)?;
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = node.value.dims2().1;
                if wants(*a) {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), !trans_b, 0.0, &mut da);
                    send(*a, Tensor::new(self.value(*a).shape().to_vec(), da)?, grads);
                }
                if wants(*b) {
                    let bshape = self.value(*b).shape().to_vec();
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is [n,k]: dB = dCᵀ · A
                        gemm(n, m, k, gd, true, self.value(*a).data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut db);
                    }
                    send(*b, Tensor::new(bshape, db)?, grads);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone(), grads);
                }
                if wants(*b) {
                    send(*b, g.clone(), grads);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if wants(this) {
                        let mut t = self.value(other).clone();
                        for (o, gv) in t.data_mut().iter_mut().zip(gd) {
                            *o *= gv;
                        }
                        send(this, t, grads);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    send(*x, g.clone(), grads);
                }
                if wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?, grads);
                }
            }
            Op::Scale(x, c) => {
                let mut t = g.clone();
                t.scale_assign(*c);
                send(*x, t, grads);
            }
            Op::Relu(x) => {
                let mut t = g.clone();
                for (o, v) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v <= 0.0 {
                        *o = 0.0;
                    }
                }
                send(*x, t, grads);
            }
            Op::Gelu(x) => {
                let mut t = g.clone();
                for (o, v) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *o *= gelu_grad(*v);
                }
                send(*x, t, grads);
            }
            Op::Sigmoid(x) => {
                let mut t = g.clone();
                for (o, s) in t.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= s * (1.0 - s);
                }
                send(*x, t, grads);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, n) = self.dims(*x);
                let gam = self.value(*gamma).data();
                if wants(*x) {
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let gr = &gd[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            dx[r * n + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?, grads);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (r, row) in gd.chunks(n).enumerate() {
                        for j in 0..n {
                            dg[j] += row[j] * xhat[r * n + j];
                        }
                    }
                    send(*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?, grads);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for j in 0..n {
                            db[j] += row[j];
                        }
                    }
                    send(*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?, grads);
                }
            }
            Op::Softmax { x, live } => {
                let (_, cols) = node.value.dims2();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &l) in live.iter().enumerate() {
                    let base = r * cols;
                    let dot: f64 = (0..l).map(|j| y[base + j] * gd[base + j]).sum();
                    for j in 0..l {
                        dx[base + j] = y[base + j] * (gd[base + j] - dot);
                    }
                }
                send(*x, Tensor::new(node.value.shape().to_vec(), dx)?, grads);
            }
            Op::Embedding { table, ids } => {
                let (_, d) = self.dims(*table);
                let mut dt = Tensor::zeros(self.value(*table).shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                send(*table, dt, grads);
            }
            Op::Concat { parts, axis } => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    if wants(p) {
                        let data = if *axis == 0 {
                            gd[offset * total..(offset + pr) * total].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(pr * pc);
                            for r in 0..rows {
                                d.extend_from_slice(&gd[r * total + offset..r * total + offset + pc]);
                            }
                            d
                        };
                        send(p, Tensor::new(self.value(p).shape().to_vec(), data)?, grads);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let (rows, cols) = self.dims(*x);
                let (orows, ocols) = node.value.dims2();
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                if *axis == 0 {
                    dx.data_mut()[start * cols..(start + orows) * cols].copy_from_slice(gd);
                } else {
                    for r in 0..rows {
                        dx.data_mut()[r * cols + start..r * cols + start + ocols]
                            .copy_from_slice(&gd[r * ocols..(r + 1) * ocols]);
                    }
                }
                send(*x, dx, grads);
            }
            Op::Reshape(x) => {
                send(*x, g.reshaped(self.value(*x).shape().to_vec())?, grads);
            }
            Op::Sum(x) => {
                send(*x, Tensor::full(self.value(*x).shape().to_vec(), gd[0]), grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                send(*x, Tensor::full(self.value(*x).shape().to_vec(), gd[0] / n), grads);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.dims(*x);
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(gd.iter().map(|v| v / rows as f64));
                }
                send(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?, grads);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let (_, cols) = self.dims(*logits);
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..cols {
                            dl[r * cols + j] = probs[r * cols + j] * scale;
                        }
                        dl[r * cols + t] -= scale;
                    }
                }
                send(*logits, Tensor::new(self.value(*logits).shape().to_vec(), dl)?, grads);
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p).data();
                let scale = gd[0] / labels.len() as f64;
                let dp = pv
                    .iter()
                    .zip(labels)
                    .map(|(&q, &y)| {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&q) {
                            scale * (-y / q + (1.0 - y) / (1.0 - q))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*p, Tensor::new(self.value(*p).shape().to_vec(), dp)?, grads);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Binary cross-entropy of one probability against a 0/1 label, with the
/// probability clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss(y_hat: f64, y: f64) -> Result<f64> {
    if y != 0.0 && y != 1.0 {
        return Err(Error::InvalidLabel(format!("{y} is not 0 or 1")));
    }
    if !y_hat.is_finite() {
        return Err(Error::NonFinite("bce input".into()));
    }
    let q = y_hat.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    Ok(-(y * q.ln() + (1.0 - y) * (1.0 - q).ln()))
}

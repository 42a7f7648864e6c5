use super::kernels::{gelu_derivative, gelu_scalar, gemm, sigmoid_scalar, softmax_in_place};
use super::meter::{MacKind, MacMeter};
use super::{Result, Tensor, TensorError, BCE_CLAMP};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GroupLeftMatMul {
        w: Var,
        x: Var,
        groups: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Attention weights captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub label: String,
    pub groups: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `[groups, heads, queries, keys]`, row-major.
    pub weights: Vec<f64>,
}

impl AttentionProbe {
    /// Iterator over every softmax row.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.keys)
    }
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// walking the node list backwards is a reverse topological traversal.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    meter: MacMeter,
    probes: Option<Vec<AttentionProbe>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn meter(&self) -> &MacMeter {
        &self.meter
    }

    pub fn meter_mut(&mut self) -> &mut MacMeter {
        &mut self.meter
    }

    /// Starts recording attention weights for every subsequent attention op.
    pub fn enable_attention_probe(&mut self) {
        self.probes.get_or_insert_with(Vec::new);
    }

    pub fn attention_probes(&self) -> &[AttentionProbe] {
        self.probes.as_deref().unwrap_or(&[])
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, positional tables, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRowBias(x, b) => vec![*x, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::SoftmaxRows(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::ConcatRows(parts) => parts.clone(),
            Op::SliceRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Bce { pred, .. } => vec![*pred],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GroupLeftMatMul { w, x, .. } => vec![*w, *x],
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("expected a matrix, got shape {:?}", t.shape()),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.meter.charge((m * k * n) as u64);
        self.push_checked("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n || tx.shape().len() != 2 {
            return Err(shape_err("add_row_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("add_row_bias", out, Op::AddRowBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push_checked("scale", out, Op::Scale(x, s))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims("transpose", x)?;
        let out = self.value(x).transpose();
        self.push_checked("transpose", out, Op::Transpose(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, n) = self.matrix_dims("concat_rows", *first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push_checked("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_rows", x)?;
        if start + len > m {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                reason: format!("rows {start}..{} out of range for {m} rows", start + len),
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        self.push_checked("slice_rows", out, Op::SliceRows { x, start })
    }

    /// Row-wise layer normalisation with learnable `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("layer_norm", x)?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", self.value(x), tg));
        }
        let (g, b) = (tg.data().to_vec(), tb.data().to_vec());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push_checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push_checked("gelu", out, Op::Gelu(x))
    }

    /// Elementwise logistic function; outputs are clamped into (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_scalar);
        self.push_checked("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("softmax_rows", x)?;
        if !self.value(x).all_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push_checked("softmax_rows", out, Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_checked("sum", out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_checked("mean", out, Op::Mean(x))
    }

    /// Mean binary cross-entropy between probabilities `pred` and targets in [0, 1].
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("bce", p, target));
        }
        let n = p.len() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let op = Op::Bce {
            pred,
            target: target.data().to_vec(),
        };
        self.push_checked("bce", Tensor::scalar(total / n), op)
    }

    /// Multi-head scaled dot-product attention, batched over independent groups.
    ///
    /// `q` is `[groups * nq, d]`, `k` and `v` are `[groups * nk, d]`. Each group
    /// attends only within itself. Heads split the feature axis into
    /// contiguous `d / heads` slices; the output concatenates head results.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (rq, d) = self.matrix_dims("attention", q)?;
        let (rk, dk_) = self.matrix_dims("attention", k)?;
        if self.value(k).shape() != self.value(v).shape() || dk_ != d {
            return Err(shape_err("attention", self.value(k), self.value(v)));
        }
        if groups == 0 || rq % groups != 0 || rk % groups != 0 || heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("rows {rq}/{rk} and width {d} incompatible with {groups} groups, {heads} heads"),
            });
        }
        let (nq, nk, hd) = (rq / groups, rk / groups, d / heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut out = vec![0.0; rq * d];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..nq {
                    let qi = &tq[(g * nq + i) * d + off..][..hd];
                    let base = ((g * heads + h) * nq + i) * nk;
                    let row = &mut probs[base..base + nk];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &tk[(g * nk + j) * d + off..][..hd];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(g * nq + i) * d + off..][..hd];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &tv[(g * nk + j) * d + off..][..hd];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let macs = (groups * nq * nk * d) as u64;
        self.meter.charge_kind(MacKind::AttentionScore, macs);
        self.meter.charge_kind(MacKind::ValueMix, macs);
        let label = self.meter.scope_label().to_string();
        if let Some(probes) = &mut self.probes {
            probes.push(AttentionProbe {
                label,
                groups,
                heads,
                queries: nq,
                keys: nk,
                weights: probs.clone(),
            });
        }
        let out = Tensor::new(vec![rq, d], out)?;
        self.push_checked(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
        )
    }

    /// Applies one shared `[p, q]` matrix on the left of every `[q, n]` block of `x`.
    pub fn group_left_matmul(&mut self, w: Var, x: Var, groups: usize) -> Result<Var> {
        let (p, qd) = self.matrix_dims("group_left_matmul", w)?;
        let (rx, n) = self.matrix_dims("group_left_matmul", x)?;
        if groups == 0 || rx != groups * qd {
            return Err(shape_err("group_left_matmul", self.value(w), self.value(x)));
        }
        let mut out = vec![0.0; groups * p * n];
        let (tw, tx) = (self.value(w).data(), self.value(x).data());
        for g in 0..groups {
            gemm(
                p,
                qd,
                n,
                tw,
                false,
                &tx[g * qd * n..(g + 1) * qd * n],
                false,
                0.0,
                &mut out[g * p * n..(g + 1) * p * n],
            );
        }
        self.meter.charge((groups * p * qd * n) as u64);
        let out = Tensor::new(vec![groups * p, n], out)?;
        self.push_checked("group_left_matmul", out, Op::GroupLeftMatMul { w, x, groups })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, tb.data(), true, 0.0, &mut da);
                    accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, dy.data(), false, 0.0, &mut db);
                    accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d).unwrap());
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.clone());
                }
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let n = tb.len();
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.map(|v| v * s));
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.transpose());
                }
            }
            Op::ConcatRows(parts) => {
                let n = dy.cols();
                let mut row = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.wants(*p) {
                        let d = dy.data()[row * n..(row + rows) * n].to_vec();
                        accumulate(grads, *p, Tensor::new(vec![rows, n], d).unwrap());
                    }
                    row += rows;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let mut d = Tensor::zeros(tx.shape());
                    d.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                    accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*x).cols();
                let g = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (dyr, xr) in dy.data().chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += dyr[c] * xr[c];
                            db[c] += dyr[c];
                        }
                    }
                    if self.wants(*gain) {
                        let shape = self.value(*gain).shape().to_vec();
                        accumulate(grads, *gain, Tensor::new(shape, dg).unwrap());
                    }
                    if self.wants(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(grads, *bias, Tensor::new(shape, db).unwrap());
                    }
                }
                if self.wants(*x) {
                    let nf = n as f64;
                    let mut dx = vec![0.0; dy.len()];
                    for (r, (dyr, xr)) in dy.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = dyr[c] * g[c];
                            s1 += dh;
                            s2 += dh * xr[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..n {
                            let dh = dyr[c] * g[c];
                            dx[r * n + c] = inv / nf * (nf * dh - s1 - xr[c] * s2);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let d = dy
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| g * gelu_derivative(v))
                        .collect();
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d).unwrap());
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let d = dy
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d).unwrap());
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let n = node.value.cols();
                    let mut d = vec![0.0; dy.len()];
                    for ((dr, gr), sr) in d
                        .chunks_mut(n)
                        .zip(dy.data().chunks(n))
                        .zip(node.value.data().chunks(n))
                    {
                        let dot: f64 = gr.iter().zip(sr).map(|(g, s)| g * s).sum();
                        for c in 0..n {
                            dr[c] = sr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d).unwrap());
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let t = Tensor::filled(self.value(*x).shape(), dy.data()[0]);
                    accumulate(grads, *x, t);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let t = Tensor::filled(tx.shape(), dy.data()[0] / tx.len() as f64);
                    accumulate(grads, *x, t);
                }
            }
            Op::Bce { pred, target } => {
                if self.wants(*pred) {
                    let tp = self.value(*pred);
                    let scale = dy.data()[0] / tp.len() as f64;
                    let d = tp
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            scale * (-t / p + (1.0 - t) / (1.0 - p))
                        })
                        .collect();
                    accumulate(grads, *pred, Tensor::new(tp.shape().to_vec(), d).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => self.attention_backward(dy, *q, *k, *v, *groups, *heads, probs, grads),
            Op::GroupLeftMatMul { w, x, groups } => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (p, qd, n) = (tw.rows(), tw.cols(), tx.cols());
                if self.wants(*w) {
                    let mut dw = vec![0.0; p * qd];
                    for g in 0..*groups {
                        let dyg = &dy.data()[g * p * n..(g + 1) * p * n];
                        let xg = &tx.data()[g * qd * n..(g + 1) * qd * n];
                        gemm(p, n, qd, dyg, false, xg, true, 1.0, &mut dw);
                    }
                    accumulate(grads, *w, Tensor::new(vec![p, qd], dw).unwrap());
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; groups * qd * n];
                    for g in 0..*groups {
                        let dyg = &dy.data()[g * p * n..(g + 1) * p * n];
                        gemm(qd, p, n, tw.data(), true, dyg, false, 0.0, &mut dx[g * qd * n..(g + 1) * qd * n]);
                    }
                    accumulate(grads, *x, Tensor::new(vec![groups * qd, n], dx).unwrap());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let (nq, nk, hd) = (tq.rows() / groups, tk.rows() / groups, d / heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd, dyd) = (tq.data(), tk.data(), tv.data(), dy.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; nk];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..nq {
                    let base = ((g * heads + h) * nq + i) * nk;
                    let p = &probs[base..base + nk];
                    let doi = &dyd[(g * nq + i) * d + off..][..hd];
                    for j in 0..nk {
                        let row_v = (g * nk + j) * d + off;
                        let vj = &vd[row_v..row_v + hd];
                        dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        for (acc, o) in dv[row_v..row_v + hd].iter_mut().zip(doi) {
                            *acc += p[j] * o;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let row_q = (g * nq + i) * d + off;
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let row_k = (g * nk + j) * d + off;
                        for c in 0..hd {
                            dq[row_q + c] += ds * kd[row_k + c];
                            dk[row_k + c] += ds * qd[row_q + c];
                        }
                    }
                }
            }
        }
        if self.wants(q) {
            accumulate(grads, q, Tensor::new(tq.shape().to_vec(), dq).unwrap());
        }
        if self.wants(k) {
            accumulate(grads, k, Tensor::new(tk.shape().to_vec(), dk).unwrap());
        }
        if self.wants(v) {
            accumulate(grads, v, Tensor::new(tv.shape().to_vec(), dv).unwrap());
        }
    }
}

//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] records each operation together with its output value. Leaves
//! are either trainable (gradients flow into them) or constants. One tape
//! serves one forward/backward pass and is then dropped.

use std::rc::Rc;

use crate::error::{MakdError, Result};
use crate::tensor::{self, GeluKind, LayerNormCache, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowVector(Var, Var),
    Scale(Var, f64),
    Gelu(Var, GeluKind),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Softmax(Var),
    AttentionWeights {
        q: Var,
        k: Var,
        seq_len: usize,
        scale: f64,
    },
    AttentionApply {
        att: Var,
        v: Var,
        seq_len: usize,
    },
    Gather {
        table: Var,
        ids: Rc<[usize]>,
    },
    Block {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    RowMse {
        a: Var,
        b: Var,
        rows: Rc<[bool]>,
    },
    RowKl {
        p: Var,
        q: Var,
        rows: Rc<[bool]>,
        eps: f64,
    },
    SoftCrossEntropy {
        student: Var,
        teacher: Var,
        temperature: f64,
        rows: Rc<[bool]>,
        student_log_probs: Tensor,
        teacher_probs: Tensor,
    },
    LabelCrossEntropy {
        logits: Var,
        labels: Rc<[Option<usize>]>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape if the loss did not
    /// depend on it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> MakdError {
    MakdError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let out = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_vector(self.value(bias))?;
        Ok(self.push(out, Op::AddRowVector(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Var {
        let out = tensor::gelu(self.value(x), kind);
        self.push(out, Op::Gelu(x, kind), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, cache) = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Attention weights for stacked sequences: rows `b·t..(b+1)·t` of the
    /// result are `softmax(scale · Q_b K_bᵀ)` with `masks[b]` (`t × t`,
    /// row-major) hiding keys, where `Q_b` is sequence `b`'s block of `q`.
    pub fn attention_weights(&mut self, q: Var, k: Var, masks: &[Vec<bool>], scale: f64) -> Result<Var> {
        let (vq, vk) = (self.value(q), self.value(k));
        let (rows, dk) = (vq.rows(), vq.cols());
        let batch = masks.len();
        if vk.shape() != vq.shape() || batch == 0 || rows % batch != 0 {
            return Err(shape_err("attention_weights", vq, vk));
        }
        let t = rows / batch;
        if masks.iter().any(|m| m.len() != t * t) {
            return Err(MakdError::Shape { op: "attention_weights", lhs: vq.shape().to_vec(), rhs: vec![batch, t, t] });
        }
        let (qd, kd) = (vq.data(), vk.data());
        let mut scores = vec![0.0; rows * t];
        for b in 0..batch {
            for i in 0..t {
                let qi = &qd[(b * t + i) * dk..(b * t + i + 1) * dk];
                let srow = &mut scores[(b * t + i) * t..(b * t + i + 1) * t];
                for (j, sv) in srow.iter_mut().enumerate() {
                    let kj = &kd[(b * t + j) * dk..(b * t + j + 1) * dk];
                    *sv = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
            }
        }
        let scores = Tensor::new(vec![rows, t], scores)?;
        let out = tensor::softmax_rows(&scores, Some(&masks.concat()))?;
        Ok(self.push(out, Op::AttentionWeights { q, k, seq_len: t, scale }, &[q, k]))
    }

    /// Applies per-sequence attention weights `att` (`rows × t`, as produced
    /// by [`Tape::attention_weights`]) to the matching blocks of `v`.
    pub fn attention_apply(&mut self, att: Var, v: Var) -> Result<Var> {
        let (va, vv) = (self.value(att), self.value(v));
        let (rows, t, dv) = (va.rows(), va.cols(), vv.cols());
        if vv.rows() != rows || t == 0 || rows % t != 0 {
            return Err(shape_err("attention_apply", va, vv));
        }
        let (ad, vd) = (va.data(), vv.data());
        let mut out = vec![0.0; rows * dv];
        for (r, orow) in out.chunks_mut(dv).enumerate() {
            let base = r / t * t;
            for (j, &w) in ad[r * t..(r + 1) * t].iter().enumerate() {
                for (o, x) in orow.iter_mut().zip(&vd[(base + j) * dv..(base + j + 1) * dv]) {
                    *o += w * x;
                }
            }
        }
        let out = Tensor::new(vec![rows, dv], out)?;
        Ok(self.push(out, Op::AttentionApply { att, v, seq_len: t }, &[att, v]))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: Rc<[usize]>) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            if id >= rows {
                return Err(MakdError::invalid(format!("row index {id} out of range for table with {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Gather { table, ids }, &[table]))
    }

    /// Copy of the block `[r0, r0+nr) × [c0, c0+nc)` of a matrix.
    pub fn block(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let v = self.value(x);
        if r0 + nr > v.rows() || c0 + nc > v.cols() || nr == 0 || nc == 0 {
            return Err(MakdError::Shape { op: "block", lhs: v.shape().to_vec(), rhs: vec![r0 + nr, c0 + nc] });
        }
        let out = v.block(r0, nr, c0, nc);
        Ok(self.push(out, Op::Block { x, r0, c0 }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean squared error over the rows where `rows[i]` is true and all
    /// columns. Zero when no row is selected.
    pub fn row_mse(&mut self, a: Var, b: Var, rows: Rc<[bool]>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("row_mse", va, vb));
        }
        check_rows("row_mse", va, &rows)?;
        let count = rows.iter().filter(|&&r| r).count() * va.cols();
        let mut total = 0.0;
        for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
            for (x, y) in va.row(i).iter().zip(vb.row(i)) {
                total += (x - y) * (x - y);
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(Tensor::scalar(loss), Op::RowMse { a, b, rows }, &[a, b]))
    }

    /// Mean over selected rows of `KL(p_row ‖ q_row)`, with both
    /// distributions clamped below at `eps` inside the logarithms.
    pub fn row_kl(&mut self, p: Var, q: Var, rows: Rc<[bool]>, eps: f64) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.shape() != vq.shape() {
            return Err(shape_err("row_kl", vp, vq));
        }
        check_rows("row_kl", vp, &rows)?;
        let n = rows.iter().filter(|&&r| r).count();
        let mut total = 0.0;
        for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
            for (&pi, &qi) in vp.row(i).iter().zip(vq.row(i)) {
                if pi != 0.0 {
                    total += pi * (pi.max(eps).ln() - qi.max(eps).ln());
                }
            }
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(Tensor::scalar(loss), Op::RowKl { p, q, rows, eps }, &[p, q]))
    }

    /// Mean over selected rows of `CE(softmax(teacher/t), softmax(student/t))
    /// = -Σ p_T log p_S`.
    pub fn soft_cross_entropy(
        &mut self,
        student: Var,
        teacher: Var,
        temperature: f64,
        rows: Rc<[bool]>,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(MakdError::invalid(format!("temperature must be positive, got {temperature}")));
        }
        let (vs, vt) = (self.value(student), self.value(teacher));
        if vs.shape() != vt.shape() {
            return Err(shape_err("soft_cross_entropy", vs, vt));
        }
        check_rows("soft_cross_entropy", vs, &rows)?;
        let student_log_probs = log_softmax_rows(&vs.scale(1.0 / temperature));
        let teacher_probs = tensor::softmax_rows(&vt.scale(1.0 / temperature), None)?;
        let n = rows.iter().filter(|&&r| r).count();
        let mut total = 0.0;
        for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
            for (p, lq) in teacher_probs.row(i).iter().zip(student_log_probs.row(i)) {
                total -= p * lq;
            }
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { student, teacher, temperature, rows, student_log_probs, teacher_probs },
            &[student, teacher],
        ))
    }

    /// Mean negative log-likelihood over rows that carry a label.
    pub fn label_cross_entropy(&mut self, logits: Var, labels: Rc<[Option<usize>]>) -> Result<Var> {
        let v = self.value(logits);
        if labels.len() != v.rows() {
            return Err(MakdError::Shape {
                op: "label_cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = v.cols();
        let probs = tensor::softmax_rows(v, None)?;
        let log_probs = log_softmax_rows(v);
        let mut n = 0usize;
        let mut total = 0.0;
        for (i, label) in labels.iter().enumerate() {
            if let Some(y) = *label {
                if y >= c {
                    return Err(MakdError::invalid(format!("label {y} out of range for {c} classes")));
                }
                total -= log_probs.at(i, y);
                n += 1;
            }
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(Tensor::scalar(loss), Op::LabelCrossEntropy { logits, labels, probs }, &[logits]))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs
    /// one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(MakdError::invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        if let Op::Block { x, r0, c0 } = &node.op {
            // Write straight into the source's gradient; a fresh full-size
            // zero tensor per slice dominates the cost of sliced attention.
            if self.needs_grad(*x) {
                let dx = grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                let nc = g.cols();
                for i in 0..g.rows() {
                    for (o, v) in dx.row_mut(r0 + i)[*c0..c0 + nc].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            return Ok(());
        }
        let mut acc = |v: Var, delta: Tensor| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.needs_grad(*b) {
                    acc(*b, self.value(*a).transpose().matmul(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs_grad(*a) {
                    acc(*a, g.matmul(self.value(*b))?)?;
                }
                if self.needs_grad(*b) {
                    acc(*b, g.transpose().matmul(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y))?;
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y))?;
            }
            Op::AddRowVector(x, bias) => {
                acc(*x, g.clone())?;
                if self.needs_grad(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, db)?)?;
                }
            }
            Op::Scale(x, f) => acc(*x, g.scale(*f))?,
            Op::Gelu(x, kind) => {
                let d = tensor::gelu_grad(self.value(*x), *kind);
                acc(*x, g.zip_map(&d, |a, b| a * b))?;
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let d = g.cols();
                let xhat = &cache.normalized;
                let gv = self.value(*gain);
                if self.needs_grad(*gain) || self.needs_grad(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (grow, xrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                            db[j] += grow[j];
                        }
                    }
                    acc(*gain, Tensor::new(gv.shape().to_vec(), dg)?)?;
                    acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?)?;
                }
                if self.needs_grad(*x) {
                    let mut dx = g.clone();
                    for (r, (dxrow, xrow)) in dx.data_mut().chunks_mut(d).zip(xhat.data().chunks(d)).enumerate() {
                        for (v, gj) in dxrow.iter_mut().zip(gv.data()) {
                            *v *= gj;
                        }
                        let mean_dx = dxrow.iter().sum::<f64>() / d as f64;
                        let mean_dx_x = dxrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let is = cache.inv_std[r];
                        for (v, xh) in dxrow.iter_mut().zip(xrow) {
                            *v = is * (*v - mean_dx - xh * mean_dx_x);
                        }
                    }
                    acc(*x, dx)?;
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.clone();
                for (dxrow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = dxrow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (v, yv) in dxrow.iter_mut().zip(yrow) {
                        *v = yv * (*v - dot);
                    }
                }
                acc(*x, dx)?;
            }
            Op::AttentionWeights { q, k, seq_len, scale } => {
                let (t, y) = (*seq_len, &node.value);
                let mut ds = g.clone();
                for (drow, yrow) in ds.data_mut().chunks_mut(t).zip(y.data().chunks(t)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (v, yv) in drow.iter_mut().zip(yrow) {
                        *v = scale * yv * (*v - dot);
                    }
                }
                let (vq, vk) = (self.value(*q), self.value(*k));
                let dk = vq.cols();
                let (qd, kd, sd) = (vq.data(), vk.data(), ds.data());
                let mut dq = vec![0.0; qd.len()];
                let mut dkey = vec![0.0; kd.len()];
                for r in 0..vq.rows() {
                    let base = r / t * t;
                    for (j, &w) in sd[r * t..(r + 1) * t].iter().enumerate() {
                        let kr = (base + j) * dk;
                        for c in 0..dk {
                            dq[r * dk + c] += w * kd[kr + c];
                            dkey[kr + c] += w * qd[r * dk + c];
                        }
                    }
                }
                acc(*q, Tensor::new(vq.shape().to_vec(), dq)?)?;
                acc(*k, Tensor::new(vk.shape().to_vec(), dkey)?)?;
            }
            Op::AttentionApply { att, v, seq_len } => {
                let t = *seq_len;
                let (va, vv) = (self.value(*att), self.value(*v));
                let dv = vv.cols();
                let (ad, vd, gd) = (va.data(), vv.data(), g.data());
                let mut datt = vec![0.0; ad.len()];
                let mut dval = vec![0.0; vd.len()];
                for r in 0..va.rows() {
                    let base = r / t * t;
                    let grow = &gd[r * dv..(r + 1) * dv];
                    for j in 0..t {
                        let vr = (base + j) * dv;
                        datt[r * t + j] = grow.iter().zip(&vd[vr..vr + dv]).map(|(a, b)| a * b).sum();
                        let w = ad[r * t + j];
                        for (o, x) in dval[vr..vr + dv].iter_mut().zip(grow) {
                            *o += w * x;
                        }
                    }
                }
                acc(*att, Tensor::new(va.shape().to_vec(), datt)?)?;
                acc(*v, Tensor::new(vv.shape().to_vec(), dval)?)?;
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                acc(*table, dt)?;
            }
            Op::Block { .. } => unreachable!("handled above"),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs_grad(p) {
                        acc(p, g.block(0, g.rows(), c0, w))?;
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs_grad(p) {
                        let block = g.block(r0, h, 0, g.cols());
                        acc(p, block.reshape(self.value(p).shape())?)?;
                    }
                    r0 += h;
                }
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.item()))?;
            }
            Op::RowMse { a, b, rows } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let count = rows.iter().filter(|&&r| r).count() * va.cols();
                let mut da = Tensor::zeros(va.shape());
                if count > 0 {
                    let f = 2.0 * g.item() / count as f64;
                    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                        for ((o, x), y) in da.row_mut(i).iter_mut().zip(va.row(i)).zip(vb.row(i)) {
                            *o = f * (x - y);
                        }
                    }
                }
                if self.needs_grad(*b) {
                    acc(*b, da.scale(-1.0))?;
                }
                acc(*a, da)?;
            }
            Op::RowKl { p, q, rows, eps } => {
                let (vp, vq) = (self.value(*p), self.value(*q));
                let n = rows.iter().filter(|&&r| r).count();
                let mut dp = Tensor::zeros(vp.shape());
                let mut dq = Tensor::zeros(vq.shape());
                if n > 0 {
                    let f = g.item() / n as f64;
                    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                        let (prow, qrow) = (vp.row(i), vq.row(i));
                        for j in 0..prow.len() {
                            let (pi, qi) = (prow[j], qrow[j]);
                            let mut d = pi.max(*eps).ln() - qi.max(*eps).ln();
                            if pi > *eps {
                                d += 1.0;
                            }
                            dp.row_mut(i)[j] = f * d;
                            if qi > *eps {
                                dq.row_mut(i)[j] = -f * pi / qi;
                            }
                        }
                    }
                }
                acc(*p, dp)?;
                acc(*q, dq)?;
            }
            Op::SoftCrossEntropy { student, teacher, temperature, rows, student_log_probs, teacher_probs } => {
                let n = rows.iter().filter(|&&r| r).count();
                let shape = student_log_probs.shape();
                let mut ds = Tensor::zeros(shape);
                let mut dt = Tensor::zeros(shape);
                if n > 0 {
                    let f = g.item() / (n as f64 * temperature);
                    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
                        let (lq, pt) = (student_log_probs.row(i), teacher_probs.row(i));
                        let cross: f64 = pt.iter().zip(lq).map(|(p, l)| p * l).sum();
                        for j in 0..lq.len() {
                            ds.row_mut(i)[j] = f * (lq[j].exp() - pt[j]);
                            dt.row_mut(i)[j] = -f * pt[j] * (lq[j] - cross);
                        }
                    }
                }
                acc(*student, ds)?;
                acc(*teacher, dt)?;
            }
            Op::LabelCrossEntropy { logits, labels, probs } => {
                let n = labels.iter().filter(|l| l.is_some()).count();
                let mut dz = Tensor::zeros(probs.shape());
                if n > 0 {
                    let f = g.item() / n as f64;
                    for (i, label) in labels.iter().enumerate() {
                        if let Some(y) = *label {
                            for (o, p) in dz.row_mut(i).iter_mut().zip(probs.row(i)) {
                                *o = f * p;
                            }
                            dz.row_mut(i)[y] -= f;
                        }
                    }
                }
                acc(*logits, dz)?;
            }
        }
        Ok(())
    }
}

fn check_rows(op: &'static str, t: &Tensor, rows: &[bool]) -> Result<()> {
    if rows.len() != t.rows() {
        return Err(MakdError::Shape { op, lhs: t.shape().to_vec(), rhs: vec![rows.len()] });
    }
    Ok(())
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn frobenius_square_gradient_is_twice_w() {
        let wv = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(wv.clone());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &wv.scale(2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[1, 2], 2.0));
        let c = tape.constant(Tensor::full(&[1, 2], 3.0));
        let unused = tape.param(Tensor::full(&[1, 2], 1.0));
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p);
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 3.0]);
        let like = tape.value(unused).clone();
        assert_eq!(grads.take_or_zeros(unused, &like).data(), &[0.0, 0.0]);
    }

    #[test]
    fn kl_of_point_mass_against_uniform() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let q = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        let kl = tape.row_kl(p, q, Rc::from(vec![true]), 1e-10).unwrap();
        assert!((tape.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn soft_cross_entropy_rejects_bad_temperature() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        for t in [0.0, -1.0, f64::NAN] {
            assert!(tape.soft_cross_entropy(z, z, t, Rc::from(vec![true])).is_err());
        }
    }

    mod finite_differences {
        use super::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

        /// Builds `sum(op(inputs) ⊙ R)` for a fixed random `R` and compares
        /// the tape's gradient for every input entry with a central
        /// difference.
        fn check(inputs: &[Tensor], build: &Build) {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let run = |values: &[Tensor], rng_weights: Option<&Tensor>| -> (f64, Tape, Vec<Var>, Var, Tensor) {
                let mut tape = Tape::new();
                let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
                let out = build(&mut tape, &vars).unwrap();
                let weights = rng_weights
                    .cloned()
                    .unwrap_or_else(|| Tensor::randn(tape.value(out).shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(99)));
                let w = tape.constant(weights.clone());
                let prod = tape.mul(out, w).unwrap();
                let loss = tape.sum(prod);
                (tape.value(loss).item(), tape, vars, loss, weights)
            };
            let (_, tape, vars, loss, weights) = run(inputs, None);
            let grads = tape.backward(loss).unwrap();
            let h = 1e-6;
            for (i, input) in inputs.iter().enumerate() {
                let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
                // A subset of coordinates keeps the check fast on bigger inputs.
                let picks: Vec<usize> = if input.len() <= 40 {
                    (0..input.len()).collect()
                } else {
                    use rand::Rng;
                    (0..40).map(|_| rng.random_range(0..input.len())).collect()
                };
                for j in picks {
                    let mut plus = inputs.to_vec();
                    plus[i].data_mut()[j] += h;
                    let mut minus = inputs.to_vec();
                    minus[i].data_mut()[j] -= h;
                    let numeric = (run(&plus, Some(&weights)).0 - run(&minus, Some(&weights)).0) / (2.0 * h);
                    let a = analytic.data()[j];
                    let tol = 1e-6 * (1.0 + a.abs().max(numeric.abs()));
                    assert!((a - numeric).abs() < tol, "input {i} entry {j}: analytic {a} numeric {numeric}");
                }
            }
        }

        fn randn(shape: &[usize], seed: u64) -> Tensor {
            Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
        }

        fn probs(rows: usize, cols: usize, seed: u64) -> Tensor {
            tensor::softmax_rows(&randn(&[rows, cols], seed), None).unwrap()
        }

        #[test]
        fn matmul_and_transposed_matmul() {
            check(&[randn(&[3, 4], 1), randn(&[4, 5], 2)], &|t, v| t.matmul(v[0], v[1]));
            check(&[randn(&[3, 4], 1), randn(&[5, 4], 2)], &|t, v| t.matmul_nt(v[0], v[1]));
        }

        #[test]
        fn elementwise_and_bias() {
            check(&[randn(&[3, 4], 1), randn(&[3, 4], 2)], &|t, v| t.add(v[0], v[1]));
            check(&[randn(&[3, 4], 1), randn(&[3, 4], 2)], &|t, v| t.mul(v[0], v[1]));
            check(&[randn(&[3, 4], 1), randn(&[1, 4], 2)], &|t, v| t.add_row_vector(v[0], v[1]));
            check(&[randn(&[3, 4], 1)], &|t, v| Ok(t.scale(v[0], -0.7)));
        }

        #[test]
        fn gelu_both_forms() {
            check(&[randn(&[4, 5], 3).scale(2.0)], &|t, v| Ok(t.gelu(v[0], GeluKind::Tanh)));
            check(&[randn(&[4, 5], 3).scale(2.0)], &|t, v| Ok(t.gelu(v[0], GeluKind::Erf)));
        }

        #[test]
        fn layer_norm_all_inputs() {
            check(&[randn(&[3, 6], 4), randn(&[1, 6], 5), randn(&[1, 6], 6)], &|t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-12)
            });
        }

        #[test]
        fn masked_softmax() {
            let mask = [true, true, false, true, false, true, true, true];
            check(&[randn(&[2, 4], 7)], &move |t, v| t.softmax_rows(v[0], Some(&mask)));
        }

        #[test]
        fn fused_attention_ops() {
            let masks = vec![vec![true, false, false, true, true, false, true, true, true], vec![true; 9]];
            check(&[randn(&[6, 4], 8), randn(&[6, 4], 9)], &move |t, v| t.attention_weights(v[0], v[1], &masks, 0.5));
            check(&[probs(6, 3, 10), randn(&[6, 2], 11)], &|t, v| t.attention_apply(v[0], v[1]));
        }

        #[test]
        fn structural_ops() {
            let ids: Rc<[usize]> = Rc::from(vec![2, 0, 2, 1]);
            check(&[randn(&[3, 4], 12)], &move |t, v| t.gather_rows(v[0], ids.clone()));
            check(&[randn(&[5, 6], 13)], &|t, v| t.block(v[0], 1, 3, 2, 3));
            check(&[randn(&[2, 3], 14), randn(&[2, 2], 15)], &|t, v| t.concat_cols(&[v[0], v[1]]));
            check(&[randn(&[2, 3], 14), randn(&[1, 3], 15)], &|t, v| t.concat_rows(&[v[0], v[1]]));
        }

        #[test]
        fn losses() {
            let rows: Rc<[bool]> = Rc::from(vec![true, false, true]);
            let r = rows.clone();
            check(&[randn(&[3, 4], 16), randn(&[3, 4], 17)], &move |t, v| t.row_mse(v[0], v[1], r.clone()));
            let r = rows.clone();
            check(&[probs(3, 4, 18), probs(3, 4, 19)], &move |t, v| t.row_kl(v[0], v[1], r.clone(), 1e-10));
            let r = rows.clone();
            check(&[randn(&[3, 5], 20), randn(&[3, 5], 21)], &move |t, v| {
                t.soft_cross_entropy(v[0], v[1], 2.0, r.clone())
            });
            let labels: Rc<[Option<usize>]> = Rc::from(vec![Some(1), None, Some(4)]);
            check(&[randn(&[3, 5], 22)], &move |t, v| t.label_cross_entropy(v[0], labels.clone()));
        }
    }
}

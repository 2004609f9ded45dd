use std::rc::Rc;

use super::tensor::{gemm, strided_gemm};
use super::{NumericsError, Tensor};

/// Added to attention logits of disallowed pairs. Finite so that gradients
/// through the softmax stay well defined.
pub const MASKED_LOGIT: f64 = -1e9;

/// RMS-norm epsilon.
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows(Vec<(Var, Vec<usize>)>),
    Reshape(Var),
    RotatePairs {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward pass and replays it in reverse for gradients.
///
/// A tape lives for one forward/backward pass. Leaf gradients accumulate
/// across repeated [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(NumericsError::NotMatrix {
                op,
                shape: self.shape(v).to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        if self.value(bias).len() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let data = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("silu", value, Op::Silu(x), &[x])
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "rms_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain).data();
        let xs = self.value(x).data();
        let mut inv_rms = Vec::with_capacity(xs.len() / d);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(v, g)| v * r * g));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("rms_norm", value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax_last", value, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (n, vocab) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![n, vocab],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(NumericsError::IndexOutOfRange {
                index: bad,
                bound: vocab,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NumericsError> {
        self.same_shape("mse", pred, target)?;
        let p = self.value(pred);
        let t = self.value(target);
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(s / p.len() as f64);
        self.push("mse", value, Op::Mse(pred, target), &[pred, target])
    }

    /// Selects rows (repeats allowed) of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (n, d) = self.matrix_dims("gather_rows", x)?;
        if rows.is_empty() {
            return Err(NumericsError::InvalidShape(vec![0, d]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NumericsError::IndexOutOfRange { index: bad, bound: n });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Builds an `[n, d]` matrix whose row `rows[i]` of each part is that
    /// part's row `i`. Every output row must be written exactly once.
    pub fn scatter_rows(&mut self, n: usize, parts: &[(Var, &[usize])]) -> Result<Var, NumericsError> {
        let d = match parts.first() {
            Some(&(v, _)) => self.matrix_dims("scatter_rows", v)?.1,
            None => return Err(NumericsError::InvalidShape(vec![n, 0])),
        };
        let mut out = vec![0.0; n * d];
        let mut seen = vec![false; n];
        for &(v, rows) in parts {
            let (r, c) = self.matrix_dims("scatter_rows", v)?;
            if c != d || r != rows.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "scatter_rows",
                    left: vec![r, c],
                    right: vec![rows.len(), d],
                });
            }
            let src = self.value(v).data();
            for (i, &dst) in rows.iter().enumerate() {
                if dst >= n {
                    return Err(NumericsError::IndexOutOfRange { index: dst, bound: n });
                }
                if std::mem::replace(&mut seen[dst], true) {
                    return Err(NumericsError::RowCoverage(dst));
                }
                out[dst * d..(dst + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(NumericsError::RowCoverage(missing));
        }
        let value = Tensor::new(vec![n, d], out)?;
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let op = Op::ScatterRows(parts.iter().map(|(v, r)| (*v, r.to_vec())).collect());
        self.push("scatter_rows", value, op, &inputs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Rotates channel pairs `(j, j + head_dim/2)` of every head.
    ///
    /// `x` is `[tokens, heads * head_dim]`; `cos`/`sin` are
    /// `[tokens, head_dim / 2]` and shared by all heads of a token.
    pub fn rotate_pairs(
        &mut self,
        x: Var,
        cos: &[f64],
        sin: &[f64],
        head_dim: usize,
    ) -> Result<Var, NumericsError> {
        let (n, width) = self.matrix_dims("rotate_pairs", x)?;
        let half = head_dim / 2;
        if head_dim % 2 != 0 || width % head_dim != 0 || cos.len() != n * half || sin.len() != n * half {
            return Err(NumericsError::ShapeMismatch {
                op: "rotate_pairs",
                left: vec![n, width],
                right: vec![cos.len(), head_dim],
            });
        }
        let mut out = self.value(x).data().to_vec();
        rotate_rows(&mut out, cos, sin, width, head_dim, 1.0);
        let value = Tensor::new(vec![n, width], out)?;
        let op = Op::RotatePairs {
            x,
            cos: cos.to_vec(),
            sin: sin.to_vec(),
            head_dim,
        };
        self.push("rotate_pairs", value, op, &[x])
    }

    /// Multi-head scaled dot-product attention over packed `[m, heads * hd]`
    /// queries and `[n, heads * hd]` keys/values. `bias` is an `[m, n]`
    /// additive logit mask shared by all heads.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: &Rc<[f64]>,
    ) -> Result<Var, NumericsError> {
        let (m, width) = self.matrix_dims("attention", q)?;
        let (n, kw) = self.matrix_dims("attention", k)?;
        self.same_shape("attention", k, v)?;
        if kw != width || heads == 0 || width % heads != 0 || bias.len() != m * n {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                left: vec![m, width],
                right: vec![n, kw, heads, bias.len()],
            });
        }
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * width];
        let ld = width as isize;
        let mut scores = vec![0.0; m * n];
        for h in 0..heads {
            let p = &mut probs[h * m * n..(h + 1) * m * n];
            strided_gemm(m, hd, n, &qd[h * hd..], (ld, 1), &kd[h * hd..], (1, ld), 0.0, &mut scores, (n as isize, 1));
            for ((pi, si), bi) in p.iter_mut().zip(&scores).zip(bias.iter()) {
                *pi = bi + si * scale;
            }
            for row in p.chunks_mut(n) {
                softmax_in_place(row);
            }
            strided_gemm(m, n, hd, p, (n as isize, 1), &vd[h * hd..], (ld, 1), 0.0, &mut out[h * hd..], (ld, 1));
        }
        let value = Tensor::new(vec![m, width], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        self.push("attention", value, op, &[q, k, v])
    }

    /// Reverse sweep from a scalar `loss`; accumulates into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {
                let node = &nodes[i];
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    empty => {
                        *empty = Some(Tensor::new(node.value.shape().to_vec(), g).expect("leaf shape"))
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(da) = grad_slot(nodes, grads, a) {
                    gemm(m, n, k, &g, false, val(b), true, 1.0, da);
                }
                if let Some(db) = grad_slot(nodes, grads, b) {
                    gemm(k, m, n, val(a), true, &g, false, 1.0, db);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = grad_slot(nodes, grads, v) {
                        add_into(d, &g, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = grad_slot(nodes, grads, a) {
                    add_into(d, &g, 1.0);
                }
                if let Some(d) = grad_slot(nodes, grads, b) {
                    add_into(d, &g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(d) = grad_slot(nodes, grads, a) {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(val(b)) {
                        *d += g * y;
                    }
                }
                if let Some(d) = grad_slot(nodes, grads, b) {
                    for ((d, g), x) in d.iter_mut().zip(&g).zip(val(a)) {
                        *d += g * x;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(d) = grad_slot(nodes, grads, x) {
                    add_into(d, &g, c);
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(d) = grad_slot(nodes, grads, x) {
                    add_into(d, &g, 1.0);
                }
                if let Some(db) = grad_slot(nodes, grads, bias) {
                    let width = db.len();
                    for row in g.chunks(width) {
                        add_into(db, row, 1.0);
                    }
                }
            }
            &Op::Silu(x) => {
                if let Some(d) = grad_slot(nodes, grads, x) {
                    for ((d, g), &x) in d.iter_mut().zip(&g).zip(val(x)) {
                        let s = sigmoid(x);
                        *d += g * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xs = val(x);
                let gs = val(gain);
                let d = gs.len();
                if let Some(dg) = grad_slot(nodes, grads, gain) {
                    for ((gy, xr), r) in g.chunks(d).zip(xs.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            dg[j] += gy[j] * xr[j] * r;
                        }
                    }
                }
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for (((dxr, gy), xr), &r) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xs.chunks(d)).zip(inv_rms) {
                        let dot: f64 = (0..d).map(|j| gy[j] * gs[j] * xr[j]).sum();
                        let c = r * r * r * dot / d as f64;
                        for j in 0..d {
                            dxr[j] += r * gy[j] * gs[j] - c * xr[j];
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let d = nodes[i].value.last_dim();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for ((dxr, gy), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(d) = grad_slot(nodes, grads, x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(d) = grad_slot(nodes, grads, x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(d) = grad_slot(nodes, grads, *logits) {
                    let vocab = nodes[logits.0].value.last_dim();
                    let s = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut d[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            row[j] += s * p[j];
                        }
                        row[t] -= s;
                    }
                }
            }
            &Op::Mse(p, t) => {
                let s = 2.0 * g[0] / nodes[p.0].value.len() as f64;
                let (pv, tv) = (val(p), val(t));
                if let Some(d) = grad_slot(nodes, grads, p) {
                    for j in 0..d.len() {
                        d[j] += s * (pv[j] - tv[j]);
                    }
                }
                if let Some(d) = grad_slot(nodes, grads, t) {
                    for j in 0..d.len() {
                        d[j] -= s * (pv[j] - tv[j]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(d) = grad_slot(nodes, grads, *x) {
                    let w = nodes[i].value.last_dim();
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut d[src * w..(src + 1) * w], &g[r * w..(r + 1) * w], 1.0);
                    }
                }
            }
            Op::ScatterRows(parts) => {
                let w = nodes[i].value.last_dim();
                for (v, rows) in parts {
                    if let Some(d) = grad_slot(nodes, grads, *v) {
                        for (r, &dst) in rows.iter().enumerate() {
                            add_into(&mut d[r * w..(r + 1) * w], &g[dst * w..(dst + 1) * w], 1.0);
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(d) = grad_slot(nodes, grads, x) {
                    add_into(d, &g, 1.0);
                }
            }
            Op::RotatePairs {
                x,
                cos,
                sin,
                head_dim,
            } => {
                if let Some(d) = grad_slot(nodes, grads, *x) {
                    let width = nodes[i].value.last_dim();
                    let mut back = g;
                    rotate_rows(&mut back, cos, sin, width, *head_dim, -1.0);
                    add_into(d, &back, 1.0);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (m, width) = (nodes[q.0].value.shape()[0], nodes[q.0].value.shape()[1]);
                let n = nodes[k.0].value.shape()[0];
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let ld = width as isize;
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut dq = vec![0.0; m * width];
                let mut dk = vec![0.0; n * width];
                let mut dv = vec![0.0; n * width];
                let mut ds = vec![0.0; m * n];
                for h in 0..heads {
                    let p = &probs[h * m * n..(h + 1) * m * n];
                    // dV_h = P^T dO_h
                    strided_gemm(n, m, hd, p, (1, n as isize), &g[h * hd..], (ld, 1), 0.0, &mut dv[h * hd..], (ld, 1));
                    // dP = dO_h V_h^T
                    strided_gemm(m, hd, n, &g[h * hd..], (ld, 1), &vd[h * hd..], (1, ld), 0.0, &mut ds, (n as isize, 1));
                    for (dsr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
                        let dot: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dsr[j] = pr[j] * (dsr[j] - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h, dK_h = dS^T Q_h
                    strided_gemm(m, n, hd, &ds, (n as isize, 1), &kd[h * hd..], (ld, 1), 0.0, &mut dq[h * hd..], (ld, 1));
                    strided_gemm(n, m, hd, &ds, (1, n as isize), &qd[h * hd..], (ld, 1), 0.0, &mut dk[h * hd..], (ld, 1));
                }
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(slot) = grad_slot(nodes, grads, var) {
                        add_into(slot, &d, 1.0);
                    }
                }
            }
        }
    }
}

fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; node.value.len()])
            .as_mut_slice(),
    )
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax. Entries at `-inf` map to 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Rotates pairs `(j, j + half)` inside each `head_dim` block by `sign * angle`.
pub(crate) fn rotate_rows(data: &mut [f64], cos: &[f64], sin: &[f64], width: usize, head_dim: usize, sign: f64) {
    let half = head_dim / 2;
    for (t, row) in data.chunks_mut(width).enumerate() {
        let c = &cos[t * half..(t + 1) * half];
        let s = &sin[t * half..(t + 1) * half];
        for head in row.chunks_mut(head_dim) {
            for j in 0..half {
                let (a, b) = (head[j], head[j + half]);
                let sn = sign * s[j];
                head[j] = a * c[j] - b * sn;
                head[j + half] = a * sn + b * c[j];
            }
        }
    }
}

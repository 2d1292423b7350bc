//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and enough information to run its local backward
//! rule; [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients into a [`Gradients`] table with one slot per node.
//!
//! [`Tape::stop_gradient`] is the gradient controller: its output is the
//! operand's value bit for bit, and its backward rule contributes nothing.
//!
//! ```
//! use multigran::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
//! let gated = tape.stop_gradient(x);
//! let y = tape.add(x, gated).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        self.dims2()
            .ok_or_else(|| Error::shape(op, format!("expected a matrix, got {:?}", self.shape)))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `a[m×n] · b[n×p]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `g[m×p] · b[n×p]ᵀ`, accumulated into `acc[m×n]`.
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, p: usize, acc: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let b_row = &b[k * p..(k + 1) * p];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            acc[i * n + k] += dot;
        }
    }
}

/// `a[m×n]ᵀ · g[m×p]`, accumulated into `acc[n×p]`.
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, n: usize, p: usize, acc: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let acc_row = &mut acc[k * p..(k + 1) * p];
            for (o, gv) in acc_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_matrix("matmul")?;
    let (n2, p) = b.expect_matrix("matmul")?;
    if n != n2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: [{m}x{n}] . [{n2}x{p}]"),
        ));
    }
    Ok(Tensor {
        shape: vec![m, p],
        data: matmul_nn(&a.data, &b.data, m, n, p),
    })
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddBias(Var, Var),
    Relu(Var),
    Columns { src: Var, start: usize },
    Concat(Vec<Var>),
    // operand is recorded but never receives gradient
    StopGradient(#[allow(dead_code)] Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Sum(Var),
    Add(Var, Var),
    Scale(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::Columns { .. } => "split",
            Op::Concat(_) => "concat",
            Op::StopGradient(_) => "stop_gradient",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in execution order, so operands always precede their
/// outputs and the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter. Leaves receive gradients like any node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (_, n) = xv.expect_matrix("add_bias")?;
        if bv.shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match width {n}", bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data.chunks_mut(n) {
            for (o, bias) in row.iter_mut().zip(&bv.data) {
                *o += bias;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            // `max` would keep -0.0; the output is exactly 0 for x <= 0.
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    /// Splits the columns of `f` into `k` equal contiguous blocks.
    pub fn split(&mut self, f: Var, k: usize) -> Result<Vec<Var>> {
        let (m, d) = self.value(f).expect_matrix("split")?;
        if k == 0 || d % k != 0 {
            return Err(Error::shape(
                "split",
                format!("width {d} is not divisible into {k} equal parts"),
            ));
        }
        let w = d / k;
        let mut parts = Vec::with_capacity(k);
        for s in 0..k {
            let src = self.value(f);
            let mut data = Vec::with_capacity(m * w);
            for i in 0..m {
                data.extend_from_slice(&src.data[i * d + s * w..i * d + (s + 1) * w]);
            }
            let part = Tensor {
                shape: vec![m, w],
                data,
            };
            parts.push(self.push(part, Op::Columns { src: f, start: s * w })?);
        }
        Ok(parts)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no parts"));
        };
        let (m, _) = self.value(first).expect_matrix("concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat")?;
            if r != m {
                return Err(Error::shape(
                    "concat",
                    format!("row counts differ: {m} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor {
            shape: vec![m, total],
            data,
        };
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Identity in the forward pass; contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.nodes.push(Node {
            value: out,
            op: Op::StopGradient(x),
        });
        Var(self.nodes.len() - 1)
    }

    /// Mean softmax cross-entropy of `m` rows of logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = lv.expect_matrix("softmax_cross_entropy")?;
        if m == 0 || targets.len() != m {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{m} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::OutOfRange {
                what: "cross-entropy target",
                index: t,
                limit: c,
            });
        }
        let mut probs = Tensor::zeros(&[m, c]);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut probs.data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
            total += z.ln() - (row[t] - max);
        }
        let loss = Tensor::scalar(total / m as f64);
        self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.nodes.push(Node {
            value: Tensor::scalar(s),
            op: Op::Sum(x),
        });
        Var(self.nodes.len() - 1)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", av.shape, bv.shape),
            ));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * c).collect(),
        };
        self.push(out, Op::Scale(x, c))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node gets a gradient of its own shape; nodes the loss does not
    /// depend on (or depends on only through `stop_gradient`) get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(format!(
                "loss node {} is not on this tape ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn slot<'a>(grads: &'a mut [Option<Tensor>], tape: &Tape, v: Var) -> &'a mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(tape.value(v).shape()))
        }

        match &self.nodes[idx].op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.shape[0], av.shape[1]);
                let p = bv.shape[1];
                matmul_nt_acc(&g.data, &bv.data, m, n, p, &mut slot(grads, self, *a).data);
                matmul_tn_acc(&av.data, &g.data, m, n, p, &mut slot(grads, self, *b).data);
            }
            Op::AddBias(x, b) => {
                let n = g.shape[1];
                for (o, gv) in slot(grads, self, *x).data.iter_mut().zip(&g.data) {
                    *o += gv;
                }
                let gb = slot(grads, self, *b);
                for row in g.data.chunks(n) {
                    for (o, gv) in gb.data.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let gx = slot(grads, self, *x);
                for ((o, gv), &v) in gx.data.iter_mut().zip(&g.data).zip(xv) {
                    if v > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Columns { src, start } => {
                let (m, w) = (g.shape[0], g.shape[1]);
                let d = self.value(*src).shape[1];
                let gs = slot(grads, self, *src);
                for i in 0..m {
                    let dst = &mut gs.data[i * d + start..i * d + start + w];
                    for (o, gv) in dst.iter_mut().zip(&g.data[i * w..(i + 1) * w]) {
                        *o += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let (m, total) = (g.shape[0], g.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    let gp = slot(grads, self, p);
                    for i in 0..m {
                        let src = &g.data[i * total + offset..i * total + offset + w];
                        for (o, gv) in gp.data[i * w..(i + 1) * w].iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                    offset += w;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = probs.shape[1];
                let scale = g.data[0] / targets.len() as f64;
                let gl = slot(grads, self, *logits);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl.data[i * c + j] += scale * (probs.data[i * c + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.data[0];
                for o in &mut slot(grads, self, *x).data {
                    *o += gv;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    for (o, gv) in slot(grads, self, v).data.iter_mut().zip(&g.data) {
                        *o += gv;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, gv) in slot(grads, self, *x).data.iter_mut().zip(&g.data) {
                    *o += c * gv;
                }
            }
        }
    }
}

/// Gradient of the loss with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.grads[v.0], Tensor::zeros(&[0]))
    }
}

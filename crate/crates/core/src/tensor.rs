//! Dense row-major matrices and a define-by-run tape for reverse-mode
//! differentiation.
//!
//! Everything is rank two: vectors are `1 × n` rows and scalars are `1 × 1`.
//! The tape is rebuilt for every loss evaluation, so the composition of a
//! step can change freely between training phases.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Data(format!(
                "tensor of shape [{rows}, {cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Data(format!(
                    "row {i} has length {}, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape(),
                right: [rows, cols],
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine",
            left: [1, a.len()],
            right: [1, b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("cosine"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// L2-normalizes a vector.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector("normalize"));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Max-shifted softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Single-head attention across the `tokens` equal slices of each row.
///
/// Returns the attended values and the attention matrices (one `tokens ×
/// tokens` block per row, row-major).
fn token_attention_forward(q: &Tensor, k: &Tensor, u: &Tensor, tokens: usize) -> (Tensor, Vec<f64>) {
    let width = q.cols / tokens;
    let scale = 1.0 / (width as f64).sqrt();
    let mut out = Tensor::zeros(q.rows, q.cols);
    let mut weights = vec![0.0; q.rows * tokens * tokens];
    let mut scores = vec![0.0; tokens];
    for r in 0..q.rows {
        let (qr, kr, ur) = (q.row(r), k.row(r), u.row(r));
        let attn = &mut weights[r * tokens * tokens..(r + 1) * tokens * tokens];
        for i in 0..tokens {
            let qi = &qr[i * width..(i + 1) * width];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &kr[j * width..(j + 1) * width]) * scale;
            }
            attn[i * tokens..(i + 1) * tokens].copy_from_slice(&softmax(&scores));
        }
        let orow = out.row_mut(r);
        for i in 0..tokens {
            for j in 0..tokens {
                let a = attn[i * tokens + j];
                for t in 0..width {
                    orow[i * width + t] += a * ur[j * width + t];
                }
            }
        }
    }
    (out, weights)
}

/// Attention weights for every row, `tokens × tokens` per row.
pub fn token_attention_weights(q: &Tensor, k: &Tensor, tokens: usize) -> Result<Vec<Tensor>> {
    check_tokens(q.cols, tokens)?;
    let (_, weights) = token_attention_forward(q, k, q, tokens);
    Ok(weights
        .chunks(tokens * tokens)
        .map(|w| Tensor::new(tokens, tokens, w.to_vec()).expect("square block"))
        .collect())
}

pub(crate) fn check_tokens(dim: usize, tokens: usize) -> Result<()> {
    if tokens == 0 || !dim.is_multiple_of(tokens) {
        return Err(Error::Config(format!(
            "feature dimension {dim} is not divisible by token count {tokens}"
        )));
    }
    Ok(())
}

/// Handle to a node on a [`Tape`].
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
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    XLogX(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    Reshape(Var),
    TokenAttention {
        q: Var,
        k: Var,
        u: Var,
        tokens: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Parents always precede children.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` if the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: [usize; 2]) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is trainable only when `trainable` is set.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb[0] != 1 || sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "add_row",
                left: sa,
                right: sb,
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for r in 0..sa[0] {
            for (x, y) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    /// Subtracts the `m × 1` column `b` from every column of `a`.
    pub fn sub_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb[1] != 1 || sa[0] != sb[0] {
            return Err(Error::Dimension {
                op: "sub_col",
                left: sa,
                right: sb,
            });
        }
        let col = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for (r, c) in col.iter().enumerate() {
            for x in value.row_mut(r) {
                *x -= c;
            }
        }
        Ok(self.push(value, Op::SubCol(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    /// `x ln x`, with the continuous extension `0` at `x = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x == 0.0 { 0.0 } else { x * x.ln() });
        self.push(value, Op::XLogX(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            data.extend(softmax(x.row(r)));
        }
        let value = Tensor::new(x.rows(), x.cols(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            data.extend(log_softmax(x.row(r)));
        }
        let value = Tensor::new(x.rows(), x.cols(), data).expect("same shape");
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// L2-normalizes every row. Fails on a zero row.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = norm(x.row(r));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateVector("normalize_rows"));
            }
            for v in value.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
        }
        Ok(self.push(value, Op::NormalizeRows { x: a, norms }, &[a]))
    }

    /// Cosine similarity of two `1 × d` vectors as a scalar node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        Ok(self.sum(prod))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Column-wise mean over rows, giving a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.rows() as f64;
        let mut acc = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (s, v) in acc.iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        let value = Tensor::row_vector(acc.into_iter().map(|s| s / m).collect());
        self.push(value, Op::MeanRows(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Label {
                label: bad,
                classes: x.rows(),
            });
        }
        let value = x.gather_rows(indices);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Picks one column per row, giving an `m × 1` column.
    pub fn pick_per_row(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if columns.len() != x.rows() {
            return Err(Error::Dimension {
                op: "pick_per_row",
                left: x.shape(),
                right: [columns.len(), 1],
            });
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= x.cols()) {
            return Err(Error::Label {
                label: bad,
                classes: x.cols(),
            });
        }
        let data = columns.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let value = Tensor::new(columns.len(), 1, data)?;
        Ok(self.push(value, Op::PickPerRow(a, columns.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row-wise single-head attention over `tokens` slices of width
    /// `d / tokens`: scores `⟨q_i, k_j⟩ / √width`, softmax over `j`, and
    /// attended output `Σ_j a_ij u_j`.
    pub fn token_attention(&mut self, q: Var, k: Var, u: Var, tokens: usize) -> Result<Var> {
        let shape = self.shape(q);
        for other in [k, u] {
            if self.shape(other) != shape {
                return Err(Error::Dimension {
                    op: "token_attention",
                    left: shape,
                    right: self.shape(other),
                });
            }
        }
        check_tokens(shape[1], tokens)?;
        let (value, weights) = token_attention_forward(self.value(q), self.value(k), self.value(u), tokens);
        Ok(self.push(
            value,
            Op::TokenAttention {
                q,
                k,
                u,
                tokens,
                weights,
            },
            &[q, k, u],
        ))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::Rank(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |var: Var, delta: Tensor| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |var: Var| self.nodes[var.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // y = a b: da = g bᵀ, db = aᵀ g
                if needs(*a) {
                    acc(*a, g.matmul_t(self.value(*b)).expect("shapes recorded"));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).transpose().matmul(g).expect("shapes recorded"));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if needs(*a) {
                    acc(*a, g.matmul(self.value(*b)).expect("shapes recorded"));
                }
                if needs(*b) {
                    acc(*b, g.transpose().matmul(self.value(*a)).expect("shapes recorded"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), "mul", |x, y| x * y).expect("same shape"));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), "mul", |x, y| x * y).expect("same shape"));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    let mut col_sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in col_sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(*b, Tensor::row_vector(col_sums));
                }
            }
            Op::SubCol(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    let sums = (0..g.rows()).map(|r| -g.row(r).iter().sum::<f64>()).collect();
                    acc(*b, Tensor::new(g.rows(), 1, sums).expect("column"));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                        .expect("same shape"),
                );
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, "square", |gv, xv| 2.0 * xv * gv).expect("same shape"));
            }
            Op::XLogX(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, "xlogx", |gv, xv| gv * (xv.ln() + 1.0))
                        .expect("same shape"),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - inner);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = gv - yv.exp() * total;
                    }
                }
                acc(*a, dx);
            }
            Op::NormalizeRows { x, norms } => {
                // dx = (g - y ⟨y, g⟩) / ‖x‖
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for (d, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = (gv - yv * inner) / n;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let [r, c] = self.shape(*a);
                let m = r as f64;
                acc(*a, Tensor::from_fn(r, c, |_, j| g.get(0, j) / m));
            }
            Op::GatherRows(a, indices) => {
                let [r, c] = self.shape(*a);
                let mut dx = Tensor::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                acc(*a, dx);
            }
            Op::PickPerRow(a, columns) => {
                let [r, c] = self.shape(*a);
                let mut dx = Tensor::zeros(r, c);
                for (row, &col) in columns.iter().enumerate() {
                    dx.set(row, col, g.get(row, 0));
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, g.reshape(r, c).expect("same length"));
            }
            Op::TokenAttention {
                q,
                k,
                u,
                tokens,
                weights,
            } => {
                let (dq, dk, du) = self.token_attention_backward(*q, *k, *u, *tokens, weights, g);
                acc(*q, dq);
                acc(*k, dk);
                acc(*u, du);
            }
        }
    }

    fn token_attention_backward(
        &self,
        q: Var,
        k: Var,
        u: Var,
        tokens: usize,
        weights: &[f64],
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, uv) = (self.value(q), self.value(k), self.value(u));
        let [rows, cols] = qv.shape();
        let width = cols / tokens;
        let scale = 1.0 / (width as f64).sqrt();
        let mut dq = Tensor::zeros(rows, cols);
        let mut dk = Tensor::zeros(rows, cols);
        let mut du = Tensor::zeros(rows, cols);
        let mut d_attn = vec![0.0; tokens * tokens];
        let mut d_score = vec![0.0; tokens * tokens];
        for r in 0..rows {
            let attn = &weights[r * tokens * tokens..(r + 1) * tokens * tokens];
            let (qr, kr, ur, gr) = (qv.row(r), kv.row(r), uv.row(r), g.row(r));
            // dA_ij = ⟨g_i, u_j⟩ ; dU_j = Σ_i A_ij g_i
            let du_row = du.row_mut(r);
            for i in 0..tokens {
                let gi = &gr[i * width..(i + 1) * width];
                for j in 0..tokens {
                    d_attn[i * tokens + j] = dot(gi, &ur[j * width..(j + 1) * width]);
                    let a = attn[i * tokens + j];
                    for t in 0..width {
                        du_row[j * width + t] += a * gi[t];
                    }
                }
            }
            // softmax backward per attention row gives the score gradient
            for i in 0..tokens {
                let a_row = &attn[i * tokens..(i + 1) * tokens];
                let inner = dot(a_row, &d_attn[i * tokens..(i + 1) * tokens]);
                for j in 0..tokens {
                    d_score[i * tokens + j] = a_row[j] * (d_attn[i * tokens + j] - inner) * scale;
                }
            }
            let dq_row = dq.row_mut(r);
            for i in 0..tokens {
                for j in 0..tokens {
                    let ds = d_score[i * tokens + j];
                    for t in 0..width {
                        dq_row[i * width + t] += ds * kr[j * width + t];
                    }
                }
            }
            let dk_row = dk.row_mut(r);
            for i in 0..tokens {
                for j in 0..tokens {
                    let ds = d_score[i * tokens + j];
                    for t in 0..width {
                        dk_row[j * width + t] += ds * qr[i * width + t];
                    }
                }
            }
        }
        (dq, dk, du)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let six = Tensor::scalar(2.0).matmul(&Tensor::scalar(3.0)).unwrap();
        assert_eq!(six.item(), 6.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(2, 3).matmul(&Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(
            err,
            Error::Dimension {
                left: [2, 3],
                right: [2, 3],
                ..
            }
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -2.0, 5.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::filled(3, 2, 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Rank([2, 2]))));
    }

    #[test]
    fn cosine_gradient_is_tangent_at_the_target() {
        let c = Tensor::row_vector(vec![0.2, -0.7, 1.1, 0.4]);
        let mut tape = Tape::new();
        let x = tape.param(c.clone());
        let target = tape.constant(c.clone());
        let cos = tape.cosine(x, target).unwrap();
        let grads = tape.backward(cos).unwrap();
        let radial = dot(grads.get(x).unwrap().data(), c.data());
        assert!(radial.abs() < 1e-14, "radial component {radial}");
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(5, 7, |_, _| rng.random_range(-50.0..50.0)));
        let y = tape.softmax_rows(x);
        let y = tape.value(y);
        for r in 0..5 {
            assert!(y.row(r).iter().all(|&p| p >= 0.0));
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(2, 2, 1.0));
        let b = tape.param(Tensor::filled(2, 2, 2.0));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(1, 3));
        assert!(matches!(tape.normalize_rows(a), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn token_count_must_divide_width() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(1, 6));
        assert!(matches!(tape.token_attention(a, a, a, 4), Err(Error::Config(_))));
    }
}

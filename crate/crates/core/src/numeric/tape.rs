//! Reverse-mode differentiation over a linear record of matrix operations.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. [`Tape::backward`] walks the record once in reverse and
//! returns the gradient of a `1 x 1` loss with respect to every leaf.

use crate::error::{Error, Result};

use super::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SumOverRows(Var),
    MaxOverRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    SumSquares(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of one loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Scales row `i` of an `m x n` matrix by entry `i` of an `m x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * col {:?}", x.shape(), c.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            let s = c.get(i, 0);
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        Ok(self.push(value, Op::MulCol(a, col)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", x.shape(), y.shape()),
            ));
        }
        let mut data = Vec::with_capacity(x.len() + y.len());
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let value = Matrix::from_vec(x.rows(), x.cols() + y.cols(), data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} columns vs {cols}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Column-wise sum over rows: `m x n -> 1 x n`.
    pub fn sum_over_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::shape("sum_over_rows", "no rows"));
        }
        let mut value = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (s, v) in value.data_mut().iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        Ok(self.push(value, Op::SumOverRows(a)))
    }

    /// Column-wise max over rows: `m x n -> 1 x n`. Ties resolve to the
    /// lowest row index, which alone receives the gradient.
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::shape("max_over_rows", "no rows"));
        }
        let mut value = Matrix::from_vec(1, x.cols(), x.row(0).to_vec())?;
        let mut argmax = vec![0; x.cols()];
        for r in 1..x.rows() {
            for (c, &v) in x.row(r).iter().enumerate() {
                if v > value.get(0, c) {
                    value.set(0, c, v);
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(value, Op::MaxOverRows(a, argmax)))
    }

    /// Selects rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of a {}-row table", t.rows()),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec(ids.len(), t.cols(), data)?;
        Ok(self.push(value, Op::Gather(table, ids.to_vec())))
    }

    /// Mean over rows of `-log softmax(logits_row)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if labels.is_empty() || x.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if x.rows() != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} rows for {} labels", x.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} with {} classes", x.cols()),
            ));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        let probs = softmax_rows(x);
        let value = Matrix::filled(1, 1, loss);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of squared entries as a `1 x 1` value.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum_squares());
        self.push(value, Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Gradients of the `1 x 1` value `loss` with respect to every leaf.
    /// A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.zip_map(bv, |g, b| g * b));
                    accumulate(&mut grads, *b, g.zip_map(av, |g, a| g * a));
                }
                Op::Affine(a, scale) => {
                    let s = *scale;
                    accumulate(&mut grads, *a, g.map(|x| s * x));
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let (xv, cv) = (self.value(*a), self.value(*col));
                    let mut gx = g.clone();
                    let mut gc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cv.get(r, 0);
                        let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                        gc.set(r, 0, dot);
                        for v in gx.row_mut(r) {
                            *v *= s;
                        }
                    }
                    accumulate(&mut grads, *col, gc);
                    accumulate(&mut grads, *a, gx);
                }
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                    );
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, *a, g.zip_map(y, |g, s| g * s * (1.0 - s)));
                }
                Op::Tanh(a) => {
                    accumulate(&mut grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t)));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Vec::with_capacity(g.rows() * ca);
                    let mut gb = Vec::with_capacity(g.rows() * cb);
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), ca, ga)?);
                    accumulate(&mut grads, *b, Matrix::from_vec(g.rows(), cb, gb)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, *p, Matrix::from_vec(rows, cols, slice)?);
                        offset += rows;
                    }
                }
                Op::SumOverRows(a) => {
                    let rows = self.value(*a).rows();
                    let mut gx = Matrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        gx.row_mut(r).copy_from_slice(g.row(0));
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::MaxOverRows(a, argmax) => {
                    let mut gx = Matrix::zeros(self.value(*a).rows(), g.cols());
                    for (c, &r) in argmax.iter().enumerate() {
                        gx.set(r, c, g.get(0, c));
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.value(*table).shape();
                    let slot = grads[table.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, v) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[l] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.get(0, 0);
                    accumulate(&mut grads, *a, self.value(*a).map(|x| s * x));
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, g.get(0, 0)));
                }
            }
        }

        Ok(Gradients { grads })
    }
}

//! Define-by-run reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a [`Node`] in
//! creation order. Inputs of a node always precede it, so a single reverse
//! sweep in [`Tape::backward`] propagates gradients. Tapes are rebuilt for
//! every forward pass; parameters live outside the tape and are bound as
//! leaves each time.

use std::fmt;

use thiserror::Error;

/// Guard for every norm division.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("degenerate vector in {op}: row {row} has norm {norm:e}")]
    DegenerateVector {
        op: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("label {label} out of range for {classes} classes (row {row})")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("index {index} out of range in {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Dimension {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a · b` for row-major matrices.
pub fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `aᵀ · b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a · bᵀ` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Relu(Var),
    /// `B×n + 1×n`, the bias row broadcast over every row.
    AddRowBias(Var, Var),
    /// Per-row L2 normalization; stores the row norms.
    RowNormalize(Var, Vec<f64>),
    /// Per-row L2 norm, `B×d → B×1`.
    RowNorm(Var),
    /// Per-row sum, `B×d → B×1`.
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    /// Picks `(row, col)` entries into an `n×1` column.
    GatherElements(Var, Vec<(usize, usize)>),
    /// Mean softmax cross-entropy; stores labels and the row softmax.
    SoftmaxCrossEntropy(Var, Vec<usize>, Tensor),
    GradReverse(Var, f64),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Append-only operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
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

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = Tensor::zeros(value.rows, value.cols);
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            return Err(shape_err("matmul", av, bv));
        }
        let out = matmul_raw(av, bv);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        // x*x with the same operand twice; backward accumulates both paths.
        self.mul(a, a).expect("same shape")
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(shape_err("add_row_bias", av, bv));
        }
        let mut out = av.clone();
        for row in out.data.chunks_mut(av.cols.max(1)) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRowBias(a, bias), out))
    }

    /// Normalizes every row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut norms = Vec::with_capacity(av.rows);
        let mut out = av.clone();
        for r in 0..av.rows {
            let row = &mut out.data[r * av.cols..(r + 1) * av.cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(AutodiffError::DegenerateVector {
                    op: "l2_normalize",
                    row: r,
                    norm,
                });
            }
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        Ok(self.push(Op::RowNormalize(a, norms), out))
    }

    /// Per-row L2 norm. The gradient is taken as zero for rows below the guard.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows)
            .map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor {
            rows: av.rows,
            cols: 1,
            data,
        };
        self.push(Op::RowNorm(a), out)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor {
            rows: av.rows,
            cols: 1,
            data,
        };
        self.push(Op::SumRows(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean over all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = if av.data.is_empty() {
            0.0
        } else {
            av.data.iter().sum::<f64>() / av.data.len() as f64
        };
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Row-wise cosine similarity, `B×d, B×d → B×1`.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).shape() != self.value(v).shape() {
            return Err(shape_err("cosine", self.value(u), self.value(v)));
        }
        let un = self.l2_normalize(u)?;
        let vn = self.l2_normalize(v)?;
        let prod = self.mul(un, vn)?;
        Ok(self.sum_rows(prod))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * av.cols);
        for &i in indices {
            if i >= av.rows {
                return Err(AutodiffError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: av.rows,
                });
            }
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor {
            rows: indices.len(),
            cols: av.cols,
            data,
        };
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), out))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.cols {
            return Err(shape_err("concat_rows", av, bv));
        }
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Tensor {
            rows: av.rows + bv.rows,
            cols: av.cols,
            data,
        };
        Ok(self.push(Op::ConcatRows(a, b), out))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows {
            return Err(shape_err("concat_cols", av, bv));
        }
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor {
            rows: av.rows,
            cols,
            data,
        };
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    pub fn gather_elements(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= av.rows || c >= av.cols {
                return Err(AutodiffError::Index {
                    op: "gather_elements",
                    index: r * av.cols + c,
                    bound: av.rows * av.cols,
                });
            }
            data.push(av.get(r, c));
        }
        let out = Tensor {
            rows: at.len(),
            cols: 1,
            data,
        };
        Ok(self.push(Op::GatherElements(a, at.to_vec()), out))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows {
            return Err(AutodiffError::Dimension {
                op: "softmax_cross_entropy",
                lhs: lv.shape(),
                rhs: (labels.len(), 1),
            });
        }
        let classes = lv.cols;
        let mut probs = Tensor::zeros(lv.rows, classes);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(AutodiffError::Label {
                    row: r,
                    label,
                    classes,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let top = row.iter().position(|&x| x == max).unwrap_or(0);
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != top)
                .map(|(_, x)| (x - max).exp())
                .sum();
            let denom = 1.0 + rest;
            let log_denom = rest.ln_1p();
            for (c, &x) in row.iter().enumerate() {
                probs.data[r * classes + c] = (x - max).exp() / denom;
            }
            total += log_denom - (row[label] - max);
        }
        let n = lv.rows.max(1) as f64;
        let out = Tensor::scalar(total / n);
        Ok(self.push(
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs),
            out,
        ))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-coeff`.
    pub fn grad_reverse(&mut self, a: Var, coeff: f64) -> Var {
        let out = self.value(a).clone();
        self.push(Op::GradReverse(a, coeff), out)
    }

    /// Zeroes every gradient so the tape can be differentiated again.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulates `dL/dnode` into every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarRoot {
                rows: rv.rows,
                cols: rv.cols,
            });
        }
        self.nodes[root.0].grad.data[0] += 1.0;
        for i in (0..=root.0).rev() {
            let g = std::mem::replace(&mut self.nodes[i].grad, Tensor::zeros(0, 0));
            if g.data.iter().all(|&x| x == 0.0) {
                self.nodes[i].grad = g;
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(before, &node.op, &node.value, &g);
            self.nodes[i].grad = g;
        }
        Ok(())
    }
}

fn acc(nodes: &mut [Node], v: Var, contrib: &Tensor) {
    nodes[v.0].grad.add_assign(contrib);
}

fn propagate(nodes: &mut [Node], op: &Op, value: &Tensor, g: &Tensor) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let da = matmul_nt(g, &nodes[b.0].value);
            let db = matmul_tn(&nodes[a.0].value, g);
            acc(nodes, *a, &da);
            acc(nodes, *b, &db);
        }
        Op::Transpose(a) => acc(nodes, *a, &g.transpose()),
        Op::Add(a, b) => {
            acc(nodes, *a, g);
            acc(nodes, *b, g);
        }
        Op::Sub(a, b) => {
            acc(nodes, *a, g);
            acc(nodes, *b, &g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let da = Tensor {
                rows: g.rows,
                cols: g.cols,
                data: g.data.iter().zip(&nodes[b.0].value.data).map(|(x, y)| x * y).collect(),
            };
            let db = Tensor {
                rows: g.rows,
                cols: g.cols,
                data: g.data.iter().zip(&nodes[a.0].value.data).map(|(x, y)| x * y).collect(),
            };
            acc(nodes, *a, &da);
            acc(nodes, *b, &db);
        }
        Op::Scale(a, c) => acc(nodes, *a, &g.map(|x| c * x)),
        Op::AddScalar(a, _) => acc(nodes, *a, g),
        Op::Tanh(a) => {
            let d = Tensor {
                rows: g.rows,
                cols: g.cols,
                data: g.data.iter().zip(&value.data).map(|(x, y)| x * (1.0 - y * y)).collect(),
            };
            acc(nodes, *a, &d);
        }
        Op::Relu(a) => {
            let d = Tensor {
                rows: g.rows,
                cols: g.cols,
                data: g
                    .data
                    .iter()
                    .zip(&nodes[a.0].value.data)
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect(),
            };
            acc(nodes, *a, &d);
        }
        Op::AddRowBias(a, bias) => {
            acc(nodes, *a, g);
            let mut db = Tensor::zeros(1, g.cols);
            for r in 0..g.rows {
                for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                    *d += x;
                }
            }
            acc(nodes, *bias, &db);
        }
        Op::RowNormalize(a, norms) => {
            // d x = (g - y (y·g)) / ‖x‖ with y the normalized row.
            let mut d = Tensor::zeros(g.rows, g.cols);
            for r in 0..g.rows {
                let y = value.row(r);
                let gr = g.row(r);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..g.cols {
                    d.data[r * g.cols + c] = (gr[c] - y[c] * dot) / norms[r];
                }
            }
            acc(nodes, *a, &d);
        }
        Op::RowNorm(a) => {
            let x = &nodes[a.0].value;
            let mut d = Tensor::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let n = value.data[r];
                if n > NORM_EPS {
                    for c in 0..x.cols {
                        d.data[r * x.cols + c] = g.data[r] * x.get(r, c) / n;
                    }
                }
            }
            acc(nodes, *a, &d);
        }
        Op::SumRows(a) => {
            let cols = nodes[a.0].value.cols;
            let mut d = Tensor::zeros(g.rows, cols);
            for r in 0..g.rows {
                d.data[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x = g.data[r]);
            }
            acc(nodes, *a, &d);
        }
        Op::Sum(a) => {
            let (r, c) = nodes[a.0].value.shape();
            let d = Tensor {
                rows: r,
                cols: c,
                data: vec![g.data[0]; r * c],
            };
            acc(nodes, *a, &d);
        }
        Op::Mean(a) => {
            let (r, c) = nodes[a.0].value.shape();
            if r * c > 0 {
                let d = Tensor {
                    rows: r,
                    cols: c,
                    data: vec![g.data[0] / (r * c) as f64; r * c],
                };
                acc(nodes, *a, &d);
            }
        }
        Op::GatherRows(a, idx) => {
            let cols = g.cols;
            let src = &mut nodes[a.0].grad;
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    src.data[i * cols + c] += g.data[k * cols + c];
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[a.0].value.len();
            let (top, bottom) = g.data.split_at(split);
            for (d, x) in nodes[a.0].grad.data.iter_mut().zip(top) {
                *d += x;
            }
            for (d, x) in nodes[b.0].grad.data.iter_mut().zip(bottom) {
                *d += x;
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = nodes[a.0].value.cols;
            let cb = nodes[b.0].value.cols;
            for r in 0..g.rows {
                let gr = g.row(r);
                for c in 0..ca {
                    nodes[a.0].grad.data[r * ca + c] += gr[c];
                }
                for c in 0..cb {
                    nodes[b.0].grad.data[r * cb + c] += gr[ca + c];
                }
            }
        }
        Op::GatherElements(a, at) => {
            let cols = nodes[a.0].value.cols;
            let src = &mut nodes[a.0].grad;
            for (k, &(r, c)) in at.iter().enumerate() {
                src.data[r * cols + c] += g.data[k];
            }
        }
        Op::SoftmaxCrossEntropy(a, labels, probs) => {
            let n = probs.rows.max(1) as f64;
            let scale = g.data[0] / n;
            let mut d = probs.clone();
            for (r, &label) in labels.iter().enumerate() {
                d.data[r * probs.cols + label] -= 1.0;
            }
            d.data.iter_mut().for_each(|x| *x *= scale);
            acc(nodes, *a, &d);
        }
        Op::GradReverse(a, coeff) => acc(nodes, *a, &g.map(|x| -coeff * x)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_hand_values() {
        let mut t = Tape::new();
        let i = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let out = t.matmul(i, b).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 4.0]);

        let a = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::Dimension { .. })));
        let c = t.leaf(Tensor::zeros(3, 2));
        assert!(matches!(t.mul(a, c), Err(AutodiffError::Dimension { .. })));
    }

    #[test]
    fn elementwise_definitions() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[-1.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);

        let z = t.leaf(Tensor::scalar(0.0));
        let th = t.tanh(z);
        assert_eq!(t.value(th).item(), 0.0);
        t.backward(th).unwrap();
        assert_eq!(t.grad(z).item(), 1.0);
    }

    #[test]
    fn l2_normalize_values_and_degenerate() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::row_vector(&[3.0, 4.0]));
        let n = t.l2_normalize(v).unwrap();
        assert!(close(t.value(n).get(0, 0), 0.6, 1e-15));
        assert!(close(t.value(n).get(0, 1), 0.8, 1e-15));
        let u = t.leaf(Tensor::row_vector(&[1.0, 0.0, 0.0]));
        let n = t.l2_normalize(u).unwrap();
        assert_eq!(t.value(n).data(), &[1.0, 0.0, 0.0]);
        let z = t.leaf(Tensor::row_vector(&[0.0, 1e-13]));
        assert!(matches!(
            t.l2_normalize(z),
            Err(AutodiffError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn cosine_cases() {
        let cases = [
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([2.0, 2.0], [2.0, 2.0], 1.0),
            ([1.0, 1.0], [1.0, -1.0], 0.0),
        ];
        for (u, v, want) in cases {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::row_vector(&u));
            let b = t.leaf(Tensor::row_vector(&v));
            let c = t.cosine(a, b).unwrap();
            assert!(close(t.value(c).item(), want, 1e-15), "{u:?} {v:?}");
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(3, 4));
        let ce = t.softmax_cross_entropy(l, &[0, 3, 2]).unwrap();
        assert!(close(t.value(ce).item(), 4f64.ln(), 1e-15));

        let l = t.leaf(Tensor::row_vector(&[10.0, -10.0]));
        let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
        let want = (-20f64).exp().ln_1p();
        assert!((t.value(ce).item() - want).abs() < 1e-20);
        assert!(close(t.value(ce).item(), 2.06e-9, 1e-11));

        let l = t.leaf(Tensor::zeros(1, 2));
        assert!(matches!(
            t.softmax_cross_entropy(l, &[2]),
            Err(AutodiffError::Label { label: 2, .. })
        ));
    }

    #[test]
    fn grad_reverse_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.5, -2.0]));
        let r = t.grad_reverse(x, 1.0);
        assert_eq!(t.value(r).data(), &[1.5, -2.0]);
        // upstream gradient [0.5, -0.3] injected through a weighted sum
        let w = t.leaf(Tensor::from_rows(&[vec![0.5], vec![-0.3]]));
        let s = t.matmul(r, w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[-0.5, 0.3]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.5, -2.0]));
        let r = t.grad_reverse(x, 0.0);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert!(t.grad(x).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_basic_rules() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.5));
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).item(), 1.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sq = t.square(x);
        t.backward(sq).unwrap();
        assert_eq!(t.grad(x).item(), 6.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        assert_eq!(
            t.backward(x),
            Err(AutodiffError::NonScalarRoot { rows: 1, cols: 2 })
        );
    }

    #[test]
    fn empty_partitions_flow_through() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(0, 3));
        let w = t.leaf(Tensor::zeros(3, 2));
        let y = t.matmul(x, w).unwrap();
        assert_eq!(t.value(y).shape(), (0, 2));
        let m = t.mean(y);
        assert_eq!(t.value(m).item(), 0.0);
        t.backward(m).unwrap();
    }
}

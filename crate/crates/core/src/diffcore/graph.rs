//! Dynamically recorded computation trace over small dense matrices.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the trace in reverse and accumulates adjoints. Parameter leaves
//! read from the flat parameter slice the graph was created over, and their
//! adjoints are scattered back into a gradient of the same length.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Row-major dense matrix; scalars are 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value and derivative of a user-supplied scalar function.
pub type ScalarFn = Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>;

/// Elementwise functions with known derivatives.
#[derive(Clone)]
pub enum Unary {
    Exp,
    Ln,
    Tanh,
    /// tanh approximation of GELU
    Gelu,
    /// ln(1 + e^x), evaluated stably
    Softplus,
    Sigmoid,
    Square,
    /// max(0, x); derivative at 0 is 0
    Relu,
    Custom { name: &'static str, f: ScalarFn },
}

impl fmt::Debug for Unary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Unary {
    pub fn name(&self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Tanh => "tanh",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Square => "square",
            Unary::Relu => "relu",
            Unary::Custom { name, .. } => name,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Square => x * x,
            Unary::Relu => x.max(0.0),
            Unary::Custom { f, .. } => f(x).0,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - x.tanh().powi(2),
            Unary::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Unary::Square => 2.0 * x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Custom { f, .. } => f(x).1,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param { offset: usize },
    Const,
    MatMul(Var, Var),
    /// a * b^T
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    LayerNorm(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    GatherPairs(Var, Vec<(usize, usize)>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param { .. } => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Unary(_, u) => u.name(),
            Op::LayerNorm(..) => "layer_norm",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::GatherPairs(..) => "gather",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    scope: usize,
}

/// A single-threaded computation trace bound to one parameter slice.
pub struct Graph<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    scopes: Vec<String>,
    scope_stack: Vec<usize>,
    first_non_finite: Option<usize>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            scopes: vec!["<root>".into()],
            scope_stack: vec![0],
            first_non_finite: None,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
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

    /// The single entry of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.data.len(), 1);
        t.data[0]
    }

    /// Label subsequently recorded nodes; used in non-finite diagnostics.
    pub fn enter_scope(&mut self, name: impl Into<String>) {
        let parent = &self.scopes[*self.scope_stack.last().unwrap()];
        let full = if self.scope_stack.len() == 1 {
            name.into()
        } else {
            format!("{parent}/{}", name.into())
        };
        self.scopes.push(full);
        self.scope_stack.push(self.scopes.len() - 1);
    }

    pub fn exit_scope(&mut self) {
        if self.scope_stack.len() > 1 {
            self.scope_stack.pop();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && value.data.iter().any(|x| !x.is_finite()) {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            scope: *self.scope_stack.last().unwrap(),
        });
        Var(idx)
    }

    /// Error describing the first node that produced a non-finite value.
    pub fn non_finite_error(&self) -> Option<Error> {
        self.first_non_finite.map(|idx| {
            let node = &self.nodes[idx];
            Error::NonFinite {
                op: node.op.name(),
                node: idx,
                scope: self.scopes[node.scope].clone(),
            }
        })
    }

    /// Parameter leaf covering `rows * cols` values starting at `offset`.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let end = offset + rows * cols;
        if end > self.params.len() {
            return Err(Error::Shape(format!(
                "parameter slice {offset}..{end} exceeds parameter vector of length {}",
                self.params.len()
            )));
        }
        let value = Tensor::new(rows, cols, self.params[offset..end].to_vec());
        Ok(self.push(value, Op::Param { offset }))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul: ({m}x{k}) * ({k2}x{n})")));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(Tensor::new(m, n, out), Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t: ({m}x{k}) * ({n}x{k2})^T")));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv[j * k..(j + 1) * k];
                out[i * n + j] = dot(ar, br);
            }
        }
        Ok(self.push(Tensor::new(m, n, out), Op::MatMulT(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, op.name())?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::new(r, c, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let ((m, n), (r, c)) = (self.shape(a), self.shape(row));
        if r != 1 || c != n {
            return Err(Error::Shape(format!("{}: ({m}x{n}) with row ({r}x{c})", op.name())));
        }
        let rv = &self.value(row).data;
        let data = self
            .value(a)
            .data
            .chunks(n)
            .flat_map(|ar| ar.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(self.push(Tensor::new(m, n, data), op))
    }

    /// Add a 1xN row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// Multiply every row of `a` elementwise by a 1xN row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x * c).collect());
        self.push(out, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|x| x + c).collect());
        self.push(out, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&x| f.eval(x)).collect());
        self.push(out, Op::Unary(a, f))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// Elementwise function with a caller-supplied derivative.
    pub fn custom(&mut self, a: Var, name: &'static str, f: ScalarFn) -> Var {
        self.unary(a, Unary::Custom { name, f })
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols;
        let mut out = Vec::with_capacity(t.data.len());
        for row in t.data.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let out = Tensor::new(t.rows, n, out);
        self.push(out, Op::LayerNorm(a))
    }

    /// Row-wise softmax of a square score matrix with entries above the
    /// diagonal masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m != n {
            return Err(Error::Shape(format!("causal_softmax on ({m}x{n})")));
        }
        let t = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data[i * n..i * n + i + 1];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * n + j] /= z;
            }
        }
        Ok(self.push(Tensor::new(m, n, out), Op::CausalSoftmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols;
        let mut out = Vec::with_capacity(t.data.len());
        for row in t.data.chunks(n) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new(t.rows, n, out);
        self.push(out, Op::LogSoftmax(a))
    }

    /// Column vector of `a[r, c]` for each `(r, c)`.
    pub fn gather(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(&(r, c)) = idx.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::Shape(format!("gather index ({r},{c}) outside ({m}x{n})")));
        }
        let t = self.value(a);
        let data: Vec<f64> = idx.iter().map(|&(r, c)| t.get(r, c)).collect();
        let out = Tensor::new(data.len(), 1, data);
        Ok(self.push(out, Op::GatherPairs(a, idx)))
    }

    /// Select rows of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("gather_rows index {r} outside {m} rows")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(rows.len(), n, data);
        Ok(self.push(out, Op::GatherRows(a, rows)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}+{len} outside {n} columns")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::new(m, len, data), Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return Err(Error::Shape(format!("slice_rows {start}+{len} outside {m} rows")));
        }
        let data = self.value(a).data[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new(len, n, data), Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Shape("concat_cols of nothing".into())),
        };
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return Err(Error::Shape("concat_cols with differing row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::new(m, total, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::Shape("concat_rows of nothing".into())),
        };
        if parts.iter().any(|&p| self.shape(p).1 != n) {
            return Err(Error::Shape("concat_rows with differing column counts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let m = data.len() / n.max(1);
        Ok(self.push(Tensor::new(m, n, data), Op::ConcatRows(parts.to_vec())))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar node; returns d(out)/d(params).
    pub fn backward(&self, out: Var) -> Result<Vec<f64>> {
        if self.value(out).data.len() != 1 {
            return Err(Error::Shape("backward requires a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        let mut pgrad = vec![0.0; self.params.len()];

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = &node.value;
            match &node.op {
                Op::Param { offset } => {
                    for (p, gi) in pgrad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *p += gi;
                    }
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = val.cols;
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    // dA = dC B^T
                    let ga = acc(&mut grads, *a, m * k);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            ga[i * k + kk] += dot(gr, &bv[kk * n..(kk + 1) * n]);
                        }
                    }
                    // dB = A^T dC
                    let gb = acc(&mut grads, *b, k * n);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik != 0.0 {
                                axpy(aik, gr, &mut gb[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = val.cols;
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    // dA = dC B
                    let ga = acc(&mut grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                axpy(gij, &bv[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                            }
                        }
                    }
                    // dB = dC^T A
                    let gb = acc(&mut grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                axpy(gij, &av[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, g.len());
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x -= y;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *x += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *x += gi * ai;
                    }
                }
                Op::AddRow(a, row) => {
                    let n = val.cols;
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gr = acc(&mut grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
                Op::MulRow(a, row) => {
                    let n = val.cols;
                    let (av, rv) = (&self.value(*a).data, &self.value(*row).data);
                    let ga = acc(&mut grads, *a, g.len());
                    for (i, (x, gi)) in ga.iter_mut().zip(&g).enumerate() {
                        *x += gi * rv[i % n];
                    }
                    let gr = acc(&mut grads, *row, n);
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % n] += gi * av[i];
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut grads, *a, g.len());
                    axpy(*c, &g, ga);
                }
                Op::Shift(a) => add_into(acc(&mut grads, *a, g.len()), &g),
                Op::Unary(a, f) => {
                    let av = &self.value(*a).data;
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), &ai) in ga.iter_mut().zip(&g).zip(av) {
                        *x += gi * f.derivative(ai);
                    }
                }
                Op::LayerNorm(a) => {
                    let n = val.cols;
                    let av = &self.value(*a).data;
                    let ga = acc(&mut grads, *a, g.len());
                    for r in 0..val.rows {
                        let xr = &av[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let yr = &val.data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = dot(gr, yr) / n as f64;
                        for j in 0..n {
                            ga[r * n + j] += inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
                Op::CausalSoftmax(a) => {
                    let n = val.cols;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..val.rows {
                        let p = &val.data[i * n..i * n + i + 1];
                        let gr = &g[i * n..i * n + i + 1];
                        let s = dot(p, gr);
                        for j in 0..=i {
                            ga[i * n + j] += p[j] * (gr[j] - s);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let n = val.cols;
                    let ga = acc(&mut grads, *a, g.len());
                    for r in 0..val.rows {
                        let yr = &val.data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
                Op::GatherPairs(a, idx) => {
                    let (m, n) = self.shape(*a);
                    let ga = acc(&mut grads, *a, m * n);
                    for (&(r, c), gi) in idx.iter().zip(&g) {
                        ga[r * n + c] += gi;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let (m, n) = self.shape(*a);
                    let ga = acc(&mut grads, *a, m * n);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.shape(*a);
                    let len = val.cols;
                    let ga = acc(&mut grads, *a, m * n);
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (m, n) = self.shape(*a);
                    let ga = acc(&mut grads, *a, m * n);
                    add_into(&mut ga[start * n..start * n + g.len()], &g);
                }
                Op::ConcatCols(parts) => {
                    let total = val.cols;
                    let mut col = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        let gp = acc(&mut grads, p, m * n);
                        for r in 0..m {
                            add_into(&mut gp[r * n..(r + 1) * n], &g[r * total + col..r * total + col + n]);
                        }
                        col += n;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.value(p).data.len();
                        add_into(acc(&mut grads, p, len), &g[at..at + len]);
                        at += len;
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).data.len();
                    let ga = acc(&mut grads, *a, len);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
        Ok(pgrad)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                axpy(aik, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
    out
}

/// Numerically stable ln(sum(exp(x))); -inf for an empty or all -inf slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the tape in reverse, propagating gradients only through nodes that
//! depend on a trainable leaf. Nodes never hold gradients themselves; leaf
//! parameters receive theirs in the [`ParamStore`].
//!
//! Negative infinity may only enter the graph through [`Tape::mask_cols`] and
//! may only be consumed by [`Tape::softmax_rows`]. Every other operation
//! rejects non-finite inputs and outputs.

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

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
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    MaskCols(Var, Vec<usize>),
    Sum(Var),
    SumAxis0(Var),
    SumAxis1(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    LayerNorm(Var, Vec<f64>),
    Bilinear(Var, Var, Vec<SampleCache>),
    CosineRows(Var, Var),
}

#[derive(Debug, Clone, Copy)]
struct SampleCache {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    finite: bool,
}

/// Operation tape for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, zeros when `v` does not influence the loss.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Rank(format!("expected rank 1 or 2, got {s:?}"))),
    }
}

/// `c (+)= op(a) · op(b)` for row-major buffers, `op` optionally transposing.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    // a is m×k (stored k×m when transposed); b is k×n (stored n×k when transposed).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements of the slices whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on shape {:?}", n.shape);
        n.value[0]
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let finite = value.iter().all(|x| x.is_finite());
        self.nodes.push(Node { shape, value, op, needs_grad, finite });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        let v = self.push_raw(shape, value, op, needs_grad);
        if !self.nodes[v.0].finite {
            self.nodes.pop();
            return Err(Error::NonFinite(name));
        }
        Ok(v)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        use Op::*;
        match op {
            Leaf | Param(_) => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | AddRow(a, b)
            | MulRow(a, b)
            | MulCol(a, b)
            | Maximum(a, b)
            | Minimum(a, b)
            | Bilinear(a, b, _)
            | CosineRows(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Abs(a)
            | Sqrt(a)
            | ClampMin(a, _)
            | SoftmaxRows(a)
            | MaskCols(a, _)
            | Sum(a)
            | SumAxis0(a)
            | SumAxis1(a)
            | Reshape(a)
            | SliceRows(a, _)
            | SliceCols(a, _)
            | GatherRows(a, _)
            | Select(a, _)
            | LayerNorm(a, _) => vec![*a],
            ConcatRows(vs) | ConcatCols(vs) => vs.clone(),
        }
    }

    fn check_finite(&self, vars: &[Var], name: &'static str) -> Result<()> {
        if vars.iter().all(|v| self.nodes[v.0].finite) {
            Ok(())
        } else {
            Err(Error::NonFinite(name))
        }
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Constant input; gradients flow into it only if `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Input that is always differentiated (gradient checks, probes).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), t.requires_grad())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite(&[a, b], "matmul")?;
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err(format!("matmul: {:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_finite(&[a], "transpose")?;
        let (m, n) = dims2(self.shape(a))?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(a), "transpose")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_finite(&[a, b], name)?;
        self.same_shape(a, b, name)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(self.shape(a).to_vec(), out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Maximum(a, b), "maximum", |x, y| if x >= y { x } else { y })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Minimum(a, b), "minimum", |x, y| if x <= y { x } else { y })
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        self.check_finite(&[a, b], name)?;
        let (m, n) = dims2(self.shape(a))?;
        if self.value(b).len() != n {
            return Err(shape_err(format!("{name}: row of width {n} vs {:?}", self.shape(b))));
        }
        Ok((m, n))
    }

    /// Adds vector `b` (length n) to every row of `a` (m×n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, b, "add_row")?;
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddRow(a, b), "add_row")
    }

    /// Multiplies every row of `a` (m×n) elementwise by vector `b` (length n).
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast(a, b, "mul_row")?;
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x * bv[i % n]).collect();
        self.push(self.shape(a).to_vec(), out, Op::MulRow(a, b), "mul_row")
    }

    /// Multiplies row i of `a` (m×n) by entry i of `b` (length m).
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite(&[a, b], "mul_col")?;
        let (m, n) = dims2(self.shape(a))?;
        if self.value(b).len() != m {
            return Err(shape_err(format!("mul_col: {m} rows vs {:?}", self.shape(b))));
        }
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x * bv[i / n]).collect();
        self.push(self.shape(a).to_vec(), out, Op::MulCol(a, b), "mul_col")
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check_finite(&[a], name)?;
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), "abs", f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sqrt(a), "sqrt", f64::sqrt)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map(a, Op::ClampMin(a, floor), "clamp_min", |x| x.max(floor))
    }

    /// Softmax along the last axis. `-inf` entries map to exactly zero.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a))?;
        let src = self.value(a);
        if src.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::NonFinite("softmax"));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateDistribution(format!("row {r} is entirely -inf")));
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() };
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), "softmax")
    }

    /// Softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::Rank(format!("softmax axis {axis} on rank {rank}")));
        }
        if axis + 1 == rank {
            self.softmax_rows(a)
        } else {
            // Only reachable for axis 0 of a matrix.
            let t = self.transpose_any(a)?;
            let s = self.softmax_rows(t)?;
            self.transpose(s)
        }
    }

    // Transpose that tolerates -inf (used only to route into softmax).
    fn transpose_any(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a))?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs_grad = self.nodes[a.0].needs_grad;
        Ok(self.push_raw(vec![n, m], out, Op::Transpose(a), needs_grad))
    }

    /// Sets the given columns of every row to `-inf`.
    pub fn mask_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        self.check_finite(&[a], "mask_cols")?;
        let (_, n) = dims2(self.shape(a))?;
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Index(format!("mask column {c} of {n}")));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            for &c in cols {
                row[c] = f64::NEG_INFINITY;
            }
        }
        let needs_grad = self.nodes[a.0].needs_grad;
        Ok(self.push_raw(self.shape(a).to_vec(), out, Op::MaskCols(a, cols.to_vec()), needs_grad))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_finite(&[a], "sum")?;
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums of an m×n matrix → length-n vector.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        self.check_finite(&[a], "sum_axis0")?;
        let (_, n) = dims2(self.shape(a))?;
        let mut out = vec![0.0; n];
        for row in self.value(a).chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        self.push(vec![n], out, Op::SumAxis0(a), "sum_axis0")
    }

    /// Row sums of an m×n matrix → length-m vector.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        self.check_finite(&[a], "sum_axis1")?;
        let (m, n) = dims2(self.shape(a))?;
        let out = self.value(a).chunks(n).map(|r| r.iter().sum()).collect();
        self.push(vec![m], out, Op::SumAxis1(a), "sum_axis1")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_finite(&[a], "reshape")?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err(format!("reshape {:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(a), "reshape")
    }

    /// Rows `start..end` along axis 0 (any rank).
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_finite(&[a], "slice_rows")?;
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[0] {
            return Err(Error::Index(format!("slice_rows {start}..{end} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let out = self.value(a)[start * inner..end * inner].to_vec();
        let mut new_shape = shape;
        new_shape[0] = end - start;
        self.push(new_shape, out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Columns `start..end` of an m×n matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_finite(&[a], "slice_cols")?;
        let (m, n) = dims2(self.shape(a))?;
        if start >= end || end > n {
            return Err(Error::Index(format!("slice_cols {start}..{end} of {n}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in self.value(a).chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let shape = if self.shape(a).len() == 1 { vec![w] } else { vec![m, w] };
        self.push(shape, out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Stacks matrices (or vectors, as single rows) with equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_finite(parts, "concat_rows")?;
        let first = parts.first().ok_or_else(|| shape_err("concat_rows of nothing"))?;
        let (_, n) = dims2(self.shape(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = dims2(self.shape(p))?;
            if c != n {
                return Err(shape_err(format!("concat_rows width {c} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_finite(parts, "concat_cols")?;
        let first = parts.first().ok_or_else(|| shape_err("concat_cols of nothing"))?;
        let (m, _) = dims2(self.shape(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.shape(p))?;
            if r != m {
                return Err(shape_err(format!("concat_cols rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check_finite(&[a], "gather_rows")?;
        let (m, n) = dims2(self.shape(a))?;
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("gather row {r} of {m}")));
        }
        let src = self.value(a);
        let out = rows.iter().flat_map(|&r| src[r * n..(r + 1) * n].iter().copied()).collect();
        self.push(vec![rows.len(), n], out, Op::GatherRows(a, rows.to_vec()), "gather_rows")
    }

    /// Picks flat entries into a vector.
    pub fn select(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        self.check_finite(&[a], "select")?;
        let src = self.value(a);
        if let Some(&i) = flat.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index(format!("select {i} of {}", src.len())));
        }
        if flat.is_empty() {
            return Err(shape_err("select of no entries"));
        }
        let out = flat.iter().map(|&i| src[i]).collect();
        self.push(vec![flat.len()], out, Op::Select(a, flat.to_vec()), "select")
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check_finite(&[a], "layer_norm")?;
        let (_, n) = dims2(self.shape(a))?;
        let mut out = Vec::with_capacity(self.value(a).len());
        let mut inv_std = Vec::new();
        for row in self.value(a).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            out.extend(row.iter().map(|x| (x - mean) * s));
        }
        self.push(self.shape(a).to_vec(), out, Op::LayerNorm(a, inv_std), "layer_norm")
    }

    /// Bilinearly samples an H×W×C map at each (x, y) row of `locs` (n×2),
    /// giving n×C. Coordinates are in grid units and clamped to the border.
    pub fn bilinear_sample(&mut self, map: Var, locs: Var) -> Result<Var> {
        self.check_finite(&[map, locs], "bilinear_sample")?;
        let (h, w, c) = match self.shape(map) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::Rank(format!("feature map must be H×W×C, got {s:?}"))),
        };
        let (n, two) = dims2(self.shape(locs))?;
        if two != 2 {
            return Err(shape_err(format!("locations must be n×2, got {:?}", self.shape(locs))));
        }
        let fm = self.value(map);
        let lv = self.value(locs);
        let mut out = vec![0.0; n * c];
        let mut cache = Vec::with_capacity(n);
        for i in 0..n {
            let (x0, x1, fx, clamped_x) = axis_corners(lv[2 * i], w);
            let (y0, y1, fy, clamped_y) = axis_corners(lv[2 * i + 1], h);
            let weights = [
                (y0, x0, (1.0 - fx) * (1.0 - fy)),
                (y0, x1, fx * (1.0 - fy)),
                (y1, x0, (1.0 - fx) * fy),
                (y1, x1, fx * fy),
            ];
            let dst = &mut out[i * c..(i + 1) * c];
            for (yy, xx, wgt) in weights {
                let src = &fm[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wgt * s);
            }
            cache.push(SampleCache { x0, x1, y0, y1, fx, fy, clamped_x, clamped_y });
        }
        let shape = if self.shape(locs).len() == 1 { vec![c] } else { vec![n, c] };
        self.push(shape, out, Op::Bilinear(map, locs, cache), "bilinear_sample")
    }

    /// Row-wise cosine similarity of two n×d matrices → length-n vector.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite(&[a, b], "cosine")?;
        self.same_shape(a, b, "cosine")?;
        let (m, n) = dims2(self.shape(a))?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let (ra, rb) = (&av[r * n..(r + 1) * n], &bv[r * n..(r + 1) * n]);
            let (na, nb) = (norm(ra), norm(rb));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::DegenerateVector(format!("zero norm in cosine row {r}")));
            }
            out.push(dot(ra, rb) / (na * nb));
        }
        self.push(vec![m], out, Op::CosineRows(a, b), "cosine")
    }

    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let c = self.cosine_rows(u, v)?;
        self.reshape(c, &[1])
    }

    /// ∂loss/∂node for every node. `loss` must hold exactly one value.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Rank(format!("backward from non-scalar of shape {:?}", ln.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.shape.clone()).collect() })
    }

    /// Accumulates ∂loss/∂p into the gradient buffer of every trainable
    /// parameter recorded on this tape whose store is in `stores`.
    pub fn backward(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            let (Op::Param(id), Some(g)) = (&node.op, g) else { continue };
            if let Some(store) = stores.iter_mut().find(|s| s.owns(*id)) {
                if store.get(*id).requires_grad() {
                    store.get_mut(*id).accumulate_grad(g);
                }
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        use Op::*;
        match &node.op {
            Leaf | Param(_) => {}
            MatMul(a, b) => {
                let (m, k) = dims2(&nodes[a.0].shape).unwrap();
                let (_, n) = dims2(&nodes[b.0].shape).unwrap();
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |buf| gemm(m, n, k, g, false, bv, true, buf, 1.0));
                acc(*b, &mut |buf| gemm(k, m, n, av, true, g, false, buf, 1.0));
            }
            Transpose(a) => {
                let (m, n) = dims2(&nodes[a.0].shape).unwrap();
                acc(*a, &mut |buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| zip3(buf, g, bv, |x, y| x * y));
                acc(*b, &mut |buf| zip3(buf, g, av, |x, y| x * y));
            }
            Div(a, b) => {
                let bv = &nodes[b.0].value;
                acc(*a, &mut |buf| zip3(buf, g, bv, |x, y| x / y));
                acc(*b, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] -= g[j] * y[j] / bv[j];
                    }
                });
            }
            AddRow(a, b) => {
                let n = nodes[b.0].value.len();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            MulRow(a, b) => {
                let n = nodes[b.0].value.len();
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        *d += g[j] * bv[j % n];
                    }
                });
                acc(*b, &mut |buf| {
                    for (j, (gx, ax)) in g.iter().zip(av).enumerate() {
                        buf[j % n] += gx * ax;
                    }
                });
            }
            MulCol(a, b) => {
                let n = nodes[a.0].value.len() / nodes[b.0].value.len();
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| {
                    for (j, d) in buf.iter_mut().enumerate() {
                        *d += g[j] * bv[j / n];
                    }
                });
                acc(*b, &mut |buf| {
                    for (j, (gx, ax)) in g.iter().zip(av).enumerate() {
                        buf[j / n] += gx * ax;
                    }
                });
            }
            Scale(a, c) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)),
            AddScalar(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |buf| zip3(buf, g, av, |gx, x| if x > 0.0 { gx } else { 0.0 }));
            }
            Sigmoid(a) => acc(*a, &mut |buf| zip3(buf, g, y, |gx, s| gx * s * (1.0 - s))),
            Exp(a) => acc(*a, &mut |buf| zip3(buf, g, y, |gx, e| gx * e)),
            Log(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |buf| zip3(buf, g, av, |gx, x| gx / x));
            }
            Abs(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |buf| zip3(buf, g, av, |gx, x| gx * sign(x)));
            }
            Sqrt(a) => acc(*a, &mut |buf| zip3(buf, g, y, |gx, s| gx * 0.5 / s)),
            ClampMin(a, floor) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |buf| zip3(buf, g, av, |gx, x| if x > *floor { gx } else { 0.0 }));
            }
            Maximum(a, b) | Minimum(a, b) => {
                let is_max = matches!(node.op, Maximum(..));
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let pick_a = |j: usize| {
                    if is_max {
                        av[j] >= bv[j]
                    } else {
                        av[j] <= bv[j]
                    }
                };
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        if pick_a(j) {
                            buf[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for j in 0..buf.len() {
                        if !pick_a(j) {
                            buf[j] += g[j];
                        }
                    }
                });
            }
            SoftmaxRows(a) => {
                let (_, n) = dims2(&node.shape).unwrap();
                acc(*a, &mut |buf| {
                    for ((d, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            d[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            MaskCols(a, cols) => {
                let (_, n) = dims2(&node.shape).unwrap();
                acc(*a, &mut |buf| {
                    for (d, gr) in buf.chunks_mut(n).zip(g.chunks(n)) {
                        add_into(d, gr);
                        for &c in cols {
                            d[c] -= gr[c];
                        }
                    }
                });
            }
            Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            SumAxis0(a) => {
                let n = g.len();
                acc(*a, &mut |buf| {
                    for row in buf.chunks_mut(n) {
                        add_into(row, g);
                    }
                });
            }
            SumAxis1(a) => {
                let n = nodes[a.0].value.len() / g.len();
                acc(*a, &mut |buf| {
                    for (row, gx) in buf.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d += gx);
                    }
                });
            }
            Reshape(a) => acc(*a, &mut |buf| add_into(buf, g)),
            SliceRows(a, start) => {
                let inner: usize = nodes[a.0].shape[1..].iter().product();
                let off = start * inner;
                acc(*a, &mut |buf| add_into(&mut buf[off..off + g.len()], g));
            }
            SliceCols(a, start) => {
                let (_, n) = dims2(&nodes[a.0].shape).unwrap();
                let (_, w) = dims2(&node.shape).unwrap();
                acc(*a, &mut |buf| {
                    for (row, gr) in buf.chunks_mut(n).zip(g.chunks(w)) {
                        add_into(&mut row[*start..*start + w], gr);
                    }
                });
            }
            ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape).unwrap();
                let mut off = 0;
                for p in parts {
                    let (_, w) = dims2(&nodes[p.0].shape).unwrap();
                    acc(*p, &mut |buf| {
                        for r in 0..m {
                            add_into(&mut buf[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            GatherRows(a, rows) => {
                let (_, n) = dims2(&nodes[a.0].shape).unwrap();
                acc(*a, &mut |buf| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut buf[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Select(a, flat) => acc(*a, &mut |buf| {
                for (k, &j) in flat.iter().enumerate() {
                    buf[j] += g[k];
                }
            }),
            LayerNorm(a, inv_std) => {
                let (_, n) = dims2(&node.shape).unwrap();
                acc(*a, &mut |buf| {
                    for (r, ((d, gr), yr)) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Bilinear(map, locs, cache) => {
                let (w, c) = (nodes[map.0].shape[1], nodes[map.0].shape[2]);
                let fm = &nodes[map.0].value;
                acc(*map, &mut |buf| {
                    for (i, s) in cache.iter().enumerate() {
                        let gi = &g[i * c..(i + 1) * c];
                        for (yy, xx, wgt) in s.weights() {
                            let at = (yy * w + xx) * c;
                            buf[at..at + c].iter_mut().zip(gi).for_each(|(d, x)| *d += wgt * x);
                        }
                    }
                });
                if wants(locs) {
                    acc(*locs, &mut |buf| {
                        for (i, s) in cache.iter().enumerate() {
                            let gi = &g[i * c..(i + 1) * c];
                            let f = |yy: usize, xx: usize| &fm[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                            let (f00, f01, f10, f11) = (f(s.y0, s.x0), f(s.y0, s.x1), f(s.y1, s.x0), f(s.y1, s.x1));
                            if !s.clamped_x {
                                let mut dx = 0.0;
                                for j in 0..c {
                                    dx += gi[j] * ((1.0 - s.fy) * (f01[j] - f00[j]) + s.fy * (f11[j] - f10[j]));
                                }
                                buf[2 * i] += dx;
                            }
                            if !s.clamped_y {
                                let mut dy = 0.0;
                                for j in 0..c {
                                    dy += gi[j] * ((1.0 - s.fx) * (f10[j] - f00[j]) + s.fx * (f11[j] - f01[j]));
                                }
                                buf[2 * i + 1] += dy;
                            }
                        }
                    });
                }
            }
            CosineRows(a, b) => {
                let (_, n) = dims2(&nodes[a.0].shape).unwrap();
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                for (this, other) in [(*a, bv), (*b, av)] {
                    let own = &nodes[this.0].value;
                    acc(this, &mut |buf| {
                        for r in 0..g.len() {
                            let (ro, rt) = (&own[r * n..(r + 1) * n], &other[r * n..(r + 1) * n]);
                            let (no, nt) = (norm(ro), norm(rt));
                            let cos = y[r];
                            for j in 0..n {
                                buf[r * n + j] += g[r] * (rt[j] / (no * nt) - cos * ro[j] / (no * no));
                            }
                        }
                    });
                }
            }
        }
    }
}

impl SampleCache {
    fn weights(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0, self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0, self.x1, fx * (1.0 - fy)),
            (self.y1, self.x0, (1.0 - fx) * fy),
            (self.y1, self.x1, fx * fy),
        ]
    }
}

/// Lower/upper grid index, fractional weight and whether clamping applied.
fn axis_corners(coord: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    let clamped = !(0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    if extent == 1 {
        return (0, 0, 0.0, clamped);
    }
    let lo = (c.floor() as usize).min(extent - 2);
    (lo, lo + 1, c - lo as f64, clamped)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d += f(x, y);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

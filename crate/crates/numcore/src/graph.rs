//! Dynamic reverse-mode tape over 2-D tensors.
//!
//! A [`Graph`] lives for one forward/backward pass. Every operation appends a
//! node holding its value and the recipe for its vector-Jacobian product, so
//! node order is already a topological order. Operations take `&self` so
//! calls can nest freely.

use std::cell::{Ref, RefCell};

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    L2NormalizeRows(Var),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

const NORM_EPS: f64 = 1e-12;

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    no_grad: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            no_grad: false,
        }
    }

    /// A graph in which parameters enter as constants; nothing is
    /// differentiable and no backward pass is possible.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        let requires_grad = !self.no_grad && self.inputs_require_grad(&op);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let nodes = self.nodes.borrow();
        let rg = |v: &Var| nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Param(_) => false,
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => rg(a) || rg(b),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(rg),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::L2NormalizeRows(a)
            | Op::GatherCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::StraightThrough(a) => rg(a),
        }
    }

    // ----- leaves -------------------------------------------------------

    /// Constant input; never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf)
    }

    /// Parameter leaf. Frozen parameters (and every parameter of an
    /// inference graph) become constants.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let value = store.value(id).clone();
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: "param" });
        }
        let requires_grad = !self.no_grad && !store.is_frozen(id);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let t = self.to_tensor(v);
        self.push("detach", t, Op::Leaf)
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
            if k != k2 {
                return Err(NumError::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
            }
            let mut out = Tensor::zeros(&[m, n]);
            gemm(m, k, n, ta.data(), false, tb.data(), false, out.data_mut(), false);
            out
        };
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
            if k != k2 {
                return Err(NumError::shape("matmul_bt", format!("[{m},{k}] x [{n},{k2}]^T")));
            }
            let mut out = Tensor::zeros(&[m, n]);
            gemm(m, k, n, ta.data(), false, tb.data(), true, out.data_mut(), false);
            out
        };
        self.push("matmul_bt", out, Op::MatMulBt(a, b))
    }

    // ----- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of `a` (bias broadcast).
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let (ta, tr) = (self.value(a), self.value(row));
            if tr.rows() != 1 || tr.cols() != ta.cols() {
                return Err(NumError::shape(
                    "add_row",
                    format!("[{},{}] + [{},{}]", ta.rows(), ta.cols(), tr.rows(), tr.cols()),
                ));
            }
            let mut out = ta.clone();
            let c = ta.cols();
            for r in 0..ta.rows() {
                for (o, &b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(tr.data()) {
                    *o += b;
                }
            }
            out
        };
        self.push("add_row", out, Op::AddRow(a, row))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let out = self.value(a).map(|x| x * k);
        self.push("scale", out, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let out = self.value(a).map(|x| x + k);
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::ln);
        self.push("log", out, Op::Log(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::of(lo), T::of(hi));
        let out = self.value(a).map(|x| x.max(l).min(h));
        self.push("clamp", out, Op::Clamp(a, lo, hi))
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let s = {
            let t = self.value(a);
            if t.is_empty() {
                return Err(NumError::shape("mean", "empty tensor"));
            }
            t.sum() / T::of(t.len() as f64)
        };
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Per-row sums, `[r, c] -> [r, 1]`.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let data = (0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect();
            Tensor::matrix(t.rows(), 1, data)?
        };
        self.push("row_sum", out, Op::RowSum(a))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let mut out = t.clone();
            for r in 0..t.rows() {
                let row = out.row_mut(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        };
        self.push("log_softmax", out, Op::LogSoftmax(a))
    }

    // ----- structure ----------------------------------------------------

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let ts: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = ts.first().map_or(0, |t| t.rows());
            if ts.iter().any(|t| t.rows() != rows) {
                return Err(NumError::shape("concat_cols", "row counts differ"));
            }
            let cols: usize = ts.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in &ts {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if start + len > t.cols() {
                return Err(NumError::shape(
                    "slice_cols",
                    format!("{start}..{} of {} columns", start + len, t.cols()),
                ));
            }
            let mut data = Vec::with_capacity(t.rows() * len);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row(r)[start..start + len]);
            }
            Tensor::matrix(t.rows(), len, data)?
        };
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let ts: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = ts.first().map_or(0, |t| t.cols());
            if ts.iter().any(|t| t.cols() != cols) {
                return Err(NumError::shape("concat_rows", "column counts differ"));
            }
            let rows: usize = ts.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in &ts {
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)?
        };
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if start + len > t.rows() {
                return Err(NumError::shape(
                    "slice_rows",
                    format!("{start}..{} of {} rows", start + len, t.rows()),
                ));
            }
            t.slice_rows(start, len)
        };
        self.push("slice_rows", out, Op::SliceRows(a, start))
    }

    /// Scales each row to unit Euclidean norm: `x / sqrt(|x|^2 + 1e-12)`.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let mut out = t.clone();
            let eps = T::of(NORM_EPS);
            for r in 0..t.rows() {
                let row = out.row_mut(r);
                let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
                row.iter_mut().for_each(|x| *x /= n);
            }
            out
        };
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows(a))
    }

    /// Picks `a[i, idx[i]]` for every row, giving `[rows, 1]`.
    pub fn gather_cols(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if idx.len() != t.rows() || idx.iter().any(|&i| i >= t.cols()) {
                return Err(NumError::shape("gather_cols", "index out of range or wrong count"));
            }
            let data = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
            Tensor::matrix(t.rows(), 1, data)?
        };
        self.push("gather_cols", out, Op::GatherCols(a, idx.to_vec()))
    }

    /// Selects rows `idx` of `a` (repeats allowed).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if idx.iter().any(|&i| i >= t.rows()) {
                return Err(NumError::shape("gather_rows", "row index out of range"));
            }
            let mut data = Vec::with_capacity(idx.len() * t.cols());
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(idx.len(), t.cols(), data)?
        };
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.to_tensor(a).reshape(vec![rows, cols])?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// `out.data[i] = a.data[perm[i]]`, viewed as `[rows, cols]`.
    pub fn permute(&self, a: Var, perm: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if perm.len() != rows * cols || perm.iter().any(|&p| p >= t.len()) {
                return Err(NumError::shape("permute", "bad permutation"));
            }
            let src = t.data();
            Tensor::matrix(rows, cols, perm.iter().map(|&p| src[p]).collect())?
        };
        self.push("permute", out, Op::Permute(a, perm.to_vec()))
    }

    /// Forward value `forward`, backward identity into `through`.
    pub fn straight_through(&self, through: Var, forward: Tensor<T>) -> Result<Var> {
        let (r, c) = self.shape(through);
        if forward.rows() != r || forward.cols() != c {
            return Err(NumError::shape("straight_through", "value shape differs from input"));
        }
        self.push("straight_through", forward, Op::StraightThrough(through))
    }

    // ----- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.no_grad {
            return Err(NumError::Contract("backward on an inference graph".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            propagate(&nodes, i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Grads { by_node: grads, params })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zeros_like_or_take<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> Tensor<T> {
    grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    i: usize,
    dy: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let val = |v: &Var| &nodes[v.0].value;
    let y = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if needs(a) {
                let acc = grads[a.0].is_some();
                let mut g = zeros_like_or_take(grads, *a, ta.shape());
                gemm(m, n, k, dy.data(), false, tb.data(), true, g.data_mut(), acc);
                grads[a.0] = Some(g);
            }
            if needs(b) {
                let acc = grads[b.0].is_some();
                let mut g = zeros_like_or_take(grads, *b, tb.shape());
                gemm(k, m, n, ta.data(), true, dy.data(), false, g.data_mut(), acc);
                grads[b.0] = Some(g);
            }
        }
        Op::MatMulBt(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            if needs(a) {
                let acc = grads[a.0].is_some();
                let mut g = zeros_like_or_take(grads, *a, ta.shape());
                gemm(m, n, k, dy.data(), false, tb.data(), false, g.data_mut(), acc);
                grads[a.0] = Some(g);
            }
            if needs(b) {
                let acc = grads[b.0].is_some();
                let mut g = zeros_like_or_take(grads, *b, tb.shape());
                gemm(n, m, k, dy.data(), true, ta.data(), false, g.data_mut(), acc);
                grads[b.0] = Some(g);
            }
        }
        Op::Add(a, b) => {
            if needs(a) {
                accumulate(grads, *a, dy.clone());
            }
            if needs(b) {
                accumulate(grads, *b, dy.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                accumulate(grads, *a, dy.clone());
            }
            if needs(b) {
                accumulate(grads, *b, dy.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if needs(a) {
                accumulate(grads, *a, dy.zip_map(val(b), |g, x| g * x));
            }
            if needs(b) {
                accumulate(grads, *b, dy.zip_map(val(a), |g, x| g * x));
            }
        }
        Op::AddRow(a, row) => {
            if needs(a) {
                accumulate(grads, *a, dy.clone());
            }
            if needs(row) {
                let c = dy.cols();
                let mut g = Tensor::zeros(&[1, c]);
                for r in 0..dy.rows() {
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
                accumulate(grads, *row, g);
            }
        }
        Op::Scale(a, c) => {
            let k = T::of(*c);
            accumulate(grads, *a, dy.map(|g| g * k));
        }
        Op::AddScalar(a) => accumulate(grads, *a, dy.clone()),
        Op::Relu(a) => {
            accumulate(grads, *a, dy.zip_map(y, |g, o| if o > T::zero() { g } else { T::zero() }))
        }
        Op::Tanh(a) => accumulate(grads, *a, dy.zip_map(y, |g, o| g * (T::one() - o * o))),
        Op::Exp(a) => accumulate(grads, *a, dy.zip_map(y, |g, o| g * o)),
        Op::Log(a) => accumulate(grads, *a, dy.zip_map(val(a), |g, x| g / x)),
        Op::Square(a) => {
            let two = T::of(2.0);
            accumulate(grads, *a, dy.zip_map(val(a), |g, x| two * g * x))
        }
        Op::Clamp(a, lo, hi) => {
            let (l, h) = (T::of(*lo), T::of(*hi));
            accumulate(
                grads,
                *a,
                dy.zip_map(val(a), |g, x| if x >= l && x <= h { g } else { T::zero() }),
            )
        }
        Op::Sum(a) => {
            let g = dy.item();
            accumulate(grads, *a, Tensor::full(val(a).shape(), g));
        }
        Op::Mean(a) => {
            let ta = val(a);
            let g = dy.item() / T::of(ta.len() as f64);
            accumulate(grads, *a, Tensor::full(ta.shape(), g));
        }
        Op::RowSum(a) => {
            let ta = val(a);
            let mut g = Tensor::zeros(ta.shape());
            for r in 0..ta.rows() {
                let d = dy.get(r, 0);
                g.row_mut(r).iter_mut().for_each(|x| *x = d);
            }
            accumulate(grads, *a, g);
        }
        Op::LogSoftmax(a) => {
            let mut g = dy.clone();
            for r in 0..y.rows() {
                let s: T = dy.row(r).iter().copied().sum();
                for (gx, &yo) in g.row_mut(r).iter_mut().zip(y.row(r)) {
                    *gx -= yo.exp() * s;
                }
            }
            accumulate(grads, *a, g);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let w = val(p).cols();
                if needs(p) {
                    let mut data = Vec::with_capacity(dy.rows() * w);
                    for r in 0..dy.rows() {
                        data.extend_from_slice(&dy.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, *p, Tensor::matrix(dy.rows(), w, data)?);
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let ta = val(a);
            let mut g = Tensor::zeros(ta.shape());
            let w = dy.cols();
            for r in 0..dy.rows() {
                g.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
            }
            accumulate(grads, *a, g);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let h = val(p).rows();
                if needs(p) {
                    accumulate(grads, *p, dy.slice_rows(offset, h));
                }
                offset += h;
            }
        }
        Op::SliceRows(a, start) => {
            let ta = val(a);
            let mut g = Tensor::zeros(ta.shape());
            let c = ta.cols();
            g.data_mut()[start * c..(start + dy.rows()) * c].copy_from_slice(dy.data());
            accumulate(grads, *a, g);
        }
        Op::L2NormalizeRows(a) => {
            let ta = val(a);
            let eps = T::of(NORM_EPS);
            let mut g = Tensor::zeros(ta.shape());
            for r in 0..ta.rows() {
                let n = (ta.row(r).iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
                let dot: T = y.row(r).iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
                for ((o, &d), &yo) in g.row_mut(r).iter_mut().zip(dy.row(r)).zip(y.row(r)) {
                    *o = (d - yo * dot) / n;
                }
            }
            accumulate(grads, *a, g);
        }
        Op::GatherCols(a, idx) => {
            let mut g = Tensor::zeros(val(a).shape());
            for (r, &c) in idx.iter().enumerate() {
                let v = g.get(r, c) + dy.get(r, 0);
                g.set(r, c, v);
            }
            accumulate(grads, *a, g);
        }
        Op::GatherRows(a, idx) => {
            let mut g = Tensor::zeros(val(a).shape());
            for (j, &src) in idx.iter().enumerate() {
                for (o, &d) in g.row_mut(src).iter_mut().zip(dy.row(j)) {
                    *o += d;
                }
            }
            accumulate(grads, *a, g);
        }
        Op::Reshape(a) => {
            let g = dy.clone().reshape(val(a).shape().to_vec())?;
            accumulate(grads, *a, g);
        }
        Op::Permute(a, perm) => {
            let mut g = Tensor::zeros(val(a).shape());
            let gd = g.data_mut();
            for (&p, &d) in perm.iter().zip(dy.data()) {
                gd[p] += d;
            }
            accumulate(grads, *a, g);
        }
        Op::StraightThrough(a) => accumulate(grads, *a, dy.clone()),
    }
    Ok(())
}

/// Result of [`Graph::backward`].
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to `v`, if `v` is differentiable
    /// and reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into `store`. A parameter used
    /// several times receives the sum.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.by_node[node] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

//! Recording tape for reverse-mode differentiation.
//!
//! Values are computed eagerly as primitives are recorded. [`Tape::backward`]
//! runs a numeric reverse sweep; [`Tape::grad`] instead records the reverse
//! sweep as new primitives, so the returned gradient is itself differentiable
//! (needed for losses on spatial SDF gradients).

use std::sync::Arc;

use super::grid::Grid2;
use super::params::{GradMap, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    /// `1 / (1 + exp(-beta x))`
    Sigmoid { beta: f64 },
    /// `log(1 + exp(beta x)) / beta`
    Softplus { beta: f64 },
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Sin,
    Cos,
    Relu,
    Recip,
    /// `max(x, lo)`
    ClampMin { lo: f64 },
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid { .. } => "sigmoid",
            Unary::Softplus { .. } => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Relu => "relu",
            Unary::Recip => "recip",
            Unary::ClampMin { .. } => "clamp_min",
        }
    }

    fn eval<T: Real>(self, x: T) -> T {
        match self {
            Unary::Sigmoid { beta } => sigmoid(T::c(beta) * x),
            Unary::Softplus { beta } => {
                let b = T::c(beta);
                softplus(b * x) / b
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Relu => x.max(T::zero()),
            Unary::Recip => x.recip(),
            Unary::ClampMin { lo } => x.max(T::c(lo)),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn deriv<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Sigmoid { beta } => T::c(beta) * y * (T::one() - y),
            Unary::Softplus { beta } => sigmoid(T::c(beta) * x),
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Square => x + x,
            Unary::Sqrt => {
                if y > T::zero() {
                    T::c(0.5) / y
                } else {
                    T::zero()
                }
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Recip => -(y * y),
            Unary::ClampMin { lo } => {
                if x > T::c(lo) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Overflow-safe logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Overflow-safe `log(1 + exp(x))`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::c(30.0) {
        x + (-x).exp()
    } else if x < T::c(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    Expand(Var),
    BroadcastCol(Var),
    BroadcastRow(Var),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    PadCols { a: Var, start: usize },
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    ExclusiveCumprod(Var),
    Bilinear { image: Arc<Grid2<T>>, u: Var, v: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(_, u) => u.name(),
            Op::SumAll(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::SumRows(_) => "sum_rows",
            Op::Expand(_) => "expand",
            Op::BroadcastCol(_) => "broadcast_col",
            Op::BroadcastRow(_) => "broadcast_row",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::PadCols { .. } => "pad_cols",
            Op::Reshape(_) => "reshape",
            Op::Gather(..) => "gather",
            Op::ExclusiveCumprod(_) => "exclusive_cumprod",
            Op::Bilinear { .. } => "bilinear",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Unary(a, _)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::SumRows(a)
            | Op::Expand(a)
            | Op::BroadcastCol(a)
            | Op::BroadcastRow(a)
            | Op::Slice { a, .. }
            | Op::PadCols { a, .. }
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::ExclusiveCumprod(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Bilinear { u, v, .. } => vec![*u, *v],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Numeric gradients from one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Ordered record of primitives. Nodes are appended in evaluation order, so
/// every node's inputs precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

macro_rules! check_shape {
    ($cond:expr, $($arg:tt)*) => {
        assert!($cond, "tape shape error: {}", format!($($arg)*))
    };
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf that gradients are tracked through (e.g. query coordinates).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Records a parameter of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Tensor::matmul(self.value(a), ta, self.value(b), tb);
        self.push(Op::MatMul { a, b, ta, tb }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_shape!(self.shape(a) == self.shape(b), "add {:?} vs {:?}", self.shape(a), self.shape(b));
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_shape!(self.shape(a) == self.shape(b), "sub {:?} vs {:?}", self.shape(a), self.shape(b));
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_shape!(self.shape(a) == self.shape(b), "mul {:?} vs {:?}", self.shape(a), self.shape(b));
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        check_shape!(self.shape(a) == self.shape(b), "div {:?} vs {:?}", self.shape(a), self.shape(b));
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), value)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let [r, c] = self.shape(a);
        check_shape!(self.shape(row) == [1, c], "add_row {:?} + {:?}", [r, c], self.shape(row));
        let mut value = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(c.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(&rv) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), value)
    }

    /// Multiplies every entry of `a` by the `1 x 1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        check_shape!(self.shape(s) == [1, 1], "mul_scalar by {:?}", self.shape(s));
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        self.push(Op::MulScalar(a, s), value)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::c(k);
        let value = self.value(a).map(|x| x * kt);
        self.push(Op::Scale(a, k), value)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let kt = T::c(k);
        let value = self.value(a).map(|x| x + kt);
        self.push(Op::Offset(a), value)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).map(|x| f.eval(x));
        self.push(Op::Unary(a, f), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid { beta: 1.0 })
    }

    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        self.unary(a, Unary::Softplus { beta })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Unary::ClampMin { lo })
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum, `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let data: Vec<T> = (0..t.rows())
            .map(|r| t.data()[r * c..(r + 1) * c].iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        let value = Tensor::new(t.rows(), 1, data);
        self.push(Op::SumCols(a), value)
    }

    /// Per-column sum, `1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = column_sums(self.value(a));
        self.push(Op::SumRows(a), value)
    }

    /// Broadcasts a `1 x 1` value to `rows x cols`.
    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        check_shape!(self.shape(a) == [1, 1], "expand from {:?}", self.shape(a));
        let value = Tensor::full(rows, cols, self.value(a).item());
        self.push(Op::Expand(a), value)
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Var {
        let [r, c] = self.shape(a);
        check_shape!(c == 1, "broadcast_col from {:?}", [r, c]);
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * cols);
        for &v in src.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        let value = Tensor::new(r, cols, data);
        self.push(Op::BroadcastCol(a), value)
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let [r, c] = self.shape(a);
        check_shape!(r == 1, "broadcast_row from {:?}", [r, c]);
        let src = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&src);
        }
        let value = Tensor::new(rows, c, data);
        self.push(Op::BroadcastRow(a), value)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                check_shape!(self.shape(p)[0] == rows, "concat row mismatch");
                self.shape(p)[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(rows, total, data);
        self.push(Op::Concat(parts.to_vec()), value)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let [r, c] = self.shape(a);
        check_shape!(start + len <= c, "slice {start}+{len} of {c} columns");
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(r, len, data);
        self.push(Op::Slice { a, start }, value)
    }

    /// Embeds `a` at columns `start..` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let [r, c] = self.shape(a);
        check_shape!(start + c <= total, "pad_cols {start}+{c} into {total}");
        let src = self.value(a);
        let mut value = Tensor::zeros(r, total);
        for i in 0..r {
            value.data_mut()[i * total + start..i * total + start + c]
                .copy_from_slice(&src.data()[i * c..(i + 1) * c]);
        }
        self.push(Op::PadCols { a, start }, value)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        self.push(Op::Reshape(a), value)
    }

    /// Selects rows of `a` (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let c = src.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            check_shape!(i < src.rows(), "gather index {i} out of {} rows", src.rows());
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(idx.len(), c, data);
        self.push(Op::Gather(a, idx), value)
    }

    /// Per row: `out[j] = prod_{k<j} a[k]`.
    pub fn exclusive_cumprod(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let c = src.cols();
        let mut value = Tensor::zeros(src.rows(), c);
        for r in 0..src.rows() {
            let mut acc = T::one();
            for j in 0..c {
                value.set(r, j, acc);
                acc *= src.at(r, j);
            }
        }
        self.push(Op::ExclusiveCumprod(a), value)
    }

    /// Bilinear lookup of `image` at continuous pixel coordinates. `u` and `v`
    /// are `n x 1`; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    /// Coordinates are clamped to the pixel-center hull.
    pub fn bilinear(&mut self, image: Arc<Grid2<T>>, u: Var, v: Var) -> Var {
        check_shape!(self.shape(u) == self.shape(v), "bilinear coordinate shapes differ");
        let uu = self.value(u);
        let vv = self.value(v);
        let data: Vec<T> = uu
            .data()
            .iter()
            .zip(vv.data())
            .map(|(&x, &y)| image.sample(x, y).0)
            .collect();
        let value = Tensor::new(uu.rows(), uu.cols(), data);
        self.push(Op::Bilinear { image, u, v }, value)
    }

    fn check_finite(&self, upto: usize) -> Result<()> {
        for (i, node) in self.nodes[..=upto].iter().enumerate() {
            if !node.value.is_finite() {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Numeric reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let [r, c] = self.shape(loss);
        if [r, c] != [1, 1] {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        self.check_finite(loss.0)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients of `loss`; parameters not reached map to zero.
    pub fn param_grads(&self, loss: Var, store: &ParamStore<T>) -> Result<GradMap<T>> {
        let grads = self.backward(loss)?;
        Ok(self.collect_param_grads(&grads, store))
    }

    pub fn collect_param_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> GradMap<T> {
        let mut out = GradMap::zeros_like(store);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = grads.grads.get(i) {
                    out.accumulate(id, g);
                }
            }
        }
        out
    }

    fn vjp(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = self.value(a);
                let bv = self.value(b);
                if needs(a) {
                    let ga = slot(grads, a, av.shape());
                    if ta {
                        ga.gemm_acc(bv, tb, g, true, T::one());
                    } else {
                        ga.gemm_acc(g, false, bv, !tb, T::one());
                    }
                }
                if needs(b) {
                    let gb = slot(grads, b, bv.shape());
                    if tb {
                        gb.gemm_acc(g, true, av, ta, T::one());
                    } else {
                        gb.gemm_acc(av, !ta, g, false, T::one());
                    }
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if needs(x) {
                        slot(grads, x, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if needs(*b) {
                    axpy(slot(grads, *b, g.shape()), g.data(), -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for ((o, &gg), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gg * y;
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.shape());
                    for ((o, &gg), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gg * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for ((o, &gg), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gg / y;
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.shape());
                    for (((o, &gg), &x), &y) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                        .zip(bv.data())
                    {
                        *o -= gg * x / (y * y);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if needs(*row) {
                    let cs = column_sums(g);
                    slot(grads, *row, cs.shape()).add_assign(&cs);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                if needs(*a) {
                    axpy(slot(grads, *a, g.shape()), g.data(), k);
                }
                if needs(*s) {
                    let dot = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    slot(grads, *s, [1, 1]).data_mut()[0] += dot;
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.shape()), g.data(), T::c(*k));
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if needs(*a) {
                    let shape = self.shape(*a);
                    axpy(slot(grads, *a, shape), g.data(), T::one());
                }
            }
            Op::Unary(a, f) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let y = &node.value;
                    let ga = slot(grads, *a, g.shape());
                    for (((o, &gg), &xi), &yi) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(x.data())
                        .zip(y.data())
                    {
                        *o += gg * f.deriv(xi, yi);
                    }
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let k = g.item();
                    let shape = self.shape(*a);
                    for o in slot(grads, *a, shape).data_mut() {
                        *o += k;
                    }
                }
            }
            Op::SumCols(a) => {
                if needs(*a) {
                    let [r, c] = self.shape(*a);
                    let ga = slot(grads, *a, [r, c]);
                    for i in 0..r {
                        let k = g.data()[i];
                        for o in &mut ga.data_mut()[i * c..(i + 1) * c] {
                            *o += k;
                        }
                    }
                }
            }
            Op::SumRows(a) => {
                if needs(*a) {
                    let [r, c] = self.shape(*a);
                    let ga = slot(grads, *a, [r, c]);
                    for chunk in ga.data_mut().chunks_mut(c.max(1)) {
                        for (o, &k) in chunk.iter_mut().zip(g.data()) {
                            *o += k;
                        }
                    }
                }
            }
            Op::Expand(a) => {
                if needs(*a) {
                    let s = g.sum();
                    slot(grads, *a, [1, 1]).data_mut()[0] += s;
                }
            }
            Op::BroadcastCol(a) => {
                if needs(*a) {
                    let [r, _] = self.shape(*a);
                    let c = g.cols();
                    let ga = slot(grads, *a, [r, 1]);
                    for i in 0..r {
                        let s = g.data()[i * c..(i + 1) * c]
                            .iter()
                            .fold(T::zero(), |acc, &v| acc + v);
                        ga.data_mut()[i] += s;
                    }
                }
            }
            Op::BroadcastRow(a) => {
                if needs(*a) {
                    let cs = column_sums(g);
                    slot(grads, *a, cs.shape()).add_assign(&cs);
                }
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let [r, w] = self.shape(p);
                    if needs(p) {
                        let gp = slot(grads, p, [r, w]);
                        for i in 0..r {
                            let src = &g.data()[i * total + start..i * total + start + w];
                            for (o, &v) in gp.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::Slice { a, start } => {
                if needs(*a) {
                    let [r, c] = self.shape(*a);
                    let w = g.cols();
                    let ga = slot(grads, *a, [r, c]);
                    for i in 0..r {
                        let dst = &mut ga.data_mut()[i * c + start..i * c + start + w];
                        for (o, &v) in dst.iter_mut().zip(&g.data()[i * w..(i + 1) * w]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::PadCols { a, start } => {
                if needs(*a) {
                    let [r, w] = self.shape(*a);
                    let total = g.cols();
                    let ga = slot(grads, *a, [r, w]);
                    for i in 0..r {
                        let src = &g.data()[i * total + start..i * total + start + w];
                        for (o, &v) in ga.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if needs(*a) {
                    let shape = self.shape(*a);
                    let c = shape[1];
                    let ga = slot(grads, *a, shape);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga.data_mut()[i * c + j] += g.data()[k * c + j];
                        }
                    }
                }
            }
            Op::ExclusiveCumprod(a) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let out = &node.value;
                    let [r, c] = x.shape();
                    let ga = slot(grads, *a, [r, c]);
                    for i in 0..r {
                        // suffix[k] = sum_{j>k} g_j prod_{k<l<j} x_l
                        let mut suffix = T::zero();
                        for k in (0..c).rev() {
                            ga.data_mut()[i * c + k] += out.at(i, k) * suffix;
                            suffix = g.at(i, k) + x.at(i, k) * suffix;
                        }
                    }
                }
            }
            Op::Bilinear { image, u, v } => {
                let (uu, vv) = (self.value(*u), self.value(*v));
                let samples: Vec<(T, T, T)> = uu
                    .data()
                    .iter()
                    .zip(vv.data())
                    .map(|(&x, &y)| image.sample(x, y))
                    .collect();
                if needs(*u) {
                    let gu = slot(grads, *u, g.shape());
                    for ((o, &gg), s) in gu.data_mut().iter_mut().zip(g.data()).zip(&samples) {
                        *o += gg * s.1;
                    }
                }
                if needs(*v) {
                    let gv = slot(grads, *v, g.shape());
                    for ((o, &gg), s) in gv.data_mut().iter_mut().zip(g.data()).zip(&samples) {
                        *o += gg * s.2;
                    }
                }
            }
        }
    }

    /// Gradient of scalar `output` with respect to each of `wrt`, recorded
    /// on the tape so it can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let [r, c] = self.shape(output);
        if [r, c] != [1, 1] {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        for &w in wrt {
            if w.0 >= self.nodes.len() || !self.nodes[w.0].requires_grad {
                return Err(Error::NotRecorded(w.0));
            }
        }
        let Some(lo) = wrt.iter().map(|w| w.0).min() else {
            return Ok(Vec::new());
        };
        let end = output.0;
        // Nodes between `wrt` and `output` that depend on some `wrt`.
        let mut on_path = vec![false; end + 1];
        for &w in wrt {
            if w.0 <= end {
                on_path[w.0] = true;
            }
        }
        for i in lo..=end {
            if !on_path[i] {
                on_path[i] = self.nodes[i].op.inputs().iter().any(|v| v.0 >= lo && on_path[v.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; end + 1];
        if on_path[end] {
            adj[end] = Some(self.scalar(T::one()));
        }
        for i in (lo..=end).rev() {
            if !on_path[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            if wrt.iter().any(|w| w.0 == i) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.symbolic_vjp(Var(i), &op, g, &on_path)?;
            for (input, contrib) in contributions {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let [r, c] = self.shape(w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn symbolic_vjp(
        &mut self,
        out: Var,
        op: &Op<T>,
        g: Var,
        on_path: &[bool],
    ) -> Result<Vec<(Var, Var)>> {
        let wants = |v: Var| v.0 < on_path.len() && on_path[v.0];
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if wants(a) {
                    let ga = if ta {
                        self.matmul_t(b, tb, g, true)
                    } else {
                        self.matmul_t(g, false, b, !tb)
                    };
                    res.push((a, ga));
                }
                if wants(b) {
                    let gb = if tb {
                        self.matmul_t(g, true, a, ta)
                    } else {
                        self.matmul_t(a, !ta, g, false)
                    };
                    res.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if wants(x) {
                        res.push((x, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    res.push((*a, g));
                }
                if wants(*b) {
                    let n = self.neg(g);
                    res.push((*b, n));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga = self.mul(g, *b);
                    res.push((*a, ga));
                }
                if wants(*b) {
                    let gb = self.mul(g, *a);
                    res.push((*b, gb));
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    let ga = self.div(g, *b);
                    res.push((*a, ga));
                }
                if wants(*b) {
                    let q = self.div(out, *b);
                    let t = self.mul(g, q);
                    let gb = self.neg(t);
                    res.push((*b, gb));
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    res.push((*a, g));
                }
                if wants(*row) {
                    let s = self.sum_rows(g);
                    res.push((*row, s));
                }
            }
            Op::MulScalar(a, s) => {
                if wants(*a) {
                    let ga = self.mul_scalar(g, *s);
                    res.push((*a, ga));
                }
                if wants(*s) {
                    let p = self.mul(g, *a);
                    let gs = self.sum(p);
                    res.push((*s, gs));
                }
            }
            Op::Scale(a, k) => {
                if wants(*a) {
                    let ga = self.scale(g, *k);
                    res.push((*a, ga));
                }
            }
            Op::Offset(a) => {
                if wants(*a) {
                    res.push((*a, g));
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let [r, c] = self.shape(*a);
                    let ga = self.reshape(g, r, c);
                    res.push((*a, ga));
                }
            }
            Op::Unary(a, f) => {
                if wants(*a) {
                    let a = *a;
                    let d = match f {
                        Unary::Sigmoid { beta } => {
                            let one_minus = {
                                let n = self.neg(out);
                                self.offset(n, 1.0)
                            };
                            let p = self.mul(out, one_minus);
                            self.scale(p, *beta)
                        }
                        Unary::Softplus { beta } => self.unary(a, Unary::Sigmoid { beta: *beta }),
                        Unary::Exp => out,
                        Unary::Log => self.recip(a),
                        Unary::Square => self.scale(a, 2.0),
                        Unary::Sqrt => {
                            let r = self.recip(out);
                            self.scale(r, 0.5)
                        }
                        Unary::Sin => self.cos(a),
                        Unary::Cos => {
                            let s = self.sin(a);
                            self.neg(s)
                        }
                        Unary::Recip => {
                            let sq = self.square(out);
                            self.neg(sq)
                        }
                        Unary::Abs | Unary::Relu | Unary::ClampMin { .. } => {
                            // Piecewise-constant derivative; zero curvature.
                            let x = self.value(a);
                            let y = &self.nodes[out.0].value;
                            let mask = x.zip_map(y, |xi, yi| f.deriv(xi, yi));
                            self.constant(mask)
                        }
                    };
                    let ga = self.mul(g, d);
                    res.push((a, ga));
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let [r, c] = self.shape(*a);
                    let ga = self.expand(g, r, c);
                    res.push((*a, ga));
                }
            }
            Op::SumCols(a) => {
                if wants(*a) {
                    let [_, c] = self.shape(*a);
                    let ga = self.broadcast_col(g, c);
                    res.push((*a, ga));
                }
            }
            Op::SumRows(a) => {
                if wants(*a) {
                    let [r, _] = self.shape(*a);
                    let ga = self.broadcast_row(g, r);
                    res.push((*a, ga));
                }
            }
            Op::Expand(a) => {
                if wants(*a) {
                    let s = self.sum(g);
                    res.push((*a, s));
                }
            }
            Op::BroadcastCol(a) => {
                if wants(*a) {
                    let s = self.sum_cols(g);
                    res.push((*a, s));
                }
            }
            Op::BroadcastRow(a) => {
                if wants(*a) {
                    let s = self.sum_rows(g);
                    res.push((*a, s));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if wants(p) {
                        let gp = self.slice(g, start, w);
                        res.push((p, gp));
                    }
                    start += w;
                }
            }
            Op::Slice { a, start } => {
                if wants(*a) {
                    let total = self.shape(*a)[1];
                    let ga = self.pad_cols(g, *start, total);
                    res.push((*a, ga));
                }
            }
            Op::PadCols { a, start } => {
                if wants(*a) {
                    let w = self.shape(*a)[1];
                    let ga = self.slice(g, *start, w);
                    res.push((*a, ga));
                }
            }
            other @ (Op::Gather(..) | Op::ExclusiveCumprod(_) | Op::Bilinear { .. }) => {
                return Err(Error::NotTwiceDifferentiable(other.name()));
            }
        }
        Ok(res)
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: [usize; 2]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
}

fn axpy<T: Real>(dst: &mut Tensor<T>, src: &[T], k: T) {
    for (o, &v) in dst.data_mut().iter_mut().zip(src) {
        *o += k * v;
    }
}

fn column_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut out = vec![T::zero(); c];
    for chunk in t.data().chunks(c.max(1)) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(1, c, out)
}

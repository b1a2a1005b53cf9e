//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a `1 × 1` result walks the record in reverse and
//! returns the gradient of that scalar with respect to every node.
//!
//! All values are 2-D; vectors are `1 × n` rows or `n × 1` columns and
//! scalars are `1 × 1`. Ops with non-trivial math of their own (soft-DTW,
//! straight-through sampling) plug in through [`CustomOp`].

use std::cell::RefCell;
use std::fmt;
use std::ops;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Backward rule for an op defined outside this module.
pub trait CustomOp {
    /// Returns one gradient per parent, in the order the parents were given
    /// to [`Tape::custom`]. `None` means no gradient flows to that parent.
    fn backward(&self, parents: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulConst(usize, Mat),
    PowF(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    RowSum(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    SoftmaxRows(usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Operation record. Cheap to create; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when nothing flowed to it.
    pub fn wrt(&self, v: Var<'_>) -> Mat {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Mat::zeros(v.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A constant input; identical to a leaf, the distinction is only for
    /// readability at call sites.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Mat::from_elem((1, 1), x))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom<'t>(&'t self, parents: &[Var<'t>], value: Mat, op: Box<dyn CustomOp>) -> Var<'t> {
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, Op::Custom(ids, op))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Gradient of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.dim(),
            (1, 1),
            "backward needs a scalar"
        );
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Mat::ones((1, 1)));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    acc(&mut grads, *a, &g / bv);
                    let gb = -(&g * &node.value) / bv;
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulCol(a, c) => {
                    acc(&mut grads, *a, &g * val(*c));
                    let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *c, gc);
                }
                Op::DivCol(a, c) => {
                    let cv = val(*c);
                    acc(&mut grads, *a, &g / cv);
                    let gc = -(&g * &node.value).sum_axis(Axis(1)).insert_axis(Axis(1)) / cv;
                    acc(&mut grads, *c, gc);
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::PowF(a, p) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| g * p * x.powf(p - 1.0));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => acc(&mut grads, *a, &g / val(*a)),
                Op::Sqrt(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g / (2.0 * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| {
                        if x > *lo && x < *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(val(*a).dim(), gv));
                }
                Op::RowSum(a) => {
                    let cols = val(*a).ncols();
                    let ga = Mat::from_shape_fn((g.nrows(), cols), |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, y * &(&g - &dot));
                }
                Op::Custom(parents, op) => {
                    let pv: Vec<&Mat> = parents.iter().map(|&p| val(p)).collect();
                    let gs = op.backward(&pv, &node.value, &g);
                    debug_assert_eq!(gs.len(), parents.len());
                    for (&p, gp) in parents.iter().zip(gs) {
                        if let Some(gp) = gp {
                            acc(&mut grads, p, gp);
                        }
                    }
                }
            }
        }
        Grads { grads }
    }
}

fn acc(grads: &mut [Option<Mat>], id: usize, g: Mat) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Mat {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    fn unary(self, f: impl Fn(&Mat) -> Mat, op: Op) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(value, op)
    }

    fn binary(self, other: Var<'t>, f: impl Fn(&Mat, &Mat) -> Mat, op: Op) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        self.tape.push(value, op)
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        self.unary(|m| m.mapv(&f), op)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.dot(b), Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.dot(&b.t()), Op::MatMulT(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(|a| a.t().to_owned(), Op::Transpose(self.id))
    }

    /// Adds a `1 × m` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |a, r| {
                assert_eq!(r.nrows(), 1, "add_row expects a single row");
                a + r
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Multiplies row `i` by `col[i]` (`col` is `n × 1`).
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self.binary(col, |a, c| a * c, Op::MulCol(self.id, col.id))
    }

    /// Divides row `i` by `col[i]` (`col` is `n × 1`).
    pub fn div_col(self, col: Var<'t>) -> Var<'t> {
        self.binary(col, |a, c| a / c, Op::DivCol(self.id, col.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.map(|x| x * k, Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.map(|x| x + k, Op::AddScalar(self.id))
    }

    pub fn mul_const(self, c: Mat) -> Var<'t> {
        let value = &self.tape.nodes.borrow()[self.id].value * &c;
        self.tape.push(value, Op::MulConst(self.id, c))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.map(|x| x.powf(p), Op::PowF(self.id, p))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(softplus, Op::Softplus(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.map(f64::ln, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map(|x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(|a| Mat::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// `n × 1` column of row sums.
    pub fn row_sum(self) -> Var<'t> {
        self.unary(
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::RowSum(self.id),
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        self.unary(
            |a| a.slice(s![.., start..end]).to_owned(),
            Op::SliceCols(self.id, start),
        )
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        self.unary(
            |a| a.slice(s![start..end, ..]).to_owned(),
            Op::SliceRows(self.id, start),
        )
    }

    /// Row `r` of the output is row `idx[r]` of `self`.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.id].value.select(Axis(0), idx);
        self.tape.push(value, Op::GatherRows(self.id, idx.to_vec()))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.unary(softmax_rows, Op::SoftmaxRows(self.id))
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "add: shape mismatch");
                a + b
            },
            Op::Add(self.id, rhs.id),
        )
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "sub: shape mismatch");
                a - b
            },
            Op::Sub(self.id, rhs.id),
        )
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "mul: shape mismatch");
                a * b
            },
            Op::Mul(self.id, rhs.id),
        )
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "div: shape mismatch");
                a / b
            },
            Op::Div(self.id, rhs.id),
        )
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff(x: &Mat, step: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe);
        probe[idx] = orig - step;
        let down = f(&probe);
        probe[idx] = orig;
        g[idx] = (up - down) / (2.0 * step);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a
        .mapv(|x| x * x)
        .sum()
        .sqrt()
        .max(b.mapv(|x| x * x).sum().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn check(x: Mat, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = f(v);
        let g = tape.backward(loss).wrt(v);
        let fd = finite_diff(&x, 1e-6, |p| {
            let t = Tape::new();
            f(t.leaf(p.clone())).item()
        });
        let err = relative_error(&g, &fd);
        assert!(err < 1e-6, "relative error {err}\n{g}\n{fd}");
    }

    #[test]
    fn elementwise_grads() {
        let x = array![[0.3, -0.7, 1.2], [0.5, 0.9, -0.4]];
        check(x.clone(), |v| v.tanh().sum());
        check(x.clone(), |v| v.sigmoid().square().sum());
        check(x.clone(), |v| v.softplus().ln().sum());
        check(x.clone(), |v| v.exp().mean());
        check(x.mapv(f64::abs), |v| v.sqrt().sum());
        check(x.mapv(f64::abs), |v| v.powf(-1.5).sum());
        check(x.clone(), |v| (v * v.tanh() / v.exp()).sum());
    }

    #[test]
    fn matrix_grads() {
        let x = array![[0.3, -0.7, 1.2], [0.5, 0.9, -0.4]];
        let w = array![[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]];
        check(x.clone(), |v| {
            let w = v.tape().constant(w.clone());
            v.matmul(w).tanh().sum()
        });
        check(x.clone(), |v| v.matmul_t(v).sum());
        check(x.clone(), |v| v.t().matmul(v).square().sum());
        check(x.clone(), |v| {
            let r = v.slice_rows(0, 1);
            v.add_row(r).square().sum()
        });
        check(x.clone(), |v| {
            let c = v.slice_cols(1, 2).exp();
            (v.mul_col(c) + v.div_col(c)).sum()
        });
        check(x.clone(), |v| v.softmax_rows().ln().slice_cols(0, 1).sum());
        check(x.clone(), |v| {
            let t = v.tape();
            let g = v.gather_rows(&[1, 1, 0]);
            t.concat_rows(&[g, v]).row_sum().square().sum()
        });
        check(x, |v| {
            let t = v.tape();
            t.concat_cols(&[v, v.scale(2.0)]).tanh().sum()
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let tape = Tape::new();
        let v = tape.leaf(array![[-5.0, 0.5, 5.0]]);
        let g = tape.backward(v.clamp(-1.0, 1.0).sum()).wrt(v);
        assert_eq!(g, array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(array![[1.0]]);
        let b = tape.leaf(array![[2.0]]);
        let grads = tape.backward(a.square());
        assert!(grads.get(b).is_none());
        assert_eq!(grads.wrt(a)[[0, 0]], 2.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}

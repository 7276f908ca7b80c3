use std::collections::BTreeMap;

use super::linalg;
use super::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};
use super::{Tensor, TensorError};

/// Gradient of a scalar loss with respect to every named parameter on the graph.
pub type GradientMap = BTreeMap<String, Tensor>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Softplus(Var),
    Lgamma(Var),
    Digamma(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Diag(Var),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Cholesky(Var),
    TriSolve(Var, Var),
    AssembleTril(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Param => vec![],
            Neg(a) | Exp(a) | Log(a) | Tanh(a) | Relu(a) | Square(a) | Abs(a) | Softplus(a)
            | Lgamma(a) | Digamma(a) | Scale(a, _) | AddScalar(a) | Clamp(a, _, _)
            | Transpose(a) | Reshape(a) | SumAll(a) | SumRows(a) | SumCols(a)
            | SoftmaxRows(a) | LogSoftmaxRows(a) | Diag(a) | Row(a, _) | Cholesky(a) => vec![*a],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | TriSolve(a, b)
            | AssembleTril(a, b) => vec![*a, *b],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation record for reverse-mode differentiation.
///
/// All node values are matrices (`rows × cols`); scalars are `1×1`.
/// Elementwise binary primitives broadcast a `1×c`, `r×1` or `1×1` operand
/// against an `r×c` one.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    if t.shape().len() == 2 {
        t
    } else {
        Tensor::matrix(r, c, t.into_data())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize), TensorError> {
    let (ra, ca) = dims(a);
    let (rb, cb) = dims(b);
    let r = if ra == rb || rb == 1 {
        ra
    } else if ra == 1 {
        rb
    } else {
        usize::MAX
    };
    let c = if ca == cb || cb == 1 {
        ca
    } else if ca == 1 {
        cb
    } else {
        usize::MAX
    };
    if r == usize::MAX || c == usize::MAX {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((r, c))
}

#[inline]
fn bidx(t: &Tensor, i: usize, j: usize) -> usize {
    let (r, c) = dims(t);
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if dims(a) == (r, c) && dims(b) == (r, c) {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::matrix(r, c, data);
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(ad[bidx(a, i, j)], bd[bidx(b, i, j)]));
        }
    }
    Tensor::matrix(r, c, out)
}

/// Sums an `r×c` gradient down to the (possibly broadcast) shape of `target`.
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    let (tr, tc) = dims(target);
    let (r, c) = dims(&g);
    if (tr, tc) == (r, c) {
        return g;
    }
    let mut out = vec![0.0; tr * tc];
    let gd = g.data();
    for i in 0..r {
        for j in 0..c {
            out[bidx(target, i, j)] += gd[i * c + j];
        }
    }
    Tensor::matrix(tr, tc, out)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

fn tril_index(i: usize, j: usize) -> usize {
    i * (i - 1) / 2 + j
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: as_matrix(t),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let name = name.into();
        assert!(
            self.params.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.nodes.push(Node {
            value: as_matrix(t),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name, v));
        v
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let value = self.value(x).map(f);
        self.push(name, value, op)
    }

    fn check_domain(&self, name: &'static str, x: Var) -> Result<(), TensorError> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(TensorError::Domain {
                op: name,
                detail: format!("argument must be > 0, got {bad}"),
            });
        }
        Ok(())
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_domain("log", x)?;
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// `ln Γ(x)`, derivative `ψ(x)`.
    pub fn lgamma(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_domain("lgamma", x)?;
        self.unary("lgamma", x, lgamma_unchecked, Op::Lgamma(x))
    }

    /// `ψ(x)`, derivative `ψ'(x)`.
    pub fn digamma(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check_domain("digamma", x)?;
        self.unary("digamma", x, digamma_unchecked, Op::Digamma(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_dims(name, ta, tb)?;
        let value = zip_broadcast(ta, tb, r, c, f);
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = ta.matmul(tb)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).transpose();
        self.push("transpose", value, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(&[rows, cols])?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Sum of all entries as a `1×1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::SumAll(x)).expect("sum of finite values")
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        self.push("sum_rows", Tensor::matrix(1, c, out), Op::SumRows(x))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let r = t.rows();
        let out = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        self.push("sum_cols", Tensor::matrix(r, 1, out), Op::SumCols(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - m).exp()));
            let s: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= s);
        }
        self.push("softmax_rows", Tensor::matrix(r, c, out), Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push("log_softmax_rows", Tensor::matrix(r, c, out), Op::LogSoftmaxRows(x))
    }

    /// Diagonal of a square matrix as `1×d`.
    pub fn diag(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "diag",
                lhs: vec![r, c],
                rhs: vec![c, c],
            });
        }
        let out = (0..r).map(|i| t.get(i, i)).collect();
        self.push("diag", Tensor::matrix(1, r, out), Op::Diag(x))
    }

    /// Row `k` as `1×c`.
    pub fn row(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if k >= t.rows() {
            return Err(TensorError::Domain {
                op: "row",
                detail: format!("row {k} out of range for {} rows", t.rows()),
            });
        }
        let out = t.row_slice(k).to_vec();
        self.push("row", Tensor::row(out), Op::Row(x, k))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        self.push("concat_cols", Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![c],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        self.push("concat_rows", Tensor::matrix(rows, c, out), Op::ConcatRows(parts.to_vec()))
    }

    /// Lower Cholesky factor of a symmetric matrix; only the lower triangle
    /// of the argument is read.
    pub fn cholesky(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "cholesky",
                lhs: vec![r, c],
                rhs: vec![c, c],
            });
        }
        let l = linalg::cholesky(t.data(), r)?;
        self.push("cholesky", Tensor::matrix(r, r, l), Op::Cholesky(x))
    }

    /// `L⁻¹ B` for lower-triangular `L` by forward substitution.
    pub fn tri_solve(&mut self, l: Var, b: Var) -> Result<Var, TensorError> {
        let (tl, tb) = (self.value(l), self.value(b));
        let d = tl.rows();
        if tl.cols() != d || tb.rows() != d {
            return Err(TensorError::ShapeMismatch {
                op: "tri_solve",
                lhs: tl.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        if (0..d).any(|i| tl.get(i, i) == 0.0) {
            return Err(TensorError::Domain {
                op: "tri_solve",
                detail: "singular triangular factor".into(),
            });
        }
        let n = tb.cols();
        let mut y = tb.data().to_vec();
        linalg::solve_lower_in_place(tl.data(), d, &mut y, n);
        self.push("tri_solve", Tensor::matrix(d, n, y), Op::TriSolve(l, b))
    }

    /// Lower-triangular `d×d` matrix from a `1×d(d-1)/2` strict-lower row
    /// (row-major order) and a `1×d` row of log-diagonal entries.
    pub fn assemble_tril(&mut self, strict: Var, log_diag: Var) -> Result<Var, TensorError> {
        let (ts, td) = (self.value(strict), self.value(log_diag));
        let d = td.len();
        if ts.len() != d * d.saturating_sub(1) / 2 {
            return Err(TensorError::ShapeMismatch {
                op: "assemble_tril",
                lhs: ts.shape().to_vec(),
                rhs: td.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                out[i * d + j] = ts.data()[tril_index(i, j)];
            }
            out[i * d + i] = td.data()[i].exp();
        }
        self.push("assemble_tril", Tensor::matrix(d, d, out), Op::AssembleTril(strict, log_diag))
    }

    /// Value of a scalar loss and its gradient with respect to every parameter.
    /// Parameters that do not influence the loss receive zero gradients.
    pub fn evaluate_and_grad(&self, loss: Var) -> Result<(f64, GradientMap), TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let grads = self.backward(loss);
        let mut map = GradientMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            map.insert(name.clone(), g);
        }
        Ok((lt.item(), map))
    }

    fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        grads
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        use Op::*;
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            Tensor::matrix(
                x.rows(),
                x.cols(),
                x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect(),
            )
        };
        match &node.op {
            Constant | Param => {}
            Neg(x) => accumulate(grads, *x, g.map(|v| -v)),
            Exp(x) => {
                let gx = elementwise(out, &|y, gv| y * gv);
                accumulate(grads, *x, gx)
            }
            Log(x) => {
                let gx = elementwise(val(x), &|a, gv| gv / a);
                accumulate(grads, *x, gx)
            }
            Tanh(x) => {
                let gx = elementwise(out, &|y, gv| gv * (1.0 - y * y));
                accumulate(grads, *x, gx)
            }
            Relu(x) => {
                let gx = elementwise(val(x), &|a, gv| if a > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, gx)
            }
            Square(x) => {
                let gx = elementwise(val(x), &|a, gv| 2.0 * a * gv);
                accumulate(grads, *x, gx)
            }
            Abs(x) => {
                let gx = elementwise(val(x), &|a, gv| {
                    if a > 0.0 {
                        gv
                    } else if a < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, gx)
            }
            Softplus(x) => {
                let gx = elementwise(val(x), &|a, gv| gv * sigmoid(a));
                accumulate(grads, *x, gx)
            }
            Lgamma(x) => {
                let gx = elementwise(val(x), &|a, gv| gv * digamma_unchecked(a));
                accumulate(grads, *x, gx)
            }
            Digamma(x) => {
                let gx = elementwise(val(x), &|a, gv| gv * trigamma_unchecked(a));
                accumulate(grads, *x, gx)
            }
            Scale(x, c) => accumulate(grads, *x, g.map(|v| v * c)),
            AddScalar(x) => accumulate(grads, *x, g),
            Clamp(x, lo, hi) => {
                let gx = elementwise(val(x), &|a, gv| if a > *lo && a < *hi { gv } else { 0.0 });
                accumulate(grads, *x, gx)
            }
            Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, reduce_to(g.clone(), val(a)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, reduce_to(g, val(b)));
                }
            }
            Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, reduce_to(g.clone(), val(a)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, reduce_to(g.map(|v| -v), val(b)));
                }
            }
            Mul(a, b) => {
                let (r, c) = dims(&g);
                if self.needs(*a) {
                    let ga = zip_broadcast(&g, val(b), r, c, |gv, y| gv * y);
                    accumulate(grads, *a, reduce_to(ga, val(a)));
                }
                if self.needs(*b) {
                    let gb = zip_broadcast(&g, val(a), r, c, |gv, x| gv * x);
                    accumulate(grads, *b, reduce_to(gb, val(b)));
                }
            }
            Div(a, b) => {
                let (r, c) = dims(&g);
                if self.needs(*a) {
                    let ga = zip_broadcast(&g, val(b), r, c, |gv, y| gv / y);
                    accumulate(grads, *a, reduce_to(ga, val(a)));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_broadcast(&g, out, r, c, |gv, o| gv * o);
                    let gb = zip_broadcast(&q, val(b), r, c, |qv, y| -qv / y);
                    accumulate(grads, *b, reduce_to(gb, val(b)));
                }
            }
            MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    // g (m×n) · bᵀ (n×k)
                    let mut ga = vec![0.0; m * k];
                    linalg::gemm(g.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut ga, m, n, k);
                    accumulate(grads, *a, Tensor::matrix(m, k, ga));
                }
                if self.needs(*b) {
                    // aᵀ (k×m) · g (m×n)
                    let mut gb = vec![0.0; k * n];
                    linalg::gemm(ta.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, k, m, n);
                    accumulate(grads, *b, Tensor::matrix(k, n, gb));
                }
            }
            Transpose(x) => accumulate(grads, *x, g.transpose()),
            Reshape(x) => {
                let (r, c) = dims(val(x));
                accumulate(grads, *x, Tensor::matrix(r, c, g.into_data()))
            }
            SumAll(x) => {
                let s = g.item();
                accumulate(grads, *x, Tensor::filled(val(x).shape(), s))
            }
            SumRows(x) => {
                let (r, c) = dims(val(x));
                let mut gx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    gx.extend_from_slice(g.data());
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx))
            }
            SumCols(x) => {
                let (r, c) = dims(val(x));
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    gx.extend(std::iter::repeat_n(g.data()[i], c));
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx))
            }
            SoftmaxRows(x) => {
                let (r, c) = dims(out);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = y[j] * (gi[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx))
            }
            LogSoftmaxRows(x) => {
                let (r, c) = dims(out);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let total: f64 = gi.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] = gi[j] - y[j].exp() * total;
                    }
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx))
            }
            Diag(x) => {
                let d = val(x).rows();
                let mut gx = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    gx.set(i, i, g.data()[i]);
                }
                accumulate(grads, *x, gx)
            }
            Row(x, k) => {
                let (r, c) = dims(val(x));
                let mut gx = Tensor::zeros(&[r, c]);
                gx.data_mut()[k * c..(k + 1) * c].copy_from_slice(g.data());
                accumulate(grads, *x, gx)
            }
            ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        accumulate(grads, *p, Tensor::matrix(r, c, gp));
                    }
                    offset += c;
                }
            }
            ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let n = val(p).len();
                    if self.needs(*p) {
                        let gp = g.data()[offset..offset + n].to_vec();
                        accumulate(grads, *p, Tensor::matrix(n / c.max(1), c, gp));
                    }
                    offset += n;
                }
            }
            Cholesky(x) => {
                let d = out.rows();
                let l = out.data();
                // P = Φ(Lᵀ Ḡ): lower triangle with halved diagonal
                let mut lbar = g.into_data();
                for i in 0..d {
                    for j in (i + 1)..d {
                        lbar[i * d + j] = 0.0;
                    }
                }
                let mut p = vec![0.0; d * d];
                linalg::gemm(l, (1, d as isize), &lbar, (d as isize, 1), &mut p, d, d, d);
                for i in 0..d {
                    for j in (i + 1)..d {
                        p[i * d + j] = 0.0;
                    }
                    p[i * d + i] *= 0.5;
                }
                // S = L⁻ᵀ P L⁻¹ computed as two transposed-factor solves
                linalg::solve_lower_transpose_in_place(l, d, &mut p, d);
                let mut pt = Tensor::matrix(d, d, p).transpose().into_data();
                linalg::solve_lower_transpose_in_place(l, d, &mut pt, d);
                let s = Tensor::matrix(d, d, pt).transpose();
                let mut gx = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    for j in 0..i {
                        gx.set(i, j, s.get(i, j) + s.get(j, i));
                    }
                    gx.set(i, i, s.get(i, i));
                }
                accumulate(grads, *x, gx)
            }
            TriSolve(lv, bv) => {
                let tl = val(lv);
                let d = tl.rows();
                let n = out.cols();
                let mut gb = g.into_data();
                linalg::solve_lower_transpose_in_place(tl.data(), d, &mut gb, n);
                if self.needs(*lv) {
                    let mut gl = vec![0.0; d * d];
                    linalg::gemm(&gb, (n as isize, 1), out.data(), (1, n as isize), &mut gl, d, n, d);
                    for i in 0..d {
                        for j in 0..d {
                            gl[i * d + j] = if j <= i { -gl[i * d + j] } else { 0.0 };
                        }
                    }
                    accumulate(grads, *lv, Tensor::matrix(d, d, gl));
                }
                if self.needs(*bv) {
                    accumulate(grads, *bv, Tensor::matrix(d, n, gb));
                }
            }
            AssembleTril(strict, log_diag) => {
                let d = out.rows();
                if self.needs(*strict) {
                    let m = val(strict).len();
                    let mut gs = vec![0.0; m];
                    for i in 0..d {
                        for j in 0..i {
                            gs[tril_index(i, j)] = g.get(i, j);
                        }
                    }
                    let (r, c) = dims(val(strict));
                    accumulate(grads, *strict, Tensor::matrix(r, c, gs));
                }
                if self.needs(*log_diag) {
                    let gd = (0..d).map(|i| g.get(i, i) * out.get(i, i)).collect();
                    let (r, c) = dims(val(log_diag));
                    accumulate(grads, *log_diag, Tensor::matrix(r, c, gd));
                }
            }
        }
    }
}

//! Tape-based reverse-mode differentiation over rank-2 arrays.
//!
//! A [`Tape`] is built fresh for every evaluation. Nodes are appended in
//! creation order, so parents always precede children and a single reverse
//! sweep visits the graph in topological order.

use std::sync::Arc;

use super::array::{gemm, Array};
use super::linalg;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Axis selector for reductions, concatenation and slicing.
///
/// `Rows` acts along axis 0 (e.g. summing over rows yields `[1, cols]`),
/// `Cols` along axis 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf { trainable: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Offset(f64),
    MatMul,
    Transpose,
    Tanh,
    LeakyRelu(f64),
    Exp,
    Log,
    Square,
    Sqrt,
    Sum,
    Mean,
    SumAxis(Axis),
    MeanAxis(Axis),
    Concat(Axis),
    Slice { axis: Axis, start: usize, len: usize },
    GatherCols(Arc<[usize]>),
    Reshape,
    Cholesky,
    SolveTriangular { upper: bool },
    Diag,
    LogSumExp(Axis),
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scalar-mul",
            Op::Offset(_) => "offset",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Tanh => "tanh",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum-axis",
            Op::MeanAxis(_) => "mean-axis",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "split",
            Op::GatherCols(_) => "gather-cols",
            Op::Reshape => "reshape",
            Op::Cholesky => "cholesky",
            Op::SolveTriangular { .. } => "solve-triangular",
            Op::Diag => "diag",
            Op::LogSumExp(_) => "logsumexp",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<Var>,
    pub value: Array,
    needs_grad: bool,
}

/// Gradients of a root with respect to every trainable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Array) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(like.shape()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Array)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, a: &Array) -> Result<()> {
    if a.is_matrix() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        })
    }
}

fn broadcast_shape(op: &'static str, a: &Array, b: &Array) -> Result<(usize, usize)> {
    require_matrix(op, a)?;
    require_matrix(op, b)?;
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(shape_err(op, a, b)),
    }
}

/// Apply `f` element-wise with size-1 dimensions broadcast.
fn broadcast_zip(a: &Array, b: &Array, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Array {
    let (ar, ac) = (a.rows() > 1, a.cols() > 1);
    let (br, bc) = (b.rows() > 1, b.cols() > 1);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar { i * a.cols() } else { 0 };
        let ib = if br { i * b.cols() } else { 0 };
        for j in 0..c {
            let x = ad[ia + if ac { j } else { 0 }];
            let y = bd[ib + if bc { j } else { 0 }];
            out.push(f(x, y));
        }
    }
    Array::new(vec![r, c], out).expect("broadcast shape")
}

/// Sum `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = (g.rows(), g.cols());
    let (tr, tc) = (shape[0], shape[1]);
    let mut out = Array::zeros(shape);
    let od = out.data_mut();
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i * tc };
        for j in 0..c {
            od[oi + if tc == 1 { 0 } else { j }] += g.get(i, j);
        }
    }
    out
}

fn tril(a: &Array, upper: bool) -> Array {
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            let outside = if upper { j < i } else { j > i };
            if outside {
                out.set(i, j, 0.0);
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that validates finiteness after every op and rejects log/sqrt
    /// of non-positive inputs.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, parents: Vec<Var>, value: Array) -> Result<Var> {
        if self.checked {
            value.ensure_finite(op.tag())?;
        }
        let needs_grad = match op {
            Op::Leaf { trainable } => trainable,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Array) -> Result<Var> {
        self.push(Op::Leaf { trainable: true }, vec![], value)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(Op::Leaf { trainable: false }, vec![], value)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(op.tag(), va, vb)?;
        let out = broadcast_zip(va, vb, r, c, f);
        self.push(op, vec![a, b], out)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(op, vec![a], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    /// Element-wise product (with size-1 broadcasting).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(Op::Scale(s), a, |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Offset(c), a, |x| x + c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul, vec![a, b], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        self.push(Op::Transpose, vec![a], out)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Op::LeakyRelu(slope), a, |x| if x >= 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.checked {
            self.ensure_positive("log", a)?;
        }
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.checked {
            self.ensure_positive("sqrt", a)?;
        }
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    fn ensure_positive(&self, op: &'static str, a: Var) -> Result<()> {
        match self.value(a).data().iter().position(|&x| !(x > 0.0)) {
            None => Ok(()),
            Some(i) => Err(Error::Domain {
                op,
                detail: format!("entry {i} is {}", self.value(a).data()[i]),
            }),
        }
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Op::Sum, vec![a], Array::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::invalid("mean of empty array"));
        }
        let s = v.sum() / v.len() as f64;
        self.push(Op::Mean, vec![a], Array::scalar(s))
    }

    fn axis_sums(v: &Array, axis: Axis) -> Array {
        let (r, c) = (v.rows(), v.cols());
        match axis {
            Axis::Rows => {
                let mut out = Array::zeros(&[1, c]);
                for row in v.iter_rows() {
                    for (o, x) in out.data_mut().iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out
            }
            Axis::Cols => {
                let data = (0..r).map(|i| v.row_slice(i).iter().sum()).collect();
                Array::new(vec![r, 1], data).expect("column")
            }
        }
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        require_matrix("sum-axis", self.value(a))?;
        let out = Self::axis_sums(self.value(a), axis);
        self.push(Op::SumAxis(axis), vec![a], out)
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        require_matrix("mean-axis", v)?;
        let n = match axis {
            Axis::Rows => v.rows(),
            Axis::Cols => v.cols(),
        };
        if n == 0 {
            return Err(Error::invalid("mean over an empty axis"));
        }
        let out = Self::axis_sums(v, axis).scale(1.0 / n as f64);
        self.push(Op::MeanAxis(axis), vec![a], out)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero arrays"))?;
        let v0 = self.value(*first);
        require_matrix("concat", v0)?;
        let (r0, c0) = (v0.rows(), v0.cols());
        for p in &parts[1..] {
            let v = self.value(*p);
            require_matrix("concat", v)?;
            let ok = match axis {
                Axis::Rows => v.cols() == c0,
                Axis::Cols => v.rows() == r0,
            };
            if !ok {
                return Err(shape_err("concat", v0, v));
            }
        }
        let out = match axis {
            Axis::Rows => {
                let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for p in parts {
                    data.extend_from_slice(self.value(*p).data());
                }
                Array::new(vec![rows, c0], data)?
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row_slice(i));
                    }
                }
                Array::new(vec![r0, cols], data)?
            }
        };
        self.push(Op::Concat(axis), parts.to_vec(), out)
    }

    /// Contiguous block `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        require_matrix("split", v)?;
        let extent = match axis {
            Axis::Rows => v.rows(),
            Axis::Cols => v.cols(),
        };
        if start + len > extent {
            return Err(Error::Shape {
                op: "split",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = match axis {
            Axis::Rows => {
                let c = v.cols();
                Array::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?
            }
            Axis::Cols => {
                let mut data = Vec::with_capacity(v.rows() * len);
                for row in v.iter_rows() {
                    data.extend_from_slice(&row[start..start + len]);
                }
                Array::new(vec![v.rows(), len], data)?
            }
        };
        self.push(Op::Slice { axis, start, len }, vec![a], out)
    }

    /// Split at `index` along `axis` into `[0, index)` and `[index, end)`.
    pub fn split(&mut self, a: Var, axis: Axis, index: usize) -> Result<(Var, Var)> {
        let v = self.value(a);
        require_matrix("split", v)?;
        let extent = match axis {
            Axis::Rows => v.rows(),
            Axis::Cols => v.cols(),
        };
        if index > extent {
            return Err(Error::Shape {
                op: "split",
                lhs: v.shape().to_vec(),
                rhs: vec![index],
            });
        }
        let left = self.slice(a, axis, 0, index)?;
        let right = self.slice(a, axis, index, extent - index)?;
        Ok((left, right))
    }

    /// `out[:, k] = a[:, idx[k]]`.
    pub fn gather_cols(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let v = self.value(a);
        require_matrix("gather-cols", v)?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= v.cols()) {
            return Err(Error::Shape {
                op: "gather-cols",
                lhs: v.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = v.gather_cols(&idx);
        self.push(Op::GatherCols(idx), vec![a], out)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshape(&[rows, cols])?;
        self.push(Op::Reshape, vec![a], out)
    }

    /// Lower Cholesky factor of the symmetric part of a square matrix.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        require_matrix("cholesky", v)?;
        if v.rows() != v.cols() {
            return Err(shape_err("cholesky", v, v));
        }
        let n = v.rows();
        let sym = v.zip_with(&v.transpose(), |x, y| 0.5 * (x + y))?;
        let l = linalg::cholesky(sym.data(), n)?;
        self.push(Op::Cholesky, vec![a], Array::new(vec![n, n], l)?)
    }

    /// `X = T^{-1} B` for triangular `T` (only the relevant triangle is read).
    pub fn solve_triangular(&mut self, t: Var, b: Var, upper: bool) -> Result<Var> {
        let (vt, vb) = (self.value(t), self.value(b));
        require_matrix("solve-triangular", vt)?;
        require_matrix("solve-triangular", vb)?;
        if vt.rows() != vt.cols() || vt.rows() != vb.rows() {
            return Err(shape_err("solve-triangular", vt, vb));
        }
        let (n, m) = (vb.rows(), vb.cols());
        let tri = tril(vt, upper);
        let mut x = vb.data().to_vec();
        linalg::tri_solve(tri.data(), n, upper, false, &mut x, m)?;
        self.push(
            Op::SolveTriangular { upper },
            vec![t, b],
            Array::new(vec![n, m], x)?,
        )
    }

    /// Diagonal of a square matrix as an `[n, 1]` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        require_matrix("diag", v)?;
        if v.rows() != v.cols() {
            return Err(shape_err("diag", v, v));
        }
        let d: Vec<f64> = (0..v.rows()).map(|i| v.get(i, i)).collect();
        self.push(Op::Diag, vec![a], Array::column(&d))
    }

    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a);
        require_matrix("logsumexp", v)?;
        let out = match axis {
            Axis::Cols => {
                let d = v.iter_rows().map(lse).collect::<Vec<_>>();
                Array::column(&d)
            }
            Axis::Rows => {
                let t = v.transpose();
                Array::row(&t.iter_rows().map(lse).collect::<Vec<_>>())
            }
        };
        self.push(Op::LogSumExp(axis), vec![a], out)
    }

    /// Gradients of a scalar root with respect to all trainable leaves.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_with(root, Array::filled(v.shape(), 1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `root`.
    pub fn backward_with(&self, root: Var, seed: Array) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(shape_err("backward", &seed, self.value(root)));
        }
        let mut adj: Vec<Option<Array>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                adj[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let contribs = self.vjp(node, &g)?;
            for (p, c) in node.parents.iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut adj[p.0] {
                    Some(acc) => {
                        for (a, x) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += x;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads: adj })
    }

    /// Local vector-Jacobian products for each parent of `node`.
    fn vjp(&self, node: &Node, g: &Array) -> Result<Vec<Option<Array>>> {
        let pv = |k: usize| self.value(node.parents[k]);
        let y = &node.value;
        let map2 = |a: &Array, f: &dyn Fn(f64, f64) -> f64| -> Array {
            a.zip_with(g, |x, gi| f(x, gi)).expect("vjp shape")
        };
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add => vec![
                Some(reduce_to(g, pv(0).shape())),
                Some(reduce_to(g, pv(1).shape())),
            ],
            Op::Sub => vec![
                Some(reduce_to(g, pv(0).shape())),
                Some(reduce_to(g, pv(1).shape()).scale(-1.0)),
            ],
            Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                let (r, c) = (g.rows(), g.cols());
                let gb = broadcast_zip(g, b, r, c, |gi, bi| gi * bi);
                let ga = broadcast_zip(g, a, r, c, |gi, ai| gi * ai);
                vec![
                    Some(reduce_to(&gb, a.shape())),
                    Some(reduce_to(&ga, b.shape())),
                ]
            }
            Op::Scale(s) => vec![Some(g.scale(*s))],
            Op::Offset(_) => vec![Some(g.clone())],
            Op::MatMul => {
                let (a, b) = (pv(0), pv(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut db, 0.0);
                vec![
                    Some(Array::new(vec![m, k], da)?),
                    Some(Array::new(vec![k, n], db)?),
                ]
            }
            Op::Transpose => vec![Some(g.transpose())],
            Op::Tanh => vec![Some(map2(y, &|t, gi| gi * (1.0 - t * t)))],
            Op::LeakyRelu(slope) => {
                let s = *slope;
                vec![Some(map2(pv(0), &|x, gi| if x >= 0.0 { gi } else { s * gi }))]
            }
            Op::Exp => vec![Some(map2(y, &|e, gi| gi * e))],
            Op::Log => vec![Some(map2(pv(0), &|x, gi| gi / x))],
            Op::Square => vec![Some(map2(pv(0), &|x, gi| 2.0 * x * gi))],
            Op::Sqrt => vec![Some(map2(y, &|s, gi| gi / (2.0 * s)))],
            Op::Sum => vec![Some(Array::filled(pv(0).shape(), g.item()))],
            Op::Mean => {
                let n = pv(0).len() as f64;
                vec![Some(Array::filled(pv(0).shape(), g.item() / n))]
            }
            Op::SumAxis(_) | Op::MeanAxis(_) => {
                let a = pv(0);
                let (r, c) = (a.rows(), a.cols());
                let scale = match node.op {
                    Op::MeanAxis(Axis::Rows) => 1.0 / r as f64,
                    Op::MeanAxis(Axis::Cols) => 1.0 / c as f64,
                    _ => 1.0,
                };
                let ones = Array::filled(&[r, c], scale);
                vec![Some(broadcast_zip(&ones, g, r, c, |o, gi| o * gi))]
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(node.parents.len());
                for k in 0..node.parents.len() {
                    let p = pv(k);
                    let part = match axis {
                        Axis::Rows => {
                            let c = p.cols();
                            let d = g.data()[offset * c..(offset + p.rows()) * c].to_vec();
                            offset += p.rows();
                            Array::new(p.shape().to_vec(), d)?
                        }
                        Axis::Cols => {
                            let w = p.cols();
                            let mut d = Vec::with_capacity(p.len());
                            for row in g.iter_rows() {
                                d.extend_from_slice(&row[offset..offset + w]);
                            }
                            offset += w;
                            Array::new(p.shape().to_vec(), d)?
                        }
                    };
                    parts.push(Some(part));
                }
                parts
            }
            Op::Slice { axis, start, len } => {
                let a = pv(0);
                let mut out = Array::zeros(a.shape());
                let c = a.cols();
                match axis {
                    Axis::Rows => {
                        out.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                    }
                    Axis::Cols => {
                        for i in 0..a.rows() {
                            out.row_slice_mut(i)[*start..start + len]
                                .copy_from_slice(g.row_slice(i));
                        }
                    }
                }
                vec![Some(out)]
            }
            Op::GatherCols(idx) => {
                let a = pv(0);
                let mut out = Array::zeros(a.shape());
                for i in 0..a.rows() {
                    let gr = g.row_slice(i);
                    let orow = out.row_slice_mut(i);
                    for (k, &j) in idx.iter().enumerate() {
                        orow[j] += gr[k];
                    }
                }
                vec![Some(out)]
            }
            Op::Reshape => vec![Some(g.clone().reshape(pv(0).shape())?)],
            Op::Cholesky => vec![Some(cholesky_vjp(y, g)?)],
            Op::SolveTriangular { upper } => {
                let t = tril(pv(0), *upper);
                let (n, m) = (g.rows(), g.cols());
                // B_bar = T^{-T} X_bar
                let mut gb = g.data().to_vec();
                linalg::tri_solve(t.data(), n, *upper, true, &mut gb, m)?;
                let gb = Array::new(vec![n, m], gb)?;
                // T_bar = -B_bar X^T restricted to the triangle
                let mut gt = vec![0.0; n * n];
                gemm(n, m, n, gb.data(), false, y.data(), true, &mut gt, 0.0);
                let gt = tril(&Array::new(vec![n, n], gt)?, *upper).scale(-1.0);
                vec![Some(gt), Some(gb)]
            }
            Op::Diag => {
                let n = pv(0).rows();
                let mut out = Array::zeros(&[n, n]);
                for i in 0..n {
                    out.set(i, i, g.data()[i]);
                }
                vec![Some(out)]
            }
            Op::LogSumExp(axis) => {
                let a = pv(0);
                let (r, c) = (a.rows(), a.cols());
                let mut out = Array::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        let k = match axis {
                            Axis::Cols => i,
                            Axis::Rows => j,
                        };
                        out.set(i, j, g.data()[k] * (a.get(i, j) - y.data()[k]).exp());
                    }
                }
                vec![Some(out)]
            }
        };
        Ok(out)
    }
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Adjoint of `Sigma -> chol(sym(Sigma))`, routed through triangular solves:
/// `S = L^{-T} Phi(L^T L_bar) L^{-1}`, returned symmetrized.
fn cholesky_vjp(l: &Array, g: &Array) -> Result<Array> {
    let n = l.rows();
    let gl = tril(g, false);
    let mut p = vec![0.0; n * n];
    gemm(n, n, n, l.data(), true, gl.data(), false, &mut p, 0.0);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p[i * n + j] = 0.0;
            } else if j == i {
                p[i * n + j] *= 0.5;
            }
        }
    }
    // Y = L^{-T} P
    linalg::tri_solve(l.data(), n, false, true, &mut p, n)?;
    // S^T = L^{-T} Y^T
    let mut st = Array::new(vec![n, n], p)?.transpose().into_data();
    linalg::tri_solve(l.data(), n, false, true, &mut st, n)?;
    let st = Array::new(vec![n, n], st)?;
    st.zip_with(&st.transpose(), |a, b| 0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &mut Tape, x: f64) -> Var {
        t.param(Array::scalar(x)).unwrap()
    }

    #[test]
    fn tanh_at_zero() {
        let mut t = Tape::checked();
        let x = scalar(&mut t, 0.0);
        let y = t.tanh(x).unwrap();
        assert_eq!(t.value(y).item(), 0.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::checked();
        let x = scalar(&mut t, 2.0);
        let y = scalar(&mut t, 3.0);
        let z = t.mul(x, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::checked();
        let x = t.param(Array::row(&[1.0, -2.0, 3.0, 0.5, 7.0])).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut t = Tape::checked();
        let x = t.param(Array::row(&[1.0, 2.0])).unwrap();
        let sq = t.square(x).unwrap();
        let m = t.mean(sq).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn leaky_relu_derivative_at_zero_is_one() {
        let mut t = Tape::checked();
        let x = scalar(&mut t, 0.0);
        let y = t.leaky_relu(x, 0.2).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
        let mut t = Tape::checked();
        let x = scalar(&mut t, -1.0);
        let y = t.leaky_relu(x, 0.2).unwrap();
        assert_eq!(t.value(y).item(), -0.2);
        assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), 0.2);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3])).unwrap();
        let b = t.constant(Array::zeros(&[2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t.constant(Array::zeros(&[3, 2])).unwrap();
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn checked_mode_domain_errors() {
        let mut t = Tape::checked();
        let x = t.constant(Array::row(&[1.0, 0.0])).unwrap();
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
        let y = t.constant(Array::row(&[-1.0])).unwrap();
        assert!(matches!(t.sqrt(y), Err(Error::Domain { op: "sqrt", .. })));
        // unchecked tapes let IEEE semantics through
        let mut u = Tape::new();
        let x = u.constant(Array::row(&[0.0])).unwrap();
        let y = u.log(x).unwrap();
        assert_eq!(u.value(y).item(), f64::NEG_INFINITY);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Array::row(&[1.0, 2.0])).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::checked();
        let x = t.param(Array::zeros(&[3, 2])).unwrap();
        let b = t.param(Array::row(&[1.0, 2.0])).unwrap();
        let y = t.add(x, b).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array::scalar(2.0)).unwrap();
        let x = scalar(&mut t, 5.0);
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }
}

//! Reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] is an append-only record of operations. Every operation
//! computes its forward value eagerly and remembers its inputs, so the
//! insertion order is already a topological order. [`Graph::backward`]
//! walks the nodes once in reverse and accumulates vector-Jacobian
//! products into each input.
//!
//! There is no broadcasting anywhere: elementwise operations require
//! identical shapes, and shape adaptation goes through explicit
//! `concat`/`slice`/`reshape` nodes.
//!
//! ```
//! use latent_align::graph::Graph;
//! use latent_align::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let y = g.dot(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Elementwise quotient.
    Div,
    MatMul,
    /// Concatenation along the last axis.
    Concat,
    /// Stacks vectors (as rows) or matrices with equal column counts.
    ConcatRows,
    Tanh,
    Sigmoid,
    /// `max(0, x)`; the subgradient at 0 is 0.
    Relu,
    Exp,
    Sqrt,
    Sum,
    Dot,
    Transpose,
    SoftmaxRows,
    ScalarMul(f64),
    AddScalar(f64),
    SliceRow(usize),
    SliceCol(usize),
    SliceCols {
        start: usize,
        end: usize,
    },
    /// Picks one entry (flat row-major index) as a `[1]` tensor.
    Element(usize),
    Reshape(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul_elementwise",
            OpKind::Div => "div_elementwise",
            OpKind::MatMul => "matmul",
            OpKind::Concat => "concat_last_axis",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu_hinge",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::Dot => "dot",
            OpKind::Transpose => "transpose",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::SliceRow(_) => "slice_row",
            OpKind::SliceCol(_) => "slice_col",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Element(_) => "element",
            OpKind::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Arity {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul | OpKind::Dot => Arity::Exactly(2),
            OpKind::Concat | OpKind::ConcatRows => Arity::AtLeastOne,
            _ => Arity::Exactly(1),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the parameter-free operation kinds by name.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul_elementwise" => OpKind::Mul,
            "div_elementwise" => OpKind::Div,
            "matmul" => OpKind::MatMul,
            "concat_last_axis" => OpKind::Concat,
            "concat_rows" => OpKind::ConcatRows,
            "tanh" => OpKind::Tanh,
            "sigmoid" => OpKind::Sigmoid,
            "relu_hinge" => OpKind::Relu,
            "exp" => OpKind::Exp,
            "sqrt" => OpKind::Sqrt,
            "sum" => OpKind::Sum,
            "dot" => OpKind::Dot,
            "transpose" => OpKind::Transpose,
            "softmax_rows" => OpKind::SoftmaxRows,
            "scalar_mul" | "add_scalar" | "slice_row" | "slice_col" | "slice_cols" | "element" | "reshape" => {
                return Err(Error::InvalidArgument(format!(
                    "operation `{s}` takes a parameter; construct the OpKind variant directly"
                )))
            }
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

enum Arity {
    Exactly(usize),
    AtLeastOne,
}

struct Node {
    op: Option<OpKind>,
    inputs: Vec<Var>,
    value: Tensor,
}

/// Append-only operation record for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    kink_distance: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kink_distance: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: tensor,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient filled in by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op(&self, v: Var) -> Option<&OpKind> {
        self.nodes[v.0].op.as_ref()
    }

    /// Smallest `|x|` seen at the input of any hinge, or any distance
    /// recorded through [`Graph::note_kink`]. Finite differences that step
    /// across a kink are not comparable with the analytic gradient.
    pub fn kink_distance(&self) -> f64 {
        self.kink_distance
    }

    pub fn note_kink(&mut self, distance: f64) {
        self.kink_distance = self.kink_distance.min(distance.abs());
    }

    /// Records `kind` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        match kind.arity() {
            Arity::Exactly(n) if inputs.len() != n => {
                return Err(Error::operand(
                    name,
                    format!("expects {n} inputs, got {}", inputs.len()),
                ))
            }
            Arity::AtLeastOne if inputs.is_empty() => return Err(Error::operand(name, "expects at least one input")),
            _ => {}
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::operand(name, format!("input {v:?} is not in this graph")));
            }
        }
        let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&kind, &xs)?;
        if kind == OpKind::Relu {
            let closest = xs[0].data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
            self.kink_distance = self.kink_distance.min(closest);
        }
        let requires_grad = xs.iter().any(|x| x.requires_grad());
        self.nodes.push(Node {
            op: Some(kind),
            inputs: inputs.to_vec(),
            value: value.with_requires_grad(requires_grad),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Dot, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxRows, &[x])
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::ScalarMul(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[x])
    }

    pub fn slice_row(&mut self, x: Var, row: usize) -> Result<Var> {
        self.apply(OpKind::SliceRow(row), &[x])
    }

    pub fn slice_col(&mut self, x: Var, col: usize) -> Result<Var> {
        self.apply(OpKind::SliceCol(col), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, end }, &[x])
    }

    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        self.apply(OpKind::Element(index), &[x])
    }

    /// Entry `(r, c)` of a matrix node.
    pub fn entry(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let (rows, cols) = self
            .value(x)
            .dims2()
            .ok_or_else(|| Error::operand("element", "entry() needs a matrix"))?;
        if r >= rows || c >= cols {
            return Err(Error::operand(
                "element",
                format!("({r}, {c}) out of bounds for {rows}x{cols}"),
            ));
        }
        self.element(x, r * cols + c)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.into()), &[x])
    }

    /// Reverse pass from a one-element `root`.
    ///
    /// Afterwards every node that tracks gradients holds
    /// `d(root)/d(node)` (zeros for nodes the root does not depend on).
    /// Contributions from several uses of one node are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                if node.value.requires_grad() {
                    backprop(op, &node.inputs, &node.value, &g, &self.nodes, &mut grads);
                }
            }
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.value.requires_grad() {
                continue;
            }
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            node.value.set_grad(g);
        }
        Ok(())
    }
}

fn shape_err(op: &OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix_dims(op: &OpKind, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::operand(op.name(), format!("expects a matrix, got shape {:?}", t.shape())))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(op: &OpKind, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward(op: &OpKind, xs: &[&Tensor]) -> Result<Tensor> {
    match op {
        OpKind::Add => zip(op, xs[0], xs[1], |a, b| a + b),
        OpKind::Sub => zip(op, xs[0], xs[1], |a, b| a - b),
        OpKind::Mul => zip(op, xs[0], xs[1], |a, b| a * b),
        OpKind::Div => zip(op, xs[0], xs[1], |a, b| a / b),
        OpKind::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k) = matrix_dims(op, a)?;
            let (k2, n) = matrix_dims(op, b)?;
            if k != k2 {
                return Err(shape_err(op, a, b));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        OpKind::Concat => {
            let first = xs[0];
            match first.rank() {
                1 => {
                    for x in xs {
                        if x.rank() != 1 {
                            return Err(shape_err(op, first, x));
                        }
                    }
                    Ok(Tensor::vector(
                        xs.iter().flat_map(|x| x.data().iter().copied()).collect(),
                    ))
                }
                2 => {
                    let rows = first.dims2().unwrap().0;
                    let mut cols = 0;
                    for x in xs {
                        match x.dims2() {
                            Some((r, c)) if r == rows => cols += c,
                            _ => return Err(shape_err(op, first, x)),
                        }
                    }
                    let mut out = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for x in xs {
                            out.extend_from_slice(x.row(r));
                        }
                    }
                    Tensor::matrix(rows, cols, out)
                }
                _ => Err(Error::operand(op.name(), "supports rank 1 and 2 only")),
            }
        }
        OpKind::ConcatRows => {
            let first = xs[0];
            let cols = match first.rank() {
                1 => first.len(),
                2 => first.dims2().unwrap().1,
                _ => return Err(Error::operand(op.name(), "supports rank 1 and 2 only")),
            };
            let mut rows = 0;
            for x in xs {
                match (first.rank(), x.shape()) {
                    (1, &[c]) if c == cols => rows += 1,
                    (2, &[r, c]) if c == cols => rows += r,
                    _ => return Err(shape_err(op, first, x)),
                }
            }
            let data = xs.iter().flat_map(|x| x.data().iter().copied()).collect();
            Tensor::matrix(rows, cols, data)
        }
        OpKind::Tanh => Ok(map(xs[0], f64::tanh)),
        OpKind::Sigmoid => Ok(map(xs[0], sigmoid)),
        OpKind::Relu => Ok(map(xs[0], |x| if x > 0.0 { x } else { 0.0 })),
        OpKind::Exp => Ok(map(xs[0], f64::exp)),
        OpKind::Sqrt => Ok(map(xs[0], f64::sqrt)),
        OpKind::Sum => Ok(Tensor::scalar(xs[0].data().iter().sum())),
        OpKind::Dot => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(op, a, b));
            }
            Ok(Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()))
        }
        OpKind::Transpose => {
            let x = xs[0];
            let (r, c) = matrix_dims(op, x)?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, out)
        }
        OpKind::SoftmaxRows => {
            let x = xs[0];
            let (r, c) = matrix_dims(op, x)?;
            if c == 0 {
                return Err(Error::operand(op.name(), "rows must be non-empty"));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::matrix(r, c, out)
        }
        OpKind::ScalarMul(c) => Ok(map(xs[0], |x| c * x)),
        OpKind::AddScalar(c) => Ok(map(xs[0], |x| x + c)),
        OpKind::SliceRow(i) => {
            let x = xs[0];
            let (r, _) = matrix_dims(op, x)?;
            if *i >= r {
                return Err(Error::operand(
                    op.name(),
                    format!("row {i} out of range for {:?}", x.shape()),
                ));
            }
            Ok(Tensor::vector(x.row(*i).to_vec()))
        }
        OpKind::SliceCol(j) => {
            let x = xs[0];
            let (r, c) = matrix_dims(op, x)?;
            if *j >= c {
                return Err(Error::operand(
                    op.name(),
                    format!("column {j} out of range for {:?}", x.shape()),
                ));
            }
            Ok(Tensor::vector((0..r).map(|i| x.data()[i * c + j]).collect()))
        }
        OpKind::SliceCols { start, end } => {
            let x = xs[0];
            let (r, c) = matrix_dims(op, x)?;
            if start > end || *end > c {
                return Err(Error::operand(
                    op.name(),
                    format!("columns {start}..{end} out of range for {:?}", x.shape()),
                ));
            }
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&x.row(i)[*start..*end]);
            }
            Tensor::matrix(r, end - start, out)
        }
        OpKind::Element(idx) => {
            let x = xs[0];
            x.data()
                .get(*idx)
                .map(|&v| Tensor::scalar(v))
                .ok_or_else(|| Error::operand(op.name(), format!("index {idx} out of range for {:?}", x.shape())))
        }
        OpKind::Reshape(shape) => {
            let x = xs[0];
            let n: usize = shape.iter().product();
            if n != x.len() || shape.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor::new(shape.clone(), x.data().to_vec())
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

/// Adds the vector-Jacobian product of one node into its inputs' buffers.
fn backprop(op: &OpKind, inputs: &[Var], out: &Tensor, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let needs = |v: Var| nodes[v.0].value.requires_grad();
    let val = |v: Var| &nodes[v.0].value;

    macro_rules! accumulate {
        ($v:expr, |$buf:ident| $body:block) => {
            if needs($v) {
                let $buf = slot(grads, nodes, $v);
                $body
            }
        };
    }

    match op {
        OpKind::Add | OpKind::Sub => {
            let sign = if *op == OpKind::Add { 1.0 } else { -1.0 };
            accumulate!(inputs[0], |buf| {
                buf.iter_mut().zip(g).for_each(|(b, &gi)| *b += gi);
            });
            accumulate!(inputs[1], |buf| {
                buf.iter_mut().zip(g).for_each(|(b, &gi)| *b += sign * gi);
            });
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let bd = val(b).data();
            let ad = val(a).data();
            accumulate!(a, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * bd[i];
                }
            });
            accumulate!(b, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * ad[i];
                }
            });
        }
        OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let ad = val(a).data();
            let bd = val(b).data();
            accumulate!(a, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] / bd[i];
                }
            });
            accumulate!(b, |buf| {
                for i in 0..g.len() {
                    buf[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                }
            });
        }
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = val(a).dims2().unwrap();
            let n = val(b).dims2().unwrap().1;
            if needs(a) {
                let bd = val(b).data();
                let mut local = vec![0.0; m * k];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let bp = &bd[p * n..(p + 1) * n];
                        local[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                let buf = slot(grads, nodes, a);
                buf.iter_mut().zip(&local).for_each(|(b, l)| *b += l);
            }
            if needs(b) {
                let ad = val(a).data();
                let buf = slot(grads, nodes, b);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (bv, &gv) in buf[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *bv += aip * gv;
                        }
                    }
                }
            }
        }
        OpKind::Concat => {
            if out.rank() == 1 {
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).len();
                    accumulate!(v, |buf| {
                        buf.iter_mut().zip(&g[offset..offset + len]).for_each(|(b, &x)| *b += x);
                    });
                    offset += len;
                }
            } else {
                let (rows, cols) = out.dims2().unwrap();
                let mut offset = 0;
                for &v in inputs {
                    let c = val(v).dims2().unwrap().1;
                    accumulate!(v, |buf| {
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + c];
                            buf[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(b, &x)| *b += x);
                        }
                    });
                    offset += c;
                }
            }
        }
        OpKind::ConcatRows | OpKind::Reshape(_) => {
            let mut offset = 0;
            for &v in inputs {
                let len = val(v).len();
                accumulate!(v, |buf| {
                    buf.iter_mut().zip(&g[offset..offset + len]).for_each(|(b, &x)| *b += x);
                });
                offset += len;
            }
        }
        OpKind::Tanh => {
            let y = out.data();
            accumulate!(inputs[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        OpKind::Sigmoid => {
            let y = out.data();
            accumulate!(inputs[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        OpKind::Relu => {
            let x = val(inputs[0]).data();
            accumulate!(inputs[0], |buf| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            });
        }
        OpKind::Exp => {
            let y = out.data();
            accumulate!(inputs[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * y[i];
                }
            });
        }
        OpKind::Sqrt => {
            let y = out.data();
            accumulate!(inputs[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * 0.5 / y[i];
                }
            });
        }
        OpKind::Sum => {
            accumulate!(inputs[0], |buf| {
                buf.iter_mut().for_each(|b| *b += g[0]);
            });
        }
        OpKind::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            let ad = val(a).data();
            let bd = val(b).data();
            accumulate!(a, |buf| {
                buf.iter_mut().zip(bd).for_each(|(x, &y)| *x += g[0] * y);
            });
            accumulate!(b, |buf| {
                buf.iter_mut().zip(ad).for_each(|(x, &y)| *x += g[0] * y);
            });
        }
        OpKind::Transpose => {
            let (r, c) = out.dims2().unwrap();
            accumulate!(inputs[0], |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        OpKind::SoftmaxRows => {
            let (_, c) = out.dims2().unwrap();
            let y = out.data();
            accumulate!(inputs[0], |buf| {
                for ((brow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        brow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            });
        }
        OpKind::ScalarMul(c) => {
            accumulate!(inputs[0], |buf| {
                buf.iter_mut().zip(g).for_each(|(b, &x)| *b += c * x);
            });
        }
        OpKind::AddScalar(_) => {
            accumulate!(inputs[0], |buf| {
                buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x);
            });
        }
        OpKind::SliceRow(i) => {
            let c = g.len();
            accumulate!(inputs[0], |buf| {
                buf[i * c..(i + 1) * c].iter_mut().zip(g).for_each(|(b, &x)| *b += x);
            });
        }
        OpKind::SliceCol(j) => {
            let c = val(inputs[0]).dims2().unwrap().1;
            accumulate!(inputs[0], |buf| {
                for (r, &x) in g.iter().enumerate() {
                    buf[r * c + j] += x;
                }
            });
        }
        OpKind::SliceCols { start, end } => {
            let (rows, c) = val(inputs[0]).dims2().unwrap();
            let w = end - start;
            accumulate!(inputs[0], |buf| {
                for r in 0..rows {
                    for k in 0..w {
                        buf[r * c + start + k] += g[r * w + k];
                    }
                }
            });
        }
        OpKind::Element(idx) => {
            accumulate!(inputs[0], |buf| {
                buf[*idx] += g[0];
            });
        }
    }
}

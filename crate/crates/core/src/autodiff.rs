//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive in evaluation order, so the node list
//! is topologically sorted by construction. Each node holds a dense matrix;
//! scalars are `1 × 1` nodes. Binary elementwise primitives broadcast a
//! `1 × 1`, `1 × c` or `r × 1` operand against the other one.
//!
//! Domain violations (log of a non-positive value, division by zero) poison
//! the tape: the offending node becomes NaN and the next backward pass
//! reports the first violation instead of returning gradients.
//!
//! ```
//! use ica_core::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let a = tape.scalar_var(2.0);
//! let b = tape.scalar_var(3.0);
//! let y = a * b;
//! let g = tape.gradient(y).unwrap();
//! assert_eq!(g.scalar(a), 3.0);
//! assert_eq!(g.scalar(b), 2.0);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

type Mat = DMatrix<f64>;

/// A scalar elementwise function with a known derivative, usable as a
/// custom primitive (see [`Var::map`]).
pub trait ElementwiseFn {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Square(usize),
    Abs(usize),
    Map(usize, Rc<dyn ElementwiseFn>),
    MatMul(usize, usize),
    Affine(usize, usize, usize),
    Sum(usize),
    GatherCols(usize, Rc<[usize]>),
    GatherRows(usize, Rc<[usize]>),
    ConcatCols(Rc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Map(..) => "map",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Sum(..) => "sum",
            Op::GatherCols(..) => "gather_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

/// Append-only record of primitive evaluations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    poison: Cell<Option<(&'static str, usize)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.idx)
    }
}

/// Primitive kinds accepted by [`Tape::eval`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    /// `x · W + b` with `b` broadcast over rows.
    Affine,
    Sum,
    Square,
}

impl Primitive {
    fn arity(self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => 2,
            Primitive::Affine => 3,
            _ => 1,
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn expand(m: &Mat, rows: usize, cols: usize) -> Mat {
    if m.shape() == (rows, cols) {
        return m.clone();
    }
    let (mr, mc) = m.shape();
    Mat::from_fn(rows, cols, |i, j| m[(if mr == 1 { 0 } else { i }, if mc == 1 { 0 } else { j })])
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce(g: Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g;
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let oi = if shape.0 == 1 { 0 } else { i };
            let oj = if shape.1 == 1 { 0 } else { j };
            out[(oi, oj)] += g[(i, j)];
        }
    }
    out
}

fn zip_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Option<Mat> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        return Some(a.zip_map(b, f));
    }
    let ea = expand(a, shape.0, shape.1);
    let eb = expand(b, shape.0, shape.1);
    Some(ea.zip_map(&eb, f))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            poison: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Mat) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_var(&self, v: f64) -> Var<'_> {
        self.var(Mat::from_element(1, 1, v))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, v))
    }

    /// A `1 × d` differentiable row.
    pub fn row_var(&self, values: &[f64]) -> Var<'_> {
        self.var(Mat::from_row_slice(1, values.len(), values))
    }

    /// First domain violation recorded on this tape, if any.
    pub fn poisoned(&self) -> Option<Error> {
        self.poison.get().map(|(op, node)| Error::Domain { op, node })
    }

    /// Evaluates a primitive by kind.
    pub fn eval<'t>(&'t self, kind: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        if inputs.len() != kind.arity() {
            return Err(Error::InvalidParameter(format!(
                "{kind:?} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        let x = inputs[0];
        let out = match kind {
            Primitive::Add => x.try_binary(inputs[1], BinOp::Add)?,
            Primitive::Sub => x.try_binary(inputs[1], BinOp::Sub)?,
            Primitive::Mul => x.try_binary(inputs[1], BinOp::Mul)?,
            Primitive::Div => x.try_binary(inputs[1], BinOp::Div)?,
            Primitive::Exp => x.exp(),
            Primitive::Log => x.ln(),
            Primitive::Tanh => x.tanh(),
            Primitive::Square => x.square(),
            Primitive::Sum => x.sum(),
            Primitive::Affine => x.try_affine(inputs[1], inputs[2])?,
        };
        match self.poisoned() {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn push(&self, op: Op, value: Mat, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { op, value, needs_grad });
        Var { tape: self, idx }
    }

    fn push_op(&self, op: Op, value: Mat, inputs: &[usize]) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push(op, value, needs_grad)
    }

    fn flag(&self, op: &'static str, node: usize) {
        if self.poison.get().is_none() {
            self.poison.set(Some((op, node)));
        }
    }

    pub fn value(&self, v: Var<'_>) -> Mat {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn shape(&self, v: Var<'_>) -> (usize, usize) {
        self.nodes.borrow()[v.idx].value.shape()
    }

    /// Gradient of a `1 × 1` output with respect to every node.
    pub fn gradient(&self, output: Var<'_>) -> Result<Gradients> {
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }
        self.vjp(output, Mat::from_element(1, 1, 1.0))
    }

    /// Vector–Jacobian product: back-propagates `seed` (shaped like the
    /// output) through the tape.
    pub fn vjp(&self, output: Var<'_>, seed: Mat) -> Result<Gradients> {
        if let Some(e) = self.poisoned() {
            return Err(e);
        }
        let nodes = self.nodes.borrow();
        let out = output.idx;
        if nodes[out].value.shape() != seed.shape() {
            return Err(Error::shape(
                format!("{:?}", nodes[out].value.shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; out + 1];
        adj[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backward_node(&nodes, i, &g, &mut adj);
            adj[i] = Some(g);
        }
        let shapes = nodes[..=out].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { adj, shapes })
    }
}

fn accumulate(adj: &mut [Option<Mat>], nodes: &[Node], idx: usize, g: Mat) {
    if !nodes[idx].needs_grad {
        return;
    }
    let g = reduce(g, nodes[idx].value.shape());
    match &mut adj[idx] {
        Some(acc) => *acc += g,
        slot => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], i: usize, g: &Mat, adj: &mut [Option<Mat>]) {
    let val = |k: usize| &nodes[k].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, -g);
        }
        &Op::Mul(a, b) => {
            if nodes[a].needs_grad {
                let gb = zip_broadcast(g, val(b), |x, y| x * y).expect("shape checked");
                accumulate(adj, nodes, a, gb);
            }
            if nodes[b].needs_grad {
                let ga = zip_broadcast(g, val(a), |x, y| x * y).expect("shape checked");
                accumulate(adj, nodes, b, ga);
            }
        }
        &Op::Div(a, b) => {
            if nodes[a].needs_grad {
                let ga = zip_broadcast(g, val(b), |x, y| x / y).expect("shape checked");
                accumulate(adj, nodes, a, ga);
            }
            if nodes[b].needs_grad {
                // d(a/b)/db = -out / b
                let t = zip_broadcast(out, val(b), |o, y| -o / y).expect("shape checked");
                accumulate(adj, nodes, b, g.component_mul(&t));
            }
        }
        &Op::Neg(a) => accumulate(adj, nodes, a, -g),
        &Op::Scale(a, c) => accumulate(adj, nodes, a, g * c),
        &Op::Shift(a) => accumulate(adj, nodes, a, g.clone()),
        &Op::Exp(a) => accumulate(adj, nodes, a, g.component_mul(out)),
        &Op::Log(a) => accumulate(adj, nodes, a, g.zip_map(val(a), |x, y| x / y)),
        &Op::Tanh(a) => accumulate(adj, nodes, a, g.zip_map(out, |x, t| x * (1.0 - t * t))),
        &Op::Square(a) => accumulate(adj, nodes, a, g.zip_map(val(a), |x, y| 2.0 * x * y)),
        &Op::Abs(a) => accumulate(adj, nodes, a, g.zip_map(val(a), |x, y| x * sign0(y))),
        Op::Map(a, f) => {
            let a = *a;
            accumulate(adj, nodes, a, g.zip_map(val(a), |x, y| x * f.derivative(y)));
        }
        &Op::MatMul(a, b) => {
            if nodes[a].needs_grad {
                accumulate(adj, nodes, a, g * val(b).transpose());
            }
            if nodes[b].needs_grad {
                accumulate(adj, nodes, b, val(a).transpose() * g);
            }
        }
        &Op::Affine(x, w, b) => {
            if nodes[x].needs_grad {
                accumulate(adj, nodes, x, g * val(w).transpose());
            }
            if nodes[w].needs_grad {
                accumulate(adj, nodes, w, val(x).transpose() * g);
            }
            if nodes[b].needs_grad {
                accumulate(adj, nodes, b, g.clone());
            }
        }
        &Op::Sum(a) => {
            let (r, c) = val(a).shape();
            accumulate(adj, nodes, a, Mat::from_element(r, c, g[(0, 0)]));
        }
        Op::GatherCols(a, cols) => {
            let a = *a;
            if nodes[a].needs_grad {
                let (r, c) = val(a).shape();
                let mut ga = Mat::zeros(r, c);
                for (k, &j) in cols.iter().enumerate() {
                    let mut dst = ga.column_mut(j);
                    dst += g.column(k);
                }
                accumulate(adj, nodes, a, ga);
            }
        }
        Op::GatherRows(a, rows) => {
            let a = *a;
            if nodes[a].needs_grad {
                let (r, c) = val(a).shape();
                let mut ga = Mat::zeros(r, c);
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[(i, j)] += g[(k, j)];
                    }
                }
                accumulate(adj, nodes, a, ga);
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts.iter() {
                let c = val(p).ncols();
                if nodes[p].needs_grad {
                    accumulate(adj, nodes, p, g.columns(offset, c).into_owned());
                }
                offset += c;
            }
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adjoints of every node up to the output.
pub struct Gradients {
    adj: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v` (zeros when `v` does not influence the
    /// output or was recorded after it).
    pub fn wrt(&self, v: Var<'_>) -> Mat {
        match self.adj.get(v.idx).and_then(|a| a.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(v.idx).copied().unwrap_or_else(|| v.shape());
                Mat::zeros(r, c)
            }
        }
    }

    /// Gradient with respect to a scalar node.
    pub fn scalar(&self, v: Var<'_>) -> f64 {
        self.wrt(v)[(0, 0)]
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Mat {
        self.tape.value(self)
    }

    /// Value of a `1 × 1` node (first entry otherwise).
    pub fn scalar_value(self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value[(0, 0)]
    }

    pub fn shape(self) -> (usize, usize) {
        self.tape.shape(self)
    }

    fn with<R>(self, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    fn unary(self, op: Op, f: impl FnOnce(&Mat) -> Mat) -> Var<'t> {
        let v = self.with(f);
        self.tape.push_op(op, v, &[self.idx])
    }

    fn try_binary(self, other: Var<'t>, kind: BinOp) -> Result<Var<'t>> {
        let (a, b) = (self.idx, other.idx);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            let f = match kind {
                BinOp::Add => |p: f64, q: f64| p + q,
                BinOp::Sub => |p: f64, q: f64| p - q,
                BinOp::Mul => |p: f64, q: f64| p * q,
                BinOp::Div => |p: f64, q: f64| if q == 0.0 { f64::NAN } else { p / q },
            };
            zip_broadcast(x, y, f)
                .ok_or_else(|| Error::shape(format!("broadcastable with {:?}", x.shape()), format!("{:?}", y.shape())))?
        };
        let op = match kind {
            BinOp::Add => Op::Add(a, b),
            BinOp::Sub => Op::Sub(a, b),
            BinOp::Mul => Op::Mul(a, b),
            BinOp::Div => Op::Div(a, b),
        };
        let poisoned = matches!(kind, BinOp::Div) && other.with(|y| y.iter().any(|&q| q == 0.0));
        let out = self.tape.push_op(op, value, &[a, b]);
        if poisoned {
            self.tape.flag("div", out.idx);
        }
        Ok(out)
    }

    fn binary(self, other: Var<'t>, kind: BinOp) -> Var<'t> {
        self.try_binary(other, kind).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), |m| m.map(f64::exp))
    }

    /// Natural log; non-positive inputs poison the tape.
    pub fn ln(self) -> Var<'t> {
        let bad = self.with(|m| m.iter().any(|&x| x <= 0.0));
        let out = self.unary(Op::Log(self.idx), |m| m.map(|x| if x > 0.0 { x.ln() } else { f64::NAN }));
        if bad {
            self.tape.flag("log", out.idx);
        }
        out
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), |m| m.map(f64::tanh))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.idx), |m| m.map(|x| x * x))
    }

    /// Absolute value (subgradient 0 at 0).
    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.idx), |m| m.map(f64::abs))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |m| m * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::Shift(self.idx), |m| m.add_scalar(c))
    }

    /// Applies a custom elementwise function.
    pub fn map(self, f: Rc<dyn ElementwiseFn>) -> Var<'t> {
        let v = self.with(|m| m.map(|x| f.value(x)));
        self.tape.push_op(Op::Map(self.idx, f), v, &[self.idx])
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.idx), |m| Mat::from_element(1, 1, m.sum()))
    }

    /// Mean of all entries.
    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, y) = (&nodes[self.idx].value, &nodes[other.idx].value);
            assert_eq!(x.ncols(), y.nrows(), "matmul shape mismatch");
            x * y
        };
        self.tape.push_op(Op::MatMul(self.idx, other.idx), value, &[self.idx, other.idx])
    }

    fn try_affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, wm, bm) = (&nodes[self.idx].value, &nodes[w.idx].value, &nodes[b.idx].value);
            if x.ncols() != wm.nrows() || bm.shape() != (1, wm.ncols()) {
                return Err(Error::shape(
                    format!("x:(r,{}) W:({},k) b:(1,k)", wm.nrows(), x.ncols()),
                    format!("x:{:?} W:{:?} b:{:?}", x.shape(), wm.shape(), bm.shape()),
                ));
            }
            let mut out = x * wm;
            for mut row in out.row_iter_mut() {
                row += bm.row(0);
            }
            out
        };
        Ok(self.tape.push_op(Op::Affine(self.idx, w.idx, b.idx), value, &[self.idx, w.idx, b.idx]))
    }

    /// `self · W + b`, with `b` a `1 × k` row broadcast over rows.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        self.try_affine(w, b).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn gather_cols(self, cols: &[usize]) -> Var<'t> {
        let cols: Rc<[usize]> = cols.into();
        let v = self.with(|m| Mat::from_fn(m.nrows(), cols.len(), |i, k| m[(i, cols[k])]));
        self.tape.push_op(Op::GatherCols(self.idx, cols), v, &[self.idx])
    }

    pub fn gather_rows(self, rows: &[usize]) -> Var<'t> {
        let rows: Rc<[usize]> = rows.into();
        let v = self.with(|m| Mat::from_fn(rows.len(), m.ncols(), |k, j| m[(rows[k], j)]));
        self.tape.push_op(Op::GatherRows(self.idx, rows), v, &[self.idx])
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let idx: Rc<[usize]> = parts.iter().map(|p| p.idx).collect();
        let v = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[idx[0]].value.nrows();
            let total: usize = idx.iter().map(|&i| nodes[i].value.ncols()).sum();
            let mut out = Mat::zeros(rows, total);
            let mut off = 0;
            for &i in idx.iter() {
                let m = &nodes[i].value;
                assert_eq!(m.nrows(), rows, "concat_cols row mismatch");
                out.columns_mut(off, m.ncols()).copy_from(m);
                off += m.ncols();
            }
            out
        };
        let inputs: Vec<usize> = idx.to_vec();
        tape.push_op(Op::ConcatCols(idx), v, &inputs)
    }

    /// Name of the primitive that produced this node.
    pub fn op_name(self) -> &'static str {
        self.tape.nodes.borrow()[self.idx].op.name()
    }
}

macro_rules! impl_binop {
    ($tr:ident, $method:ident, $kind:expr) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary(rhs, $kind)
            }
        }
        impl<'t> $tr<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.scalar(rhs);
                self.binary(c, $kind)
            }
        }
        impl<'t> $tr<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.tape.scalar(self);
                c.binary(rhs, $kind)
            }
        }
    };
}

impl_binop!(Add, add, BinOp::Add);
impl_binop!(Sub, sub, BinOp::Sub);
impl_binop!(Mul, mul, BinOp::Mul);
impl_binop!(Div, div, BinOp::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), |m| -m)
    }
}

/// Jacobian of a vector-valued function at `point` (one backward pass per
/// output). The function receives the point as a `1 × d` row and must
/// return a row or column vector.
pub fn jacobian<F>(f: F, point: &[f64]) -> Result<Mat>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.row_var(point);
    let y = f(&tape, x)?;
    let (r, c) = y.shape();
    if r != 1 && c != 1 {
        return Err(Error::shape("row or column vector", format!("{r}x{c}")));
    }
    let outputs = r * c;
    let mut jac = Mat::zeros(outputs, point.len());
    for k in 0..outputs {
        let mut seed = Mat::zeros(r, c);
        seed[(if r == 1 { 0 } else { k }, if r == 1 { k } else { 0 })] = 1.0;
        let g = tape.vjp(y, seed)?.wrt(x);
        jac.row_mut(k).copy_from(&g.row(0));
    }
    Ok(jac)
}

/// Gradient of a scalar function at `point`.
pub fn gradient_at<F>(f: &F, point: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.row_var(point);
    let y = f(&tape, x)?;
    let g = tape.gradient(y)?.wrt(x);
    Ok((y.scalar_value(), g.iter().cloned().collect()))
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// Largest `|ad − fd| / max(|ad|, |fd|, floor)` over smooth coordinates.
    pub max_rel_err: f64,
    /// Coordinates where one-sided differences disagree (a kink).
    pub kinks: Vec<usize>,
}

impl GradientCheck {
    pub fn nondifferentiable(&self) -> bool {
        !self.kinks.is_empty()
    }
}

/// Floor of the relative-error denominator in [`gradient_check`].
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients with central differences of step `h`.
pub fn gradient_check<F>(f: F, point: &[f64], h: f64) -> Result<GradientCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("step h={h} must be positive")));
    }
    let (f0, ad) = gradient_at(&f, point)?;
    let eval = |p: &[f64]| gradient_at(&f, p).map(|(v, _)| v);
    let mut max_rel_err: f64 = 0.0;
    let mut kinks = Vec::new();
    let mut p = point.to_vec();
    for k in 0..point.len() {
        p[k] = point[k] + h;
        let fp = eval(&p)?;
        p[k] = point[k] - h;
        let fm = eval(&p)?;
        p[k] = point[k];
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1.0) {
            kinks.push(k);
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (ad[k] - fd).abs() / ad[k].abs().max(fd.abs()).max(REL_ERR_FLOOR);
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradientCheck { max_rel_err, kinks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_grad(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, x: f64) -> (f64, f64) {
        let tape = Tape::new();
        let a = tape.scalar_var(x);
        let y = f(a);
        (y.scalar_value(), tape.gradient(y).unwrap().scalar(a))
    }

    #[test]
    fn primitive_values_and_derivatives() {
        assert_eq!(scalar_grad(|a| a.exp(), 0.0), (1.0, 1.0));
        assert_eq!(scalar_grad(|a| a.tanh(), 0.0), (0.0, 1.0));
        assert_eq!(scalar_grad(|a| a.ln(), 1.0), (0.0, 1.0));
        assert_eq!(scalar_grad(|a| a.square(), 3.0), (9.0, 6.0));
        assert_eq!(scalar_grad(|a| (a * 2.0).tanh(), 0.0), (0.0, 2.0));
        let (v, d) = scalar_grad(|a| 1.0 / a, 2.0);
        assert_eq!(v, 0.5);
        assert!((d + 0.25).abs() < 1e-15);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let a = tape.scalar_var(2.0);
        let b = tape.scalar_var(3.0);
        let y = tape.eval(Primitive::Mul, &[a, b]).unwrap();
        let g = tape.gradient(y).unwrap();
        assert_eq!((g.scalar(a), g.scalar(b)), (3.0, 2.0));
    }

    #[test]
    fn eval_checks_arity_and_domain() {
        let tape = Tape::new();
        let a = tape.scalar_var(-1.0);
        assert!(tape.eval(Primitive::Add, &[a]).is_err());
        assert!(matches!(tape.eval(Primitive::Log, &[a]), Err(Error::Domain { op: "log", .. })));
        let y = a.square();
        assert!(matches!(tape.gradient(y), Err(Error::Domain { .. })));

        let tape = Tape::new();
        let a = tape.scalar_var(1.0);
        let z = tape.scalar(0.0);
        assert!(matches!(tape.eval(Primitive::Div, &[a, z]), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let a = tape.var(Mat::from_element(2, 2, 1.0));
        assert!(matches!(tape.gradient(a.exp()), Err(Error::NonScalarOutput { rows: 2, cols: 2 })));
    }

    #[test]
    fn affine_and_sum_gradients() {
        let tape = Tape::new();
        let x = tape.var(Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]));
        let w = tape.var(Mat::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
        let b = tape.var(Mat::from_row_slice(1, 2, &[1.0, -1.0]));
        let y = tape.eval(Primitive::Affine, &[x, w, b]).unwrap();
        let s = tape.eval(Primitive::Sum, &[y]).unwrap();
        let g = tape.gradient(s).unwrap();
        // d/db = number of rows; d/dW = column sums of x broadcast
        assert_eq!(g.wrt(b), Mat::from_row_slice(1, 2, &[2.0, 2.0]));
        assert_eq!(g.wrt(w), Mat::from_row_slice(3, 2, &[0.0, 0.0, 2.5, 2.5, 5.0, 5.0]));
        assert!((g.wrt(x) - Mat::from_row_slice(2, 3, &[0.3, 0.1, -0.1, 0.3, 0.1, -0.1])).amax() < 1e-15);
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let tape = Tape::new();
        let x = tape.var(Mat::from_element(3, 2, 2.0));
        let row = tape.var(Mat::from_row_slice(1, 2, &[1.0, 3.0]));
        let col = tape.var(Mat::from_element(3, 1, 0.5));
        let y = ((x * row) + col).sum();
        let g = tape.gradient(y).unwrap();
        assert_eq!(g.wrt(row), Mat::from_row_slice(1, 2, &[6.0, 6.0]));
        assert_eq!(g.wrt(col), Mat::from_element(3, 1, 2.0));
        assert_eq!(g.wrt(x), Mat::from_fn(3, 2, |_, j| [1.0, 3.0][j]));
    }

    #[test]
    fn gather_and_concat_round_trip_gradients() {
        let tape = Tape::new();
        let x = tape.var(Mat::from_fn(2, 4, |i, j| (i * 4 + j) as f64));
        let a = x.gather_cols(&[3, 0]);
        let b = x.gather_rows(&[1, 1]);
        let y = Var::concat_cols(&[a, a.square()]).sum() + b.sum();
        let g = tape.gradient(y).unwrap().wrt(x);
        // column 3: 1 + 2x; column 0 likewise; row 1 gets +2 from gather_rows
        assert_eq!(g[(0, 3)], 1.0 + 2.0 * 3.0);
        assert_eq!(g[(1, 0)], 1.0 + 2.0 * 4.0 + 2.0);
        assert_eq!(g[(0, 1)], 0.0);
        assert_eq!(g[(1, 2)], 2.0);
    }

    #[test]
    fn jacobian_of_identity_and_linear_maps() {
        let j = jacobian(|_, x| Ok(x), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(j, Mat::identity(3, 3));
        let w = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let wt = w.transpose();
        let j = jacobian(move |t, x| Ok(x.matmul(t.constant(wt.clone()))), &[0.3, -0.2, 0.9]).unwrap();
        assert_eq!(j, w);
    }

    #[test]
    fn jacobian_of_column_output() {
        let j = jacobian(|t, x| Ok(t.constant(Mat::from_row_slice(2, 1, &[1.0, 2.0])) * x.sum()), &[1.0, 1.0])
            .unwrap();
        assert_eq!(j, Mat::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]));
    }

    fn hr<F>(f: F) -> F
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
    {
        f
    }

    #[test]
    fn gradient_check_polynomial_and_kink() {
        let poly = hr(|_, x| Ok((x.square() * x + x * 2.0).sum()));
        let r = gradient_check(poly, &[0.7, -1.3, 2.0], 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-7, "{r:?}");
        assert!(!r.nondifferentiable());

        let kink = hr(|_, x| Ok(x.abs().sum()));
        let r = gradient_check(kink, &[0.0, 1.0], 1e-5).unwrap();
        assert_eq!(r.kinks, vec![0]);
        assert!(gradient_check(kink, &[1.0], 0.0).is_err());
    }

    #[test]
    fn gradient_check_tanh_network() {
        let w1 = Mat::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let w2 = Mat::from_fn(5, 1, |i, _| (i as f64 * 0.91).cos());
        let net = hr(move |t, x| {
            let h = x.matmul(t.constant(w1.clone())).tanh();
            Ok(h.matmul(t.constant(w2.clone())).tanh().sum())
        });
        let r = gradient_check(net, &[0.2, -0.4, 0.9], 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn jacobian_of_composition_is_product() {
        let a = Mat::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.7).cos());
        let b = Mat::from_fn(3, 3, |i, j| ((i + 2 * j) as f64 * 0.3).sin());
        let (a1, b1) = (a.clone(), b.clone());
        let g = hr(move |t, x| Ok(x.matmul(t.constant(a1.clone())).tanh()));
        let h = hr(move |t, x| Ok(x.matmul(t.constant(b1.clone())).exp()));
        let p = [0.1, 0.5, -0.3];
        let jg = jacobian(&g, &p).unwrap();
        let gp: Vec<f64> = {
            let t = Tape::new();
            g(&t, t.row_var(&p)).unwrap().value().iter().cloned().collect()
        };
        let jh = jacobian(&h, &gp).unwrap();
        let (a2, b2) = (a, b);
        let composed = hr(move |t, x| {
            let y = x.matmul(t.constant(a2.clone())).tanh();
            Ok(y.matmul(t.constant(b2.clone())).exp())
        });
        let jc = jacobian(composed, &p).unwrap();
        let prod = jh * jg;
        assert!((&jc - &prod).norm() / prod.norm() <= 1e-6);
    }

    proptest! {
        #[test]
        fn gradient_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
            fn f(v: Var<'_>) -> Var<'_> { (v.square() * v).sum() }
            fn g(v: Var<'_>) -> Var<'_> { v.tanh().sum() }
            let tape = Tape::new();
            let p = tape.row_var(&[x, y]);
            let combo = f(p) * alpha + g(p) * beta;
            let gc = tape.gradient(combo).unwrap().wrt(p);
            let gf = tape.gradient(f(p)).unwrap().wrt(p);
            let gg = tape.gradient(g(p)).unwrap().wrt(p);
            let expect = gf * alpha + gg * beta;
            prop_assert!((gc - expect).norm() < 1e-12);
        }
    }
}

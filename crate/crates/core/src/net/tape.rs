//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every recorded node stores its value, the operation that produced it and
//! one `(parent, local partial)` edge per differentiable input. A backward
//! sweep walks the tape from the top and accumulates adjoints along the
//! stored edges, so the cost of a gradient is proportional to the number of
//! recorded edges regardless of how many parameters are involved.
//!
//! Code that must run both plainly and under differentiation is written
//! against the [`Real`] trait, which is implemented by `f64` and by [`Var`].
//! Constants lifted into [`Var`] carry no tape and are never recorded, so
//! arithmetic that does not touch a parameter costs nothing on the tape.
//!
//! Fused kernels (affine neurons, finite-difference stencils, Euler steps)
//! go through [`Real::custom`]: the caller supplies the value and the local
//! partials and a single node with many parents is recorded.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

const CONST: u32 = u32::MAX;

/// Operation that produced a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Softplus,
    Sigmoid,
    Tanh,
    Max,
    Min,
    Dot,
    Sum,
    Custom,
}

#[derive(Default)]
struct Inner {
    ops: Vec<Op>,
    values: Vec<f64>,
    // edges of node k live in parents/partials[edge_start[k]..edge_start[k + 1]]
    edge_start: Vec<usize>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

impl Inner {
    fn push(&mut self, op: Op, value: f64) -> u32 {
        if self.edge_start.is_empty() {
            self.edge_start.push(0);
        }
        let idx = self.values.len();
        assert!(idx < CONST as usize, "tape exceeded u32 node capacity");
        self.ops.push(op);
        self.values.push(value);
        self.edge_start.push(self.parents.len());
        idx as u32
    }

    fn edge(&mut self, parent: u32, partial: f64) {
        self.parents.push(parent);
        self.partials.push(partial);
        *self.edge_start.last_mut().expect("node pushed") = self.parents.len();
    }
}

/// Single-writer recording of a computation.
///
/// Use one tape per worker thread; a `Tape` is deliberately `!Sync`.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.values.len())
            .field("edges", &inner.parents.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut edge_start = Vec::with_capacity(nodes + 1);
        edge_start.push(0);
        Tape {
            inner: RefCell::new(Inner {
                ops: Vec::with_capacity(nodes),
                values: Vec::with_capacity(nodes),
                edge_start,
                parents: Vec::with_capacity(edges),
                partials: Vec::with_capacity(edges),
            }),
        }
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(Op::Leaf, value);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edge_count(&self) -> usize {
        self.inner.borrow().parents.len()
    }

    /// Drops every node but keeps the allocations.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.ops.clear();
        inner.values.clear();
        inner.edge_start.clear();
        inner.parents.clear();
        inner.partials.clear();
    }

    pub fn op(&self, node: usize) -> Op {
        self.inner.borrow().ops[node]
    }

    pub fn value(&self, node: usize) -> f64 {
        self.inner.borrow().values[node]
    }

    /// `(parent, local partial)` edges of a node.
    pub fn edges(&self, node: usize) -> Vec<(usize, f64)> {
        let inner = self.inner.borrow();
        let (a, b) = (inner.edge_start[node], inner.edge_start[node + 1]);
        (a..b).map(|e| (inner.parents[e] as usize, inner.partials[e])).collect()
    }

    /// Full adjoint vector for a weighted sum of outputs.
    ///
    /// Constant outputs contribute nothing. The result has one entry per node.
    pub fn adjoints(&self, seeds: &[(Var<'_>, f64)]) -> Vec<f64> {
        let inner = self.inner.borrow();
        let n = inner.values.len();
        let mut adj = vec![0.0; n];
        let mut top = 0usize;
        for (v, w) in seeds {
            if v.idx == CONST {
                continue;
            }
            self.check_owner(v);
            adj[v.idx as usize] += *w;
            top = top.max(v.idx as usize + 1);
        }
        for k in (0..top).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let (lo, hi) = (inner.edge_start[k], inner.edge_start[k + 1]);
            for e in lo..hi {
                adj[inner.parents[e] as usize] += a * inner.partials[e];
            }
        }
        adj
    }

    /// Vector-Jacobian product `Σ_k seeds[k]·∂outputs[k]/∂wrt`.
    pub fn vjp(&self, outputs: &[Var<'_>], seeds: &[f64], wrt: &[Var<'_>]) -> Vec<f64> {
        assert_eq!(outputs.len(), seeds.len(), "one seed per output");
        let pairs: Vec<_> = outputs.iter().copied().zip(seeds.iter().copied()).collect();
        let adj = self.adjoints(&pairs);
        gather(&adj, wrt)
    }

    /// Gradient of one scalar output.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(&[(output, 1.0)]);
        gather(&adj, wrt)
    }

    /// Gradient with an explicit scalar-output check.
    pub fn grad(&self, outputs: &[Var<'_>], wrt: &[Var<'_>]) -> Result<Vec<f64>> {
        match outputs {
            [single] => Ok(self.gradient(*single, wrt)),
            _ => Err(Error::Contract(format!(
                "gradient requires a scalar output, got {} outputs",
                outputs.len()
            ))),
        }
    }

    fn check_owner(&self, v: &Var<'_>) {
        if let Some(t) = v.tape {
            debug_assert!(std::ptr::eq(t, self), "variable belongs to another tape");
        }
    }

    fn record(&self, op: Op, value: f64, parents: &[(Var<'_>, f64)]) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.push(op, value);
        for (p, d) in parents {
            if p.idx != CONST {
                debug_assert!(p.idx < idx);
                inner.edge(p.idx, *d);
            }
        }
        idx
    }
}

fn gather(adj: &[f64], wrt: &[Var<'_>]) -> Vec<f64> {
    wrt.iter()
        .map(|v| if v.idx == CONST { 0.0 } else { adj[v.idx as usize] })
        .collect()
}

/// A value that may be recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == CONST {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var {
            tape: None,
            idx: CONST,
            val: value,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    /// Tape node index, `None` for constants.
    pub fn node(&self) -> Option<usize> {
        (self.idx != CONST).then_some(self.idx as usize)
    }

    fn make(op: Op, value: f64, parents: &[(Var<'t>, f64)]) -> Var<'t> {
        match parents.iter().find_map(|(p, _)| p.tape) {
            None => Var::constant(value),
            Some(tape) => Var {
                tape: Some(tape),
                idx: tape.record(op, value, parents),
                val: value,
            },
        }
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Scalar arithmetic shared by plain and differentiated code paths.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(value: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    /// Ties resolve to `self`: `d max(a, b)/da = 1` when `a >= b`.
    fn max(self, other: Self) -> Self;
    /// Ties resolve to `self`.
    fn min(self, other: Self) -> Self;
    /// Node with caller-supplied value and local partials.
    fn custom(value: f64, parents: &[(Self, f64)]) -> Self;
    /// `bias + Σ w_k x_k` as one node.
    fn dot(w: &[Self], x: &[Self], bias: Self) -> Self;
    fn sum(xs: &[Self]) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn cst(value: f64) -> Self {
        value
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn custom(value: f64, _parents: &[(Self, f64)]) -> Self {
        value
    }
    #[inline]
    fn dot(w: &[Self], x: &[Self], bias: Self) -> Self {
        w.iter().zip(x).fold(bias, |acc, (a, b)| acc + a * b)
    }
    #[inline]
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
}

impl<'t> Real for Var<'t> {
    fn cst(value: f64) -> Self {
        Var::constant(value)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let v = self.val.exp();
        Var::make(Op::Exp, v, &[(self, v)])
    }
    fn ln(self) -> Self {
        Var::make(Op::Ln, self.val.ln(), &[(self, 1.0 / self.val)])
    }
    fn sqrt(self) -> Self {
        let v = self.val.sqrt();
        Var::make(Op::Sqrt, v, &[(self, 0.5 / v)])
    }
    fn softplus(self) -> Self {
        Var::make(Op::Softplus, softplus(self.val), &[(self, sigmoid(self.val))])
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        Var::make(Op::Sigmoid, s, &[(self, s * (1.0 - s))])
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        Var::make(Op::Tanh, t, &[(self, 1.0 - t * t)])
    }
    fn max(self, other: Self) -> Self {
        if self.val >= other.val {
            Var::make(Op::Max, self.val, &[(self, 1.0)])
        } else {
            Var::make(Op::Max, other.val, &[(other, 1.0)])
        }
    }
    fn min(self, other: Self) -> Self {
        if self.val <= other.val {
            Var::make(Op::Min, self.val, &[(self, 1.0)])
        } else {
            Var::make(Op::Min, other.val, &[(other, 1.0)])
        }
    }
    fn custom(value: f64, parents: &[(Self, f64)]) -> Self {
        Var::make(Op::Custom, value, parents)
    }
    fn dot(w: &[Self], x: &[Self], bias: Self) -> Self {
        debug_assert_eq!(w.len(), x.len());
        let mut value = bias.val;
        let mut edges = Vec::with_capacity(2 * w.len() + 1);
        edges.push((bias, 1.0));
        for (a, b) in w.iter().zip(x) {
            value += a.val * b.val;
            edges.push((*a, b.val));
            edges.push((*b, a.val));
        }
        Var::make(Op::Dot, value, &edges)
    }
    fn sum(xs: &[Self]) -> Self {
        let value = xs.iter().map(|x| x.val).sum();
        let edges: Vec<_> = xs.iter().map(|&x| (x, 1.0)).collect();
        Var::make(Op::Sum, value, &edges)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        Var::make(Op::Add, self.val + rhs.val, &[(self, 1.0), (rhs, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        Var::make(Op::Sub, self.val - rhs.val, &[(self, 1.0), (rhs, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        Var::make(Op::Mul, self.val * rhs.val, &[(self, rhs.val), (rhs, self.val)])
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        Var::make(Op::Div, q, &[(self, 1.0 / rhs.val), (rhs, -q / rhs.val)])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        Var::make(Op::Neg, -self.val, &[(self, -1.0)])
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        Var::make(Op::Add, self.val + rhs, &[(self, 1.0)])
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        Var::make(Op::Sub, self.val - rhs, &[(self, 1.0)])
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        Var::make(Op::Mul, self.val * rhs, &[(self, rhs)])
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        Var::make(Op::Div, self.val / rhs, &[(self, 1.0 / rhs)])
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::make(Op::Sub, self - rhs.val, &[(rhs, -1.0)])
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self / rhs.val;
        Var::make(Op::Div, q, &[(rhs, -q / rhs.val)])
    }
}

//! Scalar Wengert tape with a dual-number layer on top.
//!
//! Every primitive records one node holding its value, up to two parent
//! indices and the local partial derivatives with respect to those parents.
//! `Dual2` carries two forward-mode tangents whose arithmetic is itself
//! recorded on the tape, so reverse accumulation over a function of the
//! tangents yields second-order mixed partials.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq)]
enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset(f64),
    Relu,
    Tanh,
    Exp,
    Sqrt,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: OpKind,
    parents: [u32; 2],
    partials: [f64; 2],
    value: f64,
}

#[derive(Debug, Default)]
struct TapeInner {
    id: u64,
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Append-only record of scalar operations.
///
/// A tape is single-writer: `Var` handles borrow it and recording goes
/// through a `RefCell`, so it cannot be shared across threads.
#[derive(Debug)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

static NEXT_TAPE_ID: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

impl Tape {
    pub fn new() -> Self {
        let id = NEXT_TAPE_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Tape {
            inner: RefCell::new(TapeInner {
                id,
                nodes: Vec::new(),
                first_non_finite: None,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding `Var`s become invalid.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.first_non_finite = None;
        inner.id = NEXT_TAPE_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }

    /// Records a leaf. Non-finite values are rejected.
    pub fn record(&self, value: f64) -> Result<Var<'_>, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { value });
        }
        Ok(self.push(OpKind::Leaf, [0, 0], [0.0, 0.0], value))
    }

    /// Records a constant leaf; identical to `record` but panics on NaN/Inf.
    /// Used for values the caller already knows to be finite.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.record(value).expect("constant must be finite")
    }

    fn push(&self, op: OpKind, parents: [u32; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        if !value.is_finite() && inner.first_non_finite.is_none() {
            inner.first_non_finite = Some(index);
        }
        inner.nodes.push(Node {
            op,
            parents,
            partials,
            value,
        });
        Var {
            tape: self,
            tape_id: inner.id,
            index: index as u32,
            value,
        }
    }

    /// Reverse accumulation from `output`. Returns one adjoint per node.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        let inner = self.inner.borrow();
        if output.tape_id != inner.id || output.index as usize >= inner.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        if let Some(node) = inner.first_non_finite {
            if node <= output.index as usize {
                return Err(AutodiffError::NonFiniteNode { node });
            }
        }
        let end = output.index as usize + 1;
        let mut adjoints = vec![0.0; inner.nodes.len()];
        adjoints[output.index as usize] = 1.0;
        for i in (0..end).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let node = &inner.nodes[i];
            match node.op {
                OpKind::Leaf => {}
                OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                    adjoints[node.parents[0] as usize] += adj * node.partials[0];
                    adjoints[node.parents[1] as usize] += adj * node.partials[1];
                }
                _ => {
                    adjoints[node.parents[0] as usize] += adj * node.partials[0];
                }
            }
        }
        Ok(Gradients {
            tape_id: inner.id,
            adjoints,
        })
    }

    /// Recomputes every node from the leaf values currently on the tape.
    pub fn replay(&self) -> Vec<f64> {
        let inner = self.inner.borrow();
        let mut values: Vec<f64> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let a = values.get(node.parents[0] as usize).copied().unwrap_or(0.0);
            let b = values.get(node.parents[1] as usize).copied().unwrap_or(0.0);
            let v = match node.op {
                OpKind::Leaf => node.value,
                OpKind::Add => a + b,
                OpKind::Sub => a - b,
                OpKind::Mul => a * b,
                OpKind::Div => a / b,
                OpKind::Neg => -a,
                OpKind::Scale(c) => a * c,
                OpKind::Offset(c) => a + c,
                OpKind::Relu => {
                    if a > 0.0 {
                        a
                    } else {
                        0.0
                    }
                }
                OpKind::Tanh => a.tanh(),
                OpKind::Exp => a.exp(),
                OpKind::Sqrt => a.sqrt(),
            };
            values.push(v);
        }
        values
    }

    /// Values as recorded, in node order.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().nodes.iter().map(|n| n.value).collect()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: u64,
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`; zero for nodes the
    /// output does not depend on.
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        debug_assert_eq!(var.tape_id, self.tape_id, "var from another tape");
        self.adjoints.get(var.index as usize).copied().unwrap_or(0.0)
    }

    pub fn by_index(&self, index: usize) -> f64 {
        self.adjoints.get(index).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

/// Handle to one scalar node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    tape_id: u64,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> usize {
        self.index as usize
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn same_tape(self, other: Var<'t>) {
        assert_eq!(self.tape_id, other.tape_id, "operands recorded on different tapes");
    }

    fn unary(self, op: OpKind, partial: f64, value: f64) -> Var<'t> {
        self.tape.push(op, [self.index, 0], [partial, 0.0], value)
    }

    fn binary(self, other: Var<'t>, op: OpKind, partials: [f64; 2], value: f64) -> Var<'t> {
        self.same_tape(other);
        self.tape.push(op, [self.index, other.index], partials, value)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(OpKind::Scale(c), c, self.value * c)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(OpKind::Offset(c), 1.0, self.value + c)
    }

    /// Subgradient 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        if self.value > 0.0 {
            self.unary(OpKind::Relu, 1.0, self.value)
        } else {
            self.unary(OpKind::Relu, 0.0, 0.0)
        }
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(OpKind::Tanh, 1.0 - t * t, t)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(OpKind::Exp, e, e)
    }

    pub fn sqrt(self) -> Result<Var<'t>, AutodiffError> {
        if self.value <= 0.0 {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                value: self.value,
            });
        }
        let s = self.value.sqrt();
        Ok(self.unary(OpKind::Sqrt, 0.5 / s, s))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        if other.value == 0.0 {
            return Err(AutodiffError::DivisionByZero);
        }
        let inv = 1.0 / other.value;
        let q = self.value / other.value;
        Ok(self.binary(other, OpKind::Div, [inv, -q * inv], q))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Add, [1.0, 1.0], self.value + rhs.value)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Sub, [1.0, -1.0], self.value - rhs.value)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Mul, [rhs.value, self.value], self.value * rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(OpKind::Neg, -1.0, -self.value)
    }
}

/// Sum of a non-empty slice of vars.
pub fn sum<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let mut it = vars.iter().copied();
    let first = it.next().expect("sum of empty slice");
    it.fold(first, |acc, v| acc + v)
}

pub fn dot<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    let prods: Vec<Var<'t>> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    sum(&prods)
}

pub fn cross3<'t>(a: [Var<'t>; 3], b: [Var<'t>; 3]) -> [Var<'t>; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Euclidean norm; errors on the zero vector.
pub fn norm<'t>(a: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
    let sq = dot(a, a);
    if sq.value() == 0.0 {
        return Err(AutodiffError::ZeroNorm);
    }
    sq.sqrt()
}

/// A scalar with tangents along the two input coordinates `u` and `v`.
/// All three components are tape variables.
#[derive(Debug, Clone, Copy)]
pub struct Dual2<'t> {
    pub primal: Var<'t>,
    pub tangent_u: Var<'t>,
    pub tangent_v: Var<'t>,
}

impl<'t> Dual2<'t> {
    pub fn new(primal: Var<'t>, tangent_u: Var<'t>, tangent_v: Var<'t>) -> Self {
        primal.same_tape(tangent_u);
        primal.same_tape(tangent_v);
        Dual2 {
            primal,
            tangent_u,
            tangent_v,
        }
    }

    /// A value independent of (u, v): both tangents are recorded zeros.
    pub fn constant(primal: Var<'t>) -> Self {
        let zero = primal.tape.constant(0.0);
        Dual2::new(primal, zero, zero)
    }

    /// Seeds the input coordinate `u` (tangent (1, 0)).
    pub fn seed_u(primal: Var<'t>) -> Self {
        let t = primal.tape;
        Dual2::new(primal, t.constant(1.0), t.constant(0.0))
    }

    /// Seeds the input coordinate `v` (tangent (0, 1)).
    pub fn seed_v(primal: Var<'t>) -> Self {
        let t = primal.tape;
        Dual2::new(primal, t.constant(0.0), t.constant(1.0))
    }

    pub fn value(self) -> f64 {
        self.primal.value()
    }

    fn map(self, f_prime: Var<'t>, primal: Var<'t>) -> Self {
        Dual2::new(primal, self.tangent_u * f_prime, self.tangent_v * f_prime)
    }

    /// Multiplication by a (u, v)-independent variable such as a weight.
    pub fn scale_by(self, w: Var<'t>) -> Self {
        Dual2::new(self.primal * w, self.tangent_u * w, self.tangent_v * w)
    }

    pub fn add_var(self, b: Var<'t>) -> Self {
        Dual2::new(self.primal + b, self.tangent_u, self.tangent_v)
    }

    /// The step function is treated as locally constant; at the kink the
    /// derivative is 0.
    pub fn relu(self) -> Self {
        if self.primal.value() > 0.0 {
            let t = self.primal.tape;
            let one = t.constant(1.0);
            Dual2::new(self.primal.relu(), self.tangent_u * one, self.tangent_v * one)
        } else {
            let t = self.primal.tape;
            let zero = t.constant(0.0);
            Dual2::new(self.primal.relu(), self.tangent_u * zero, self.tangent_v * zero)
        }
    }

    pub fn tanh(self) -> Self {
        let y = self.primal.tanh();
        let d = (y * y).neg().offset(1.0);
        self.map(d, y)
    }

    pub fn exp(self) -> Self {
        let y = self.primal.exp();
        self.map(y, y)
    }

    pub fn sqrt(self) -> Result<Self, AutodiffError> {
        let y = self.primal.sqrt()?;
        let d = y.tape.constant(0.5).div(y)?;
        Ok(self.map(d, y))
    }

    pub fn div(self, rhs: Dual2<'t>) -> Result<Self, AutodiffError> {
        let q = self.primal.div(rhs.primal)?;
        let du = (self.tangent_u - q * rhs.tangent_u).div(rhs.primal)?;
        let dv = (self.tangent_v - q * rhs.tangent_v).div(rhs.primal)?;
        Ok(Dual2::new(q, du, dv))
    }
}

impl<'t> Add for Dual2<'t> {
    type Output = Dual2<'t>;
    fn add(self, rhs: Dual2<'t>) -> Dual2<'t> {
        Dual2::new(
            self.primal + rhs.primal,
            self.tangent_u + rhs.tangent_u,
            self.tangent_v + rhs.tangent_v,
        )
    }
}

impl<'t> Sub for Dual2<'t> {
    type Output = Dual2<'t>;
    fn sub(self, rhs: Dual2<'t>) -> Dual2<'t> {
        Dual2::new(
            self.primal - rhs.primal,
            self.tangent_u - rhs.tangent_u,
            self.tangent_v - rhs.tangent_v,
        )
    }
}

impl<'t> Mul for Dual2<'t> {
    type Output = Dual2<'t>;
    fn mul(self, rhs: Dual2<'t>) -> Dual2<'t> {
        Dual2::new(
            self.primal * rhs.primal,
            self.tangent_u * rhs.primal + self.primal * rhs.tangent_u,
            self.tangent_v * rhs.primal + self.primal * rhs.tangent_v,
        )
    }
}

impl<'t> Neg for Dual2<'t> {
    type Output = Dual2<'t>;
    fn neg(self) -> Dual2<'t> {
        Dual2::new(-self.primal, -self.tangent_u, -self.tangent_v)
    }
}

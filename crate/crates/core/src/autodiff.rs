//! Differentiation engine: a scalar reverse-mode tape plus forward-mode
//! second-order dual numbers, composable with each other.
//!
//! The tape supplies gradients of scalar objectives with respect to parameter
//! vectors. [`DualSecond`] supplies first and second directional derivatives
//! with respect to scalar inputs such as the space and time coordinates of a
//! network. Because the dual components are themselves generic over [`Real`],
//! dual arithmetic performed on tape variables is recorded on the tape, so an
//! objective that contains input derivatives (a PDE residual, say) still has
//! an exact parameter gradient. This avoids third-order reverse-over-reverse
//! machinery.
//!
//! Non-smooth primitives (abs, relu) are deliberately absent: second spatial
//! derivatives must exist everywhere.

use std::cell::{RefCell, UnsafeCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::Error;
use crate::Result;

const NONE: u32 = u32::MAX;
const ZERO_IDX: u32 = 0;
const ONE_IDX: u32 = 1;

/// One recorded operation: parent indices and the local partial derivatives,
/// precomputed at record time so the reverse sweep is a pure accumulation.
/// The optional third parent carries an implicit partial of one, used by the
/// fused multiply-add that dominates dense-layer arithmetic.
#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    c: u32,
    da: f64,
    db: f64,
}

impl Node {
    #[inline]
    fn leaf() -> Self {
        Node { a: NONE, b: NONE, c: NONE, da: 0.0, db: 0.0 }
    }
}

/// Append-only list of primitive operations with adjoint storage.
///
/// The reverse sweep visits nodes in exact reverse recording order, which is a
/// reverse topological order because operands always precede results. A tape
/// is single-threaded (it is `!Sync`); independent tapes may run in parallel.
///
/// The node list lives in an `UnsafeCell` rather than a `RefCell`: recording
/// happens once per primitive arithmetic operation, where the borrow-flag
/// traffic is measurable. Soundness rests on two facts: no method ever hands
/// out a reference into the node list, and no method that touches the list
/// calls back into user code, so accesses on the single owning thread cannot
/// overlap.
pub struct Tape {
    nodes: UnsafeCell<Vec<Node>>,
    adjoint: RefCell<Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let tape = Tape {
            nodes: UnsafeCell::new(Vec::new()),
            adjoint: RefCell::new(Vec::new()),
        };
        tape.reset();
        tape
    }

    /// Clears all recorded operations, keeping allocated capacity.
    pub fn reset(&self) {
        // SAFETY: exclusive access for the duration of the call; see type docs.
        let nodes = unsafe { &mut *self.nodes.get() };
        nodes.clear();
        // Canonical constants used by folding: index 0 is zero, index 1 is one.
        nodes.push(Node::leaf());
        nodes.push(Node::leaf());
    }

    /// Number of recorded nodes (including the two canonical constants).
    pub fn len(&self) -> usize {
        // SAFETY: shared read of the length on the single owning thread.
        unsafe { (*self.nodes.get()).len() }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    fn push(&self, node: Node) -> u32 {
        // SAFETY: exclusive access for the duration of the call; see type docs.
        let nodes = unsafe { &mut *self.nodes.get() };
        let idx = nodes.len() as u32;
        nodes.push(node);
        idx
    }

    /// Registers an input (leaf) variable.
    #[inline]
    pub fn var(&self, val: f64) -> Var<'_> {
        Var { tape: self, idx: self.push(Node::leaf()), val }
    }

    /// Registers a slice of input variables.
    pub fn vars(&self, vals: &[f64]) -> Vec<Var<'_>> {
        vals.iter().map(|&v| self.var(v)).collect()
    }

    /// A constant: participates in arithmetic but receives no gradient.
    #[inline]
    pub fn constant(&self, c: f64) -> Var<'_> {
        if c == 0.0 {
            self.zero()
        } else if c == 1.0 {
            self.one()
        } else {
            Var { tape: self, idx: self.push(Node::leaf()), val: c }
        }
    }

    #[inline]
    pub fn zero(&self) -> Var<'_> {
        Var { tape: self, idx: ZERO_IDX, val: 0.0 }
    }

    #[inline]
    pub fn one(&self) -> Var<'_> {
        Var { tape: self, idx: ONE_IDX, val: 1.0 }
    }

    /// Reverse sweep from `output`, returning the adjoints of `inputs`.
    pub fn gradient(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let mut out = vec![0.0; inputs.len()];
        self.gradient_into(output, inputs, &mut out);
        out
    }

    /// Reverse sweep writing into a caller-provided buffer.
    pub fn gradient_into(&self, output: Var<'_>, inputs: &[Var<'_>], out: &mut [f64]) {
        debug_assert!(std::ptr::eq(output.tape, self));
        // SAFETY: shared read; no recording happens during the sweep.
        let nodes = unsafe { &*self.nodes.get() };
        let mut adj = self.adjoint.borrow_mut();
        adj.clear();
        adj.resize(nodes.len(), 0.0);
        adj[output.idx as usize] = 1.0;
        for i in (2..nodes.len()).rev() {
            let w = adj[i];
            if w == 0.0 {
                continue;
            }
            let n = nodes[i];
            if n.a != NONE {
                adj[n.a as usize] += n.da * w;
            }
            if n.b != NONE {
                adj[n.b as usize] += n.db * w;
            }
            if n.c != NONE {
                adj[n.c as usize] += w;
            }
        }
        for (o, v) in out.iter_mut().zip(inputs) {
            *o = adj[v.idx as usize];
        }
    }
}

/// A scalar variable on a [`Tape`]. Carries its value inline; the index is
/// only used for adjoint bookkeeping during the reverse sweep.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    #[inline]
    fn is_zero_const(self) -> bool {
        self.idx == ZERO_IDX
    }

    #[inline]
    fn is_one_const(self) -> bool {
        self.idx == ONE_IDX
    }

    #[inline]
    fn unary(self, val: f64, da: f64) -> Var<'t> {
        Var {
            tape: self.tape,
            idx: self.tape.push(Node { a: self.idx, b: NONE, c: NONE, da, db: 0.0 }),
            val,
        }
    }

    #[inline]
    fn binary(self, other: Var<'t>, val: f64, da: f64, db: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        Var {
            tape: self.tape,
            idx: self.tape.push(Node { a: self.idx, b: other.idx, c: NONE, da, db }),
            val,
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.is_zero_const() {
            return self;
        }
        if self.is_zero_const() {
            return rhs;
        }
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.is_zero_const() {
            return self;
        }
        if self.is_zero_const() {
            return -rhs;
        }
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        if self.is_zero_const() || rhs.is_zero_const() {
            return self.tape.zero();
        }
        if self.is_one_const() {
            return rhs;
        }
        if rhs.is_one_const() {
            return self;
        }
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if self.is_zero_const() {
            return self.tape.zero();
        }
        if rhs.is_one_const() {
            return self;
        }
        let inv = 1.0 / rhs.val;
        self.binary(rhs, self.val * inv, inv, -self.val * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Var<'t> {
        if self.is_zero_const() {
            return self;
        }
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, c: f64) -> Var<'t> {
        // A constant shift leaves the adjoint relationship unchanged, so the
        // result can alias the operand's node.
        Var { tape: self.tape, idx: self.idx, val: self.val + c }
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, c: f64) -> Var<'t> {
        Var { tape: self.tape, idx: self.idx, val: self.val - c }
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, c: f64) -> Var<'t> {
        if c == 0.0 {
            return self.tape.zero();
        }
        if c == 1.0 {
            return self;
        }
        self.unary(self.val * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, c: f64) -> Var<'t> {
        self * (1.0 / c)
    }
}

/// Scalar numbers the model code can be generic over: plain `f64` for
/// evaluation, [`Var`] for reverse-mode gradients, and dual types for input
/// derivatives. Arithmetic with `f64` constants is part of the surface so
/// that generic code never needs a contextual "from f64" conversion.
pub trait Real:
    Copy
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
    /// The underlying primal value.
    fn value(&self) -> f64;

    /// A constant of the same provenance as `self` (same tape, zero derivatives).
    fn lit(&self, c: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn recip(self) -> Self;

    /// `self * b + acc`. Tape scalars record this as one fused node, which
    /// roughly halves the cost of dense accumulation loops.
    #[inline]
    fn mul_add(self, b: Self, acc: Self) -> Self {
        self * b + acc
    }

    /// Logistic function, composed from smooth primitives.
    fn sigmoid(self) -> Self {
        ((-self).exp() + 1.0).recip()
    }
}

impl Real for f64 {
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn lit(&self, c: f64) -> f64 {
        c
    }
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    #[inline]
    fn powi(self, n: i32) -> f64 {
        f64::powi(self, n)
    }
    #[inline]
    fn recip(self) -> f64 {
        1.0 / self
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn value(&self) -> f64 {
        self.val
    }
    #[inline]
    fn lit(&self, c: f64) -> Var<'t> {
        self.tape.constant(c)
    }
    #[inline]
    fn exp(self) -> Var<'t> {
        let e = self.val.exp();
        self.unary(e, e)
    }
    #[inline]
    fn ln(self) -> Var<'t> {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    #[inline]
    fn sqrt(self) -> Var<'t> {
        let r = self.val.sqrt();
        self.unary(r, 0.5 / r)
    }
    #[inline]
    fn tanh(self) -> Var<'t> {
        let th = self.val.tanh();
        self.unary(th, 1.0 - th * th)
    }
    #[inline]
    fn powi(self, n: i32) -> Var<'t> {
        match n {
            0 => self.tape.one(),
            1 => self,
            _ => self.unary(self.val.powi(n), n as f64 * self.val.powi(n - 1)),
        }
    }
    #[inline]
    fn recip(self) -> Var<'t> {
        let inv = 1.0 / self.val;
        self.unary(inv, -inv * inv)
    }

    #[inline]
    fn mul_add(self, b: Var<'t>, acc: Var<'t>) -> Var<'t> {
        if self.is_zero_const() || b.is_zero_const() {
            return acc;
        }
        if acc.is_zero_const() {
            return self * b;
        }
        if self.is_one_const() {
            return b + acc;
        }
        if b.is_one_const() {
            return self + acc;
        }
        Var {
            tape: self.tape,
            idx: self.tape.push(Node {
                a: self.idx,
                b: b.idx,
                c: acc.idx,
                da: b.val,
                db: self.val,
            }),
            val: self.val * b.val + acc.val,
        }
    }
}

/// Forward-mode number carrying a value and first and second directional
/// derivatives. Arithmetic follows truncated-Taylor rules, e.g.
/// `(a*b).d2 = a.d2*b.value + 2*a.d1*b.d1 + a.value*b.d2`.
#[derive(Clone, Copy, Debug)]
pub struct DualSecond<T> {
    pub value: T,
    pub d1: T,
    pub d2: T,
}

impl<T: Real> DualSecond<T> {
    /// A constant: zero first and second derivative.
    #[inline]
    pub fn constant(x: T) -> Self {
        DualSecond { value: x, d1: x.lit(0.0), d2: x.lit(0.0) }
    }

    /// The seed variable of the differentiation direction (d1 = 1).
    #[inline]
    pub fn seed(x: T) -> Self {
        DualSecond { value: x, d1: x.lit(1.0), d2: x.lit(0.0) }
    }
}

impl<T: Real> Add for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        DualSecond {
            value: self.value + rhs.value,
            d1: self.d1 + rhs.d1,
            d2: self.d2 + rhs.d2,
        }
    }
}

impl<T: Real> Sub for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        DualSecond {
            value: self.value - rhs.value,
            d1: self.d1 - rhs.d1,
            d2: self.d2 - rhs.d2,
        }
    }
}

impl<T: Real> Mul for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        DualSecond {
            value: self.value * rhs.value,
            d1: self.d1 * rhs.value + self.value * rhs.d1,
            d2: self.d2 * rhs.value + self.d1 * rhs.d1 * 2.0 + self.value * rhs.d2,
        }
    }
}

impl<T: Real> Div for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let value = self.value / rhs.value;
        let d1 = (self.d1 - value * rhs.d1) / rhs.value;
        let d2 = (self.d2 - d1 * rhs.d1 * 2.0 - value * rhs.d2) / rhs.value;
        DualSecond { value, d1, d2 }
    }
}

impl<T: Real> Neg for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        DualSecond { value: -self.value, d1: -self.d1, d2: -self.d2 }
    }
}

impl<T: Real> Add<f64> for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        DualSecond { value: self.value + c, ..self }
    }
}

impl<T: Real> Sub<f64> for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        DualSecond { value: self.value - c, ..self }
    }
}

impl<T: Real> Mul<f64> for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        DualSecond { value: self.value * c, d1: self.d1 * c, d2: self.d2 * c }
    }
}

impl<T: Real> Div<f64> for DualSecond<T> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self * (1.0 / c)
    }
}

impl<T: Real> Real for DualSecond<T> {
    #[inline]
    fn value(&self) -> f64 {
        self.value.value()
    }

    #[inline]
    fn lit(&self, c: f64) -> Self {
        DualSecond {
            value: self.value.lit(c),
            d1: self.value.lit(0.0),
            d2: self.value.lit(0.0),
        }
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        DualSecond {
            value: e,
            d1: e * self.d1,
            d2: e * (self.d2 + self.d1 * self.d1),
        }
    }

    #[inline]
    fn ln(self) -> Self {
        let d1 = self.d1 / self.value;
        DualSecond {
            value: self.value.ln(),
            d1,
            d2: (self.d2 - d1 * self.d1) / self.value,
        }
    }

    #[inline]
    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        let d1 = self.d1 / (r * 2.0);
        DualSecond {
            value: r,
            d1,
            d2: (self.d2 - d1 * d1 * 2.0) / (r * 2.0),
        }
    }

    #[inline]
    fn tanh(self) -> Self {
        let th = self.value.tanh();
        let g = -(th * th - 1.0); // sech^2
        let gg = (th * g) * -2.0; // second derivative of tanh
        DualSecond {
            value: th,
            d1: g * self.d1,
            d2: gg * (self.d1 * self.d1) + g * self.d2,
        }
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        match n {
            0 => self.lit(1.0),
            1 => self,
            _ => {
                let pm1 = self.value.powi(n - 1);
                let pm2 = self.value.powi(n - 2);
                DualSecond {
                    value: self.value.powi(n),
                    d1: pm1 * (n as f64) * self.d1,
                    d2: pm2 * ((n * (n - 1)) as f64) * (self.d1 * self.d1)
                        + pm1 * (n as f64) * self.d2,
                }
            }
        }
    }

    #[inline]
    fn recip(self) -> Self {
        let r = self.value.recip();
        let r2 = r * r;
        DualSecond {
            value: r,
            d1: -(r2 * self.d1),
            d2: r2 * r * (self.d1 * self.d1) * 2.0 - r2 * self.d2,
        }
    }

    #[inline]
    fn mul_add(self, b: Self, acc: Self) -> Self {
        DualSecond {
            value: self.value.mul_add(b.value, acc.value),
            d1: self.d1.mul_add(b.value, self.value.mul_add(b.d1, acc.d1)),
            d2: self.d2.mul_add(
                b.value,
                (self.d1 * 2.0).mul_add(b.d1, self.value.mul_add(b.d2, acc.d2)),
            ),
        }
    }
}

/// First-order dual used internally for single-direction derivatives where
/// the second-order component would be wasted work.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DualFirst<T> {
    pub value: T,
    pub d1: T,
}

impl<T: Real> DualFirst<T> {
    #[inline]
    pub fn constant(x: T) -> Self {
        DualFirst { value: x, d1: x.lit(0.0) }
    }

    #[inline]
    pub fn seed(x: T) -> Self {
        DualFirst { value: x, d1: x.lit(1.0) }
    }
}

impl<T: Real> Add for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        DualFirst { value: self.value + rhs.value, d1: self.d1 + rhs.d1 }
    }
}

impl<T: Real> Sub for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        DualFirst { value: self.value - rhs.value, d1: self.d1 - rhs.d1 }
    }
}

impl<T: Real> Mul for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        DualFirst {
            value: self.value * rhs.value,
            d1: self.d1 * rhs.value + self.value * rhs.d1,
        }
    }
}

impl<T: Real> Div for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let value = self.value / rhs.value;
        DualFirst { value, d1: (self.d1 - value * rhs.d1) / rhs.value }
    }
}

impl<T: Real> Neg for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        DualFirst { value: -self.value, d1: -self.d1 }
    }
}

impl<T: Real> Add<f64> for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        DualFirst { value: self.value + c, ..self }
    }
}

impl<T: Real> Sub<f64> for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        DualFirst { value: self.value - c, ..self }
    }
}

impl<T: Real> Mul<f64> for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        DualFirst { value: self.value * c, d1: self.d1 * c }
    }
}

impl<T: Real> Div<f64> for DualFirst<T> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self * (1.0 / c)
    }
}

impl<T: Real> Real for DualFirst<T> {
    #[inline]
    fn value(&self) -> f64 {
        self.value.value()
    }

    #[inline]
    fn lit(&self, c: f64) -> Self {
        DualFirst { value: self.value.lit(c), d1: self.value.lit(0.0) }
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        DualFirst { value: e, d1: e * self.d1 }
    }

    #[inline]
    fn ln(self) -> Self {
        DualFirst { value: self.value.ln(), d1: self.d1 / self.value }
    }

    #[inline]
    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        DualFirst { value: r, d1: self.d1 / (r * 2.0) }
    }

    #[inline]
    fn tanh(self) -> Self {
        let th = self.value.tanh();
        let g = -(th * th - 1.0);
        DualFirst { value: th, d1: g * self.d1 }
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        match n {
            0 => self.lit(1.0),
            1 => self,
            _ => DualFirst {
                value: self.value.powi(n),
                d1: self.value.powi(n - 1) * (n as f64) * self.d1,
            },
        }
    }

    #[inline]
    fn recip(self) -> Self {
        let r = self.value.recip();
        DualFirst { value: r, d1: -(r * r * self.d1) }
    }

    #[inline]
    fn mul_add(self, b: Self, acc: Self) -> Self {
        DualFirst {
            value: self.value.mul_add(b.value, acc.value),
            d1: self.d1.mul_add(b.value, self.value.mul_add(b.d1, acc.d1)),
        }
    }
}

/// A scalar objective of a parameter vector, generic over the scalar type so
/// it can be both evaluated and differentiated.
pub trait ParamFn {
    fn eval<R: Real>(&self, x: &[R]) -> R;
}

/// Gradient of a scalar objective at `at` by reverse-mode differentiation.
pub fn grad<F: ParamFn>(f: &F, at: &[f64]) -> Result<Vec<f64>> {
    for (i, &x) in at.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { context: "grad input".into(), index: Some(i) });
        }
    }
    let tape = Tape::new();
    let inputs = tape.vars(at);
    let out = f.eval::<Var<'_>>(&inputs);
    if !out.value().is_finite() {
        return Err(Error::NonFinite { context: "grad objective value".into(), index: None });
    }
    let g = tape.gradient(out, &inputs);
    Ok(g)
}

/// A scalar function of space, time, and a parameter vector, generic over the
/// scalar type so input derivatives can be propagated through it.
pub trait SpaceTimeFn {
    fn eval<R: Real>(&self, s: R, t: R, params: &[R]) -> R;
}

/// First and second input derivatives of a space-time function.
///
/// Returns `(u, du_dt, du_ds, d2u_ds2)`. Each output has the same scalar
/// provenance as the arguments, so calling this with tape variables leaves
/// quantities that remain differentiable with respect to the parameters.
pub fn input_derivs<R: Real, F: SpaceTimeFn + ?Sized>(
    f: &F,
    s: R,
    t: R,
    params: &[R],
) -> (R, R, R, R) {
    // Pass 1: second-order dual seeded in the s direction.
    let lifted: Vec<DualSecond<R>> = params.iter().map(|&p| DualSecond::constant(p)).collect();
    let out_s = f.eval(DualSecond::seed(s), DualSecond::constant(t), &lifted);

    // Pass 2: first-order dual seeded in the t direction.
    let lifted1: Vec<DualFirst<R>> = params.iter().map(|&p| DualFirst::constant(p)).collect();
    let out_t = f.eval(DualFirst::constant(s), DualFirst::seed(t), &lifted1);

    (out_s.value, out_t.d1, out_s.d1, out_s.d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences with step h = 1e-5 * (1 + |x|).
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-5 * (1.0 + x[i].abs());
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        let scale = a.abs().max(b.abs()).max(1.0);
        assert!(
            (a - b).abs() <= tol * scale,
            "{a} vs {b} differ beyond rel tol {tol}"
        );
    }

    struct Square;
    impl ParamFn for Square {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            x[0] * x[0]
        }
    }

    struct Product;
    impl ParamFn for Product {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            x[0] * x[1]
        }
    }

    #[test]
    fn grad_of_square() {
        assert_eq!(grad(&Square, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn grad_of_product() {
        assert_eq!(grad(&Product, &[2.0, 5.0]).unwrap(), vec![5.0, 2.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        struct Konst;
        impl ParamFn for Konst {
            fn eval<R: Real>(&self, x: &[R]) -> R {
                x[0].lit(4.25)
            }
        }
        assert_eq!(grad(&Konst, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_rejects_non_finite_input_with_index() {
        match grad(&Square, &[f64::NAN]) {
            Err(Error::NonFinite { index: Some(0), .. }) => {}
            other => panic!("expected NonFinite with index, got {other:?}"),
        }
    }

    #[test]
    fn grad_rejects_non_finite_objective() {
        struct BadLog;
        impl ParamFn for BadLog {
            fn eval<R: Real>(&self, x: &[R]) -> R {
                (-x[0]).ln() // log of a negative number
            }
        }
        assert!(grad(&BadLog, &[2.0]).is_err());
    }

    // Every primitive op's reverse gradient vs central differences at 100
    // random inputs, rel tol 1e-6.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        // `$body` is an expression over a slice `$v` of Real scalars.
        macro_rules! check {
            ($name:literal, $n:expr, $gen:expr, $v:ident, $body:expr) => {{
                let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
                for _ in 0..100 {
                    let x: Vec<f64> = (0..$n).map(|_| $gen(&mut rng)).collect();
                    let tape = Tape::new();
                    let vars = tape.vars(&x);
                    let out = {
                        let $v = &vars[..];
                        $body
                    };
                    let g = tape.gradient(out, &vars);
                    let f = |y: &[f64]| {
                        let $v = y;
                        ($body).value()
                    };
                    let fd = fd_grad(&f, &x);
                    for (a, b) in g.iter().zip(&fd) {
                        let scale = a.abs().max(b.abs()).max(1.0);
                        assert!(
                            (a - b).abs() <= 1e-6 * scale,
                            "{}: grad {a} vs fd {b} at {x:?}",
                            $name
                        );
                    }
                }
            }};
        }

        let std_range = |rng: &mut ChaCha8Rng| rng.gen_range(-2.0..2.0);
        let pos_range = |rng: &mut ChaCha8Rng| rng.gen_range(0.1..3.0);

        check!("add", 2, std_range, v, v[0] + v[1]);
        check!("sub", 2, std_range, v, v[0] - v[1]);
        check!("mul", 2, std_range, v, v[0] * v[1]);
        check!("div", 2, pos_range, v, v[0] / v[1]);
        check!("neg", 1, std_range, v, -v[0]);
        check!("exp", 1, std_range, v, v[0].exp());
        check!("ln", 1, pos_range, v, v[0].ln());
        check!("sqrt", 1, pos_range, v, v[0].sqrt());
        check!("tanh", 1, std_range, v, v[0].tanh());
        check!("powi3", 1, std_range, v, v[0].powi(3));
        check!("recip", 1, pos_range, v, v[0].recip());
        check!("sigmoid", 1, std_range, v, v[0].sigmoid());
        check!("addc", 1, std_range, v, v[0] + 1.5);
        check!("mulc", 1, std_range, v, v[0] * -2.5);
    }

    struct ToyLogDensity;
    impl ParamFn for ToyLogDensity {
        // A small tanh network squared-error pseudo log-density.
        fn eval<R: Real>(&self, x: &[R]) -> R {
            let h1 = (x[0] * 0.7 + x[1]).tanh();
            let h2 = (x[1] * -0.3 + x[2] * 1.1).tanh();
            let out = h1 * x[3] + h2 * x[4];
            let resid = out - 0.25;
            -(resid * resid) - (x[0] * x[0] + x[3] * x[3]) * 0.5
        }
    }

    #[test]
    fn composed_density_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let g = grad(&ToyLogDensity, &x).unwrap();
            let fd = fd_grad(&|y| ToyLogDensity.eval::<f64>(y), &x);
            for (a, b) in g.iter().zip(&fd) {
                assert_close(*a, *b, 1e-5);
            }
        }
    }

    struct PolyS2;
    impl SpaceTimeFn for PolyS2 {
        fn eval<R: Real>(&self, s: R, _t: R, _p: &[R]) -> R {
            s * s
        }
    }

    struct BilinearST;
    impl SpaceTimeFn for BilinearST {
        fn eval<R: Real>(&self, s: R, t: R, _p: &[R]) -> R {
            s * t
        }
    }

    #[test]
    fn input_derivs_of_polynomials_are_exact() {
        let p = [0.0f64];
        for &s in &[-1.3, 0.0, 0.8, 2.5] {
            let (u, ut, us, uss) = input_derivs(&PolyS2, s, 0.7, &p);
            assert_eq!(u, s * s);
            assert_eq!(ut, 0.0);
            assert_eq!(us, 2.0 * s);
            assert_eq!(uss, 2.0);
        }
        for &(s, t) in &[(0.5, 2.0), (-1.0, 3.0)] {
            let (u, ut, us, uss) = input_derivs(&BilinearST, s, t, &p);
            assert_eq!(u, s * t);
            assert_eq!(ut, s);
            assert_eq!(us, t);
            assert_eq!(uss, 0.0);
        }
    }

    /// A small dense tanh network used to exercise nested differentiation.
    struct TanhNet {
        widths: Vec<usize>,
    }

    impl SpaceTimeFn for TanhNet {
        fn eval<R: Real>(&self, s: R, t: R, params: &[R]) -> R {
            let mut act = vec![s, t];
            let mut off = 0;
            for (k, &w) in self.widths.iter().enumerate() {
                let mut next = Vec::with_capacity(w);
                for i in 0..w {
                    let mut z = params[off + w * act.len() + i]; // bias
                    for (j, &a) in act.iter().enumerate() {
                        z = z + params[off + i * act.len() + j] * a;
                    }
                    next.push(if k + 1 == self.widths.len() { z } else { z.tanh() });
                }
                off += w * act.len() + w;
                act = next;
            }
            act[0]
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, net: &TanhNet) -> Vec<f64> {
        let mut dim = 0;
        let mut inputs = 2;
        for &w in &net.widths {
            dim += w * inputs + w;
            inputs = w;
        }
        (0..dim).map(|_| rng.gen_range(-0.8..0.8)).collect()
    }

    #[test]
    fn input_derivs_of_tanh_network_match_nested_fd() {
        let net = TanhNet { widths: vec![16, 16, 16, 1] };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_params(&mut rng, &net);
        let (s, t) = (0.3, -0.6);
        let (u, ut, us, uss) = input_derivs(&net, s, t, &params);

        let eval = |s: f64, t: f64| net.eval::<f64>(s, t, &params);
        let h = 1e-5 * (1.0 + s.abs());
        let fd_us = (eval(s + h, t) - eval(s - h, t)) / (2.0 * h);
        let fd_uss = (eval(s + h, t) - 2.0 * eval(s, t) + eval(s - h, t)) / (h * h);
        let ht = 1e-5 * (1.0 + t.abs());
        let fd_ut = (eval(s, t + ht) - eval(s, t - ht)) / (2.0 * ht);

        assert_close(u, eval(s, t), 1e-12);
        assert_close(us, fd_us, 1e-4);
        assert_close(ut, fd_ut, 1e-4);
        assert_close(uss, fd_uss, 1e-4);
    }

    /// Objective containing input derivatives internally: a synthetic residual
    /// r = u_t + u*u_s - 0.1*u_ss summed over a few points, squared.
    struct ResidualObjective {
        net: TanhNet,
        points: Vec<(f64, f64)>,
    }

    impl ParamFn for ResidualObjective {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            let mut total = x[0].lit(0.0);
            for &(s, t) in &self.points {
                let sr = x[0].lit(s);
                let tr = x[0].lit(t);
                let (u, ut, us, uss) = input_derivs(&self.net, sr, tr, x);
                let r = ut + u * us - uss * 0.1;
                total = total + r * r;
            }
            total
        }
    }

    #[test]
    fn grad_through_input_derivs_matches_full_fd() {
        let net = TanhNet { widths: vec![4, 4, 1] };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = random_params(&mut rng, &net);
        let obj = ResidualObjective {
            net,
            points: vec![(0.2, 0.1), (-0.5, 0.4), (0.9, 0.8)],
        };
        let g = grad(&obj, &params).unwrap();
        let fd = fd_grad(&|y| obj.eval::<f64>(y), &params);
        for (a, b) in g.iter().zip(&fd) {
            assert_close(*a, *b, 1e-4);
        }
    }

    #[test]
    fn dual_second_product_rule_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = DualSecond {
                value: rng.gen_range(-2.0..2.0),
                d1: rng.gen_range(-2.0..2.0),
                d2: rng.gen_range(-2.0..2.0),
            };
            let b = DualSecond {
                value: rng.gen_range(-2.0..2.0),
                d1: rng.gen_range(-2.0..2.0),
                d2: rng.gen_range(-2.0..2.0),
            };
            let prod = a * b;
            let expected = a.d2 * b.value + 2.0 * a.d1 * b.d1 + a.value * b.d2;
            assert!((prod.d2 - expected).abs() < 1e-14);
        }
    }

    // Second-order input derivative of a degree-<=2 polynomial network is
    // exact to machine precision.
    #[test]
    fn dual_second_exact_on_quadratics() {
        struct Quadratic;
        impl SpaceTimeFn for Quadratic {
            fn eval<R: Real>(&self, s: R, t: R, p: &[R]) -> R {
                s * s * p[0] + s * t * p[1] + t * t * p[2] + s * p[3] + t * p[4] + p[5]
            }
        }
        let p = [1.5, -0.7, 0.3, 2.0, -1.0, 0.25];
        for &(s, t) in &[(0.3, -1.2), (2.0, 0.5), (-0.9, 0.1)] {
            let (u, ut, us, uss) = input_derivs(&Quadratic, s, t, &p);
            assert_eq!(u, Quadratic.eval::<f64>(s, t, &p));
            assert!((us - (2.0 * p[0] * s + p[1] * t + p[3])).abs() < 1e-13);
            assert!((ut - (p[1] * s + 2.0 * p[2] * t + p[4])).abs() < 1e-13);
            assert!((uss - 2.0 * p[0]).abs() < 1e-13);
        }
    }

    #[test]
    fn tape_reset_reuses_capacity() {
        let tape = Tape::new();
        {
            let x = tape.var(2.0);
            let y = x * x + 1.0;
            assert_eq!(tape.gradient(y, &[x]), vec![4.0]);
        }
        let len_before = tape.len();
        tape.reset();
        {
            let x = tape.var(3.0);
            let y = x.exp();
            let g = tape.gradient(y, &[x]);
            assert!((g[0] - 3.0f64.exp()).abs() < 1e-12);
        }
        assert!(tape.len() <= len_before + 1);
    }
}

//! Scalar automatic differentiation with a time tangent.
//!
//! Every [`ADScalar`] carries its primal value together with its derivative
//! with respect to the single seeded input of its [`Record`] (the time `t`).
//! The record stores, for each node, the local partials of *both* channels:
//!
//! * `primal`: d(child primal)/d(parent primal), which is also
//!   d(child tangent)/d(parent tangent);
//! * `cross`:  d(child tangent)/d(parent primal).
//!
//! The reverse sweep therefore differentiates the joint (primal, tangent)
//! computation, so a loss built from time derivatives of network outputs
//! (obtained with [`ADScalar::derivative`]) has exact parameter gradients.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Index, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },
    #[error("the record already has a seeded input")]
    AlreadySeeded,
    #[error("operand belongs to a different computation record")]
    ForeignRecord,
}

/// What produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Parameter,
    Input,
    Op,
    /// Primal is the tangent of the parent. The second time derivative is not
    /// tracked, so the tangent of such a node is zero.
    Lift,
}

#[derive(Debug, Clone, Copy)]
struct Partial {
    parent: u32,
    primal: f64,
    cross: f64,
}

#[derive(Default)]
struct Tape {
    kind: Vec<NodeKind>,
    primal: Vec<f64>,
    tangent: Vec<f64>,
    // partials of node i live in partials[offsets[i]..offsets[i + 1]]
    offsets: Vec<u32>,
    partials: Vec<Partial>,
    params: Vec<u32>,
    input: Option<u32>,
    fault: Option<AdError>,
    adj_primal: Vec<f64>,
    adj_tangent: Vec<f64>,
}

impl Tape {
    fn clear(&mut self) {
        self.kind.clear();
        self.primal.clear();
        self.tangent.clear();
        self.offsets.clear();
        self.offsets.push(0);
        self.partials.clear();
        self.params.clear();
        self.input = None;
        self.fault = None;
    }

    fn next_id(&self) -> u32 {
        self.kind.len() as u32
    }

    fn fail(&mut self, err: AdError) {
        if self.fault.is_none() {
            self.fault = Some(err);
        }
    }

    fn finish_node(&mut self, kind: NodeKind, primal: f64, tangent: f64) -> u32 {
        let id = self.next_id();
        if !(primal.is_finite() && tangent.is_finite()) {
            self.fail(AdError::NonFinite { node: id as usize });
        }
        self.kind.push(kind);
        self.primal.push(primal);
        self.tangent.push(tangent);
        self.offsets.push(self.partials.len() as u32);
        id
    }
}

/// An append-only record of a scalar computation.
///
/// Nodes are topologically ordered by construction. The first error raised
/// by an operation (division by zero, non-finite result, mixing records) is
/// latched and reported by [`Record::check`] and by the backward passes.
pub struct Record {
    tape: RefCell<Tape>,
}

impl Default for Record {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tape = self.tape.borrow();
        f.debug_struct("Record")
            .field("nodes", &tape.kind.len())
            .field("parameters", &tape.params.len())
            .field("fault", &tape.fault)
            .finish()
    }
}

impl Record {
    pub fn new() -> Self {
        let mut tape = Tape::default();
        tape.clear();
        Self {
            tape: RefCell::new(tape),
        }
    }

    /// Drops every node while keeping the allocations.
    pub fn reset(&mut self) {
        self.tape.get_mut().clear();
    }

    pub fn register_parameter(&self, value: f64) -> ADScalar<'_> {
        let mut tape = self.tape.borrow_mut();
        let id = tape.finish_node(NodeKind::Parameter, value, 0.0);
        tape.params.push(id);
        ADScalar {
            primal: value,
            tangent: 0.0,
            node: Some(NodeRef { record: self, id }),
        }
    }

    /// Registers a block of parameters in order.
    pub fn register_parameters(&self, values: &[f64]) -> Vec<ADScalar<'_>> {
        let mut tape = self.tape.borrow_mut();
        values
            .iter()
            .map(|&value| {
                let id = tape.finish_node(NodeKind::Parameter, value, 0.0);
                tape.params.push(id);
                ADScalar {
                    primal: value,
                    tangent: 0.0,
                    node: Some(NodeRef { record: self, id }),
                }
            })
            .collect()
    }

    /// Seeds the time input. Only one input may be seeded per record.
    pub fn seed_input(&self, value: f64) -> Result<ADScalar<'_>, AdError> {
        let mut tape = self.tape.borrow_mut();
        if tape.input.is_some() {
            return Err(AdError::AlreadySeeded);
        }
        let id = tape.finish_node(NodeKind::Input, value, 1.0);
        tape.input = Some(id);
        Ok(ADScalar {
            primal: value,
            tangent: 1.0,
            node: Some(NodeRef { record: self, id }),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tape.borrow().params.len()
    }

    pub fn node_count(&self) -> usize {
        self.tape.borrow().kind.len()
    }

    pub fn node_kind(&self, id: usize) -> Option<NodeKind> {
        self.tape.borrow().kind.get(id).copied()
    }

    /// Returns the first latched error, if any.
    pub fn check(&self) -> Result<(), AdError> {
        match &self.tape.borrow().fault {
            Some(err) => Err(err.clone()),
            None => Ok(()),
        }
    }

    /// Gradient of `output`'s primal with respect to every registered parameter.
    pub fn backward(&self, output: ADScalar<'_>) -> Result<GradientVector, AdError> {
        let mut grad = vec![0.0; self.parameter_count()];
        self.accumulate_gradient(output, 1.0, 0.0, &mut grad)?;
        Ok(GradientVector(grad))
    }

    /// Gradient of `output`'s time tangent with respect to every registered parameter.
    pub fn backward_tangent(&self, output: ADScalar<'_>) -> Result<GradientVector, AdError> {
        let mut grad = vec![0.0; self.parameter_count()];
        self.accumulate_gradient(output, 0.0, 1.0, &mut grad)?;
        Ok(GradientVector(grad))
    }

    /// Adds `seed_primal * d(primal)/dθ + seed_tangent * d(tangent)/dθ` into `grad`.
    ///
    /// `grad` must have one slot per registered parameter, in registration order.
    pub fn accumulate_gradient(
        &self,
        output: ADScalar<'_>,
        seed_primal: f64,
        seed_tangent: f64,
        grad: &mut [f64],
    ) -> Result<(), AdError> {
        let mut tape = self.tape.borrow_mut();
        if let Some(err) = &tape.fault {
            return Err(err.clone());
        }
        assert_eq!(
            grad.len(),
            tape.params.len(),
            "gradient buffer does not match the parameter count"
        );
        let out = match output.node {
            None => return Ok(()),
            Some(node) if !std::ptr::eq(node.record, self) => return Err(AdError::ForeignRecord),
            Some(node) => node.id as usize,
        };

        let tape = &mut *tape;
        let n = out + 1;
        tape.adj_primal.clear();
        tape.adj_primal.resize(n, 0.0);
        tape.adj_tangent.clear();
        tape.adj_tangent.resize(n, 0.0);
        tape.adj_primal[out] = seed_primal;
        tape.adj_tangent[out] = seed_tangent;

        for i in (0..n).rev() {
            let bar_p = tape.adj_primal[i];
            let bar_t = tape.adj_tangent[i];
            if bar_p == 0.0 && bar_t == 0.0 {
                continue;
            }
            let span = tape.offsets[i] as usize..tape.offsets[i + 1] as usize;
            match tape.kind[i] {
                NodeKind::Lift => {
                    let parent = tape.partials[span.start].parent as usize;
                    tape.adj_tangent[parent] += bar_p;
                }
                NodeKind::Op => {
                    for e in &tape.partials[span] {
                        let p = e.parent as usize;
                        tape.adj_primal[p] += bar_p * e.primal + bar_t * e.cross;
                        tape.adj_tangent[p] += bar_t * e.primal;
                    }
                }
                NodeKind::Parameter | NodeKind::Input => {}
            }
        }

        for (slot, &id) in grad.iter_mut().zip(&tape.params) {
            if (id as usize) < n {
                *slot += tape.adj_primal[id as usize];
            }
        }
        Ok(())
    }

    fn push_op<'r>(
        &'r self,
        primal: f64,
        tangent: f64,
        parents: &[(u32, f64, f64)],
    ) -> ADScalar<'r> {
        let mut tape = self.tape.borrow_mut();
        for &(parent, d_primal, d_cross) in parents {
            tape.partials.push(Partial {
                parent,
                primal: d_primal,
                cross: d_cross,
            });
        }
        let id = tape.finish_node(NodeKind::Op, primal, tangent);
        ADScalar {
            primal,
            tangent,
            node: Some(NodeRef { record: self, id }),
        }
    }

    fn fail(&self, err: AdError) {
        self.tape.borrow_mut().fail(err);
    }

    fn next_id(&self) -> usize {
        self.tape.borrow().next_id() as usize
    }
}

/// Parameter gradient in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Clone, Copy)]
struct NodeRef<'r> {
    record: &'r Record,
    id: u32,
}

/// A value in a recorded computation: primal, time tangent and provenance.
///
/// Constants carry no record handle and a zero tangent.
#[derive(Clone, Copy)]
pub struct ADScalar<'r> {
    primal: f64,
    tangent: f64,
    node: Option<NodeRef<'r>>,
}

impl fmt::Debug for ADScalar<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ADScalar")
            .field("primal", &self.primal)
            .field("tangent", &self.tangent)
            .field("node", &self.node_id())
            .finish()
    }
}

impl<'r> From<f64> for ADScalar<'r> {
    fn from(value: f64) -> Self {
        Self::constant(value)
    }
}

impl<'r> ADScalar<'r> {
    pub fn constant(value: f64) -> Self {
        Self {
            primal: value,
            tangent: 0.0,
            node: None,
        }
    }

    pub fn primal(&self) -> f64 {
        self.primal
    }

    pub fn tangent(&self) -> f64 {
        self.tangent
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.map(|n| n.id as usize)
    }

    /// Generic node constructor: `parents` holds `(operand, d_primal, d_cross)`
    /// where `d_primal` is the partial of the result with respect to the
    /// operand and `d_cross` the partial of the result's tangent with respect to
    /// the operand's primal. Constant operands are skipped.
    pub fn fused<I>(primal: f64, tangent: f64, parents: I) -> Self
    where
        I: IntoIterator<Item = (ADScalar<'r>, f64, f64)>,
    {
        let mut record: Option<&'r Record> = None;
        let mut buf: smallbuf::Buf = smallbuf::Buf::new();
        for (operand, d_primal, d_cross) in parents {
            let Some(node) = operand.node else { continue };
            match record {
                None => record = Some(node.record),
                Some(r) if !std::ptr::eq(r, node.record) => {
                    r.fail(AdError::ForeignRecord);
                    return Self::constant(f64::NAN);
                }
                Some(_) => {}
            }
            buf.push((node.id, d_primal, d_cross));
        }
        match record {
            None => Self::constant(primal),
            Some(r) => r.push_op(primal, tangent, buf.as_slice()),
        }
    }

    fn unary(self, primal: f64, d1: f64, d2: f64) -> Self {
        let tangent = d1 * self.tangent;
        match self.node {
            None => Self::constant(primal),
            Some(node) => node
                .record
                .push_op(primal, tangent, &[(node.id, d1, d2 * self.tangent)]),
        }
    }

    fn binary(
        self,
        other: Self,
        primal: f64,
        tangent: f64,
        da: (f64, f64),
        db: (f64, f64),
    ) -> Self {
        match (self.node, other.node) {
            (None, None) => Self::constant(primal),
            (Some(a), None) => a.record.push_op(primal, tangent, &[(a.id, da.0, da.1)]),
            (None, Some(b)) => b.record.push_op(primal, tangent, &[(b.id, db.0, db.1)]),
            (Some(a), Some(b)) => {
                if !std::ptr::eq(a.record, b.record) {
                    a.record.fail(AdError::ForeignRecord);
                    return Self::constant(f64::NAN);
                }
                a.record
                    .push_op(primal, tangent, &[(a.id, da.0, da.1), (b.id, db.0, db.1)])
            }
        }
    }

    /// The time derivative of this value as a new value, so that it can enter
    /// further arithmetic (e.g. a residual containing `u'`).
    pub fn derivative(self) -> Self {
        match self.node {
            None => Self::constant(0.0),
            Some(node) => {
                let record = node.record;
                let mut tape = record.tape.borrow_mut();
                tape.partials.push(Partial {
                    parent: node.id,
                    primal: 1.0,
                    cross: 0.0,
                });
                let id = tape.finish_node(NodeKind::Lift, self.tangent, 0.0);
                ADScalar {
                    primal: self.tangent,
                    tangent: 0.0,
                    node: Some(NodeRef { record, id }),
                }
            }
        }
    }

    pub fn try_div(self, other: Self) -> Result<Self, AdError> {
        if other.primal == 0.0 {
            let node = self
                .node
                .or(other.node)
                .map(|n| n.record.next_id())
                .unwrap_or(0);
            return Err(AdError::DivisionByZero { node });
        }
        Ok(self / other)
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.primal.sin_cos();
        self.unary(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.primal.sin_cos();
        self.unary(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.primal.exp();
        self.unary(e, e, e)
    }

    pub fn tanh(self) -> Self {
        let th = self.primal.tanh();
        let d1 = 1.0 - th * th;
        self.unary(th, d1, -2.0 * th * d1)
    }

    pub fn logistic(self) -> Self {
        let s = logistic(self.primal);
        let d1 = s * (1.0 - s);
        self.unary(s, d1, d1 * (1.0 - 2.0 * s))
    }

    /// `x * logistic(x)` as a single node.
    pub fn silu(self) -> Self {
        let x = self.primal;
        let s = logistic(x);
        let d1 = s * (1.0 + x * (1.0 - s));
        let d2 = s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
        self.unary(x * s, d1, d2)
    }

    pub fn powi(self, n: i32) -> Self {
        let x = self.primal;
        match n {
            0 => Self::constant(1.0),
            1 => self,
            _ => {
                let nf = f64::from(n);
                let d1 = nf * x.powi(n - 1);
                let d2 = nf * (nf - 1.0) * x.powi(n - 2);
                self.unary(x.powi(n), d1, d2)
            }
        }
    }

    pub fn square(self) -> Self {
        self.powi(2)
    }

    /// Sum of all terms as one node.
    pub fn sum(terms: &[ADScalar<'r>]) -> Self {
        let primal = terms.iter().map(|t| t.primal).sum();
        let tangent = terms.iter().map(|t| t.tangent).sum();
        Self::fused(primal, tangent, terms.iter().map(|&t| (t, 1.0, 0.0)))
    }

    /// `bias + Σ weights[i] * inputs[i]` as one node.
    pub fn affine(weights: &[ADScalar<'r>], inputs: &[ADScalar<'r>], bias: ADScalar<'r>) -> Self {
        debug_assert_eq!(weights.len(), inputs.len());
        let mut primal = bias.primal;
        let mut tangent = bias.tangent;
        for (w, x) in weights.iter().zip(inputs) {
            primal += w.primal * x.primal;
            tangent += w.tangent * x.primal + w.primal * x.tangent;
        }
        let parents = weights
            .iter()
            .zip(inputs)
            .flat_map(|(&w, &x)| [(w, x.primal, x.tangent), (x, w.primal, w.tangent)])
            .chain(std::iter::once((bias, 1.0, 0.0)));
        Self::fused(primal, tangent, parents)
    }
}

/// Numerically stable `1 / (1 + e^{-x})`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'r> Add for ADScalar<'r> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        self.binary(
            rhs,
            self.primal + rhs.primal,
            self.tangent + rhs.tangent,
            (1.0, 0.0),
            (1.0, 0.0),
        )
    }
}

impl<'r> Sub for ADScalar<'r> {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        self.binary(
            rhs,
            self.primal - rhs.primal,
            self.tangent - rhs.tangent,
            (1.0, 0.0),
            (-1.0, 0.0),
        )
    }
}

impl<'r> Mul for ADScalar<'r> {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        self.binary(
            rhs,
            self.primal * rhs.primal,
            self.tangent * rhs.primal + self.primal * rhs.tangent,
            (rhs.primal, rhs.tangent),
            (self.primal, self.tangent),
        )
    }
}

impl<'r> Div for ADScalar<'r> {
    type Output = Self;

    fn div(self, rhs: Self) -> Self {
        let (a, at, b, bt) = (self.primal, self.tangent, rhs.primal, rhs.tangent);
        if b == 0.0 {
            if let Some(node) = self.node.or(rhs.node) {
                let id = node.record.next_id();
                node.record.fail(AdError::DivisionByZero { node: id });
            }
        }
        let inv = 1.0 / b;
        let q = a * inv;
        let tangent = (at - q * bt) * inv;
        self.binary(
            rhs,
            q,
            tangent,
            (inv, -bt * inv * inv),
            (-q * inv, (-at + 2.0 * q * bt) * inv * inv),
        )
    }
}

impl<'r> Neg for ADScalar<'r> {
    type Output = Self;

    fn neg(self) -> Self {
        self.unary(-self.primal, -1.0, 0.0)
    }
}

macro_rules! scalar_rhs {
    ($trait:ident, $method:ident) => {
        impl<'r> $trait<f64> for ADScalar<'r> {
            type Output = ADScalar<'r>;

            fn $method(self, rhs: f64) -> ADScalar<'r> {
                self.$method(ADScalar::constant(rhs))
            }
        }

        impl<'r> $trait<ADScalar<'r>> for f64 {
            type Output = ADScalar<'r>;

            fn $method(self, rhs: ADScalar<'r>) -> ADScalar<'r> {
                ADScalar::constant(self).$method(rhs)
            }
        }
    };
}

scalar_rhs!(Add, add);
scalar_rhs!(Sub, sub);
scalar_rhs!(Mul, mul);
scalar_rhs!(Div, div);

/// Arithmetic shared by plain `f64` and [`ADScalar`], so that residuals and
/// constraints are written once and evaluated on either.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn from_f64(value: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn from_f64(value: f64) -> Self {
        value
    }

    fn value(&self) -> f64 {
        *self
    }

    fn sin(self) -> Self {
        f64::sin(self)
    }

    fn cos(self) -> Self {
        f64::cos(self)
    }

    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

impl<'r> Scalar for ADScalar<'r> {
    fn from_f64(value: f64) -> Self {
        ADScalar::constant(value)
    }

    fn value(&self) -> f64 {
        self.primal
    }

    fn sin(self) -> Self {
        ADScalar::sin(self)
    }

    fn cos(self) -> Self {
        ADScalar::cos(self)
    }

    fn powi(self, n: i32) -> Self {
        ADScalar::powi(self, n)
    }

    fn square(self) -> Self {
        ADScalar::powi(self, 2)
    }
}

mod smallbuf {
    // Parent lists are short except for layer sums and affine maps.
    const INLINE: usize = 8;

    pub(super) enum Buf {
        Inline([(u32, f64, f64); INLINE], usize),
        Heap(Vec<(u32, f64, f64)>),
    }

    impl Buf {
        pub(super) fn new() -> Self {
            Buf::Inline([(0, 0.0, 0.0); INLINE], 0)
        }

        pub(super) fn push(&mut self, item: (u32, f64, f64)) {
            match self {
                Buf::Inline(arr, len) if *len < INLINE => {
                    arr[*len] = item;
                    *len += 1;
                }
                Buf::Inline(arr, len) => {
                    let mut v = Vec::with_capacity(2 * INLINE);
                    v.extend_from_slice(&arr[..*len]);
                    v.push(item);
                    *self = Buf::Heap(v);
                }
                Buf::Heap(v) => v.push(item),
            }
        }

        pub(super) fn as_slice(&self) -> &[(u32, f64, f64)] {
            match self {
                Buf::Inline(arr, len) => &arr[..*len],
                Buf::Heap(v) => v,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn parameter_seeding() {
        let rec = Record::new();
        let w = rec.register_parameter(2.5);
        assert_eq!(w.primal(), 2.5);
        assert_eq!(w.tangent(), 0.0);
        let _v = rec.register_parameter(-1.0);
        let g = rec.backward(w).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn input_seeding() {
        let rec = Record::new();
        let t = rec.seed_input(0.3).unwrap();
        assert_eq!((t.primal(), t.tangent()), (0.3, 1.0));
        assert_eq!(rec.seed_input(0.4).unwrap_err(), AdError::AlreadySeeded);
        let c = ADScalar::constant(4.0) * 2.0;
        assert!(c.is_constant());
        assert_eq!(c.tangent(), 0.0);
    }

    #[test]
    fn elementary_tangents() {
        let rec = Record::new();
        let t = rec.seed_input(0.0).unwrap();
        let s = t.sin();
        assert_eq!((s.primal(), s.tangent()), (0.0, 1.0));
        let l = t.logistic();
        assert_eq!((l.primal(), l.tangent()), (0.5, 0.25));

        let mut rec = Record::new();
        let t = rec.seed_input(3.0).unwrap();
        assert_eq!((t * t).tangent(), 6.0);
        rec.reset();
        let t = rec.seed_input(3.0).unwrap();
        assert_eq!(t.powi(3).tangent(), 27.0);
    }

    #[test]
    fn division_by_zero_is_latched() {
        let rec = Record::new();
        let t = rec.seed_input(1.0).unwrap();
        let zero = t - 1.0;
        assert!(matches!(
            t.try_div(zero),
            Err(AdError::DivisionByZero { .. })
        ));
        let q = t / zero;
        assert!(matches!(rec.check(), Err(AdError::DivisionByZero { .. })));
        assert!(rec.backward(q).is_err());
    }

    #[test]
    fn foreign_records_are_rejected() {
        let a = Record::new();
        let b = Record::new();
        let x = a.register_parameter(1.0);
        let y = b.register_parameter(2.0);
        let z = x + y;
        assert!(z.primal().is_nan());
        assert_eq!(a.check(), Err(AdError::ForeignRecord));
        assert_eq!(b.backward(x).unwrap_err(), AdError::ForeignRecord);
    }

    #[test]
    fn linear_gradient() {
        let rec = Record::new();
        let w = rec.register_parameter(2.0);
        let t = rec.seed_input(3.0).unwrap();
        let g = rec.backward(w * t).unwrap();
        assert_eq!(g[0], 3.0);
    }

    #[test]
    fn mixed_gradient_of_tangent() {
        // d/dt (w t^2) = 2 w t; d/dw of that = 2 t
        let rec = Record::new();
        let w = rec.register_parameter(2.0);
        let t = rec.seed_input(3.0).unwrap();
        let f = w * t * t;
        assert_eq!(f.tangent(), 12.0);
        assert_eq!(rec.backward_tangent(f).unwrap()[0], 6.0);
        let lifted = f.derivative();
        assert_eq!(lifted.primal(), 12.0);
        assert_eq!(rec.backward(lifted).unwrap()[0], 6.0);
        // a function of the lifted value: (2wt)^2 -> d/dw = 2 (2wt) 2t = 144
        assert_eq!(rec.backward(lifted * lifted).unwrap()[0], 144.0);
    }

    #[test]
    fn squared_sine_gradient_matches_finite_difference() {
        let eval = |w: f64| (w * (std::f64::consts::FRAC_PI_2).sin()).powi(2);
        let fd = central(eval, 1.0, 1e-6);
        let rec = Record::new();
        let w = rec.register_parameter(1.0);
        let t = rec.seed_input(std::f64::consts::FRAC_PI_2).unwrap();
        let out = (w * t.sin()).square();
        let g = rec.backward(out).unwrap()[0];
        assert!((g - 2.0).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn division_partials() {
        // f = (w t) / (1 + t^2): check tangent and mixed gradient
        let w0 = 0.7;
        let t0 = 1.3;
        let rec = Record::new();
        let w = rec.register_parameter(w0);
        let t = rec.seed_input(t0).unwrap();
        let f = (w * t) / (t * t + 1.0);
        let expected_tangent = w0 * (1.0 - t0 * t0) / (1.0 + t0 * t0).powi(2);
        assert!((f.tangent() - expected_tangent).abs() < 1e-14);
        let g = rec.backward_tangent(f).unwrap()[0];
        assert!((g - expected_tangent / w0).abs() < 1e-14);
    }

    #[test]
    fn affine_and_sum_match_composition() {
        let rec = Record::new();
        let ws = rec.register_parameters(&[0.5, -1.5, 2.0]);
        let t = rec.seed_input(0.4).unwrap();
        let xs = [t.sin(), t.square(), t.tanh()];
        let b = rec.register_parameter(0.1);
        let fused = ADScalar::affine(&ws, &xs, b);
        let composed = ws[0] * xs[0] + ws[1] * xs[1] + ws[2] * xs[2] + b;
        assert!((fused.primal() - composed.primal()).abs() < 1e-15);
        assert!((fused.tangent() - composed.tangent()).abs() < 1e-15);
        let g1 = rec.backward_tangent(fused).unwrap();
        let g2 = rec.backward_tangent(composed).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        let s = ADScalar::sum(&xs);
        let c = xs[0] + xs[1] + xs[2];
        assert_eq!(s.primal(), c.primal());
        assert_eq!(s.tangent(), c.tangent());
    }

    #[test]
    fn silu_matches_composition() {
        for &x0 in &[-3.0, -0.2, 0.0, 0.9, 4.0] {
            let rec = Record::new();
            let w = rec.register_parameter(1.1);
            let t = rec.seed_input(x0).unwrap();
            let x = w * t;
            let a = x.silu();
            let b = x * x.logistic();
            assert!((a.primal() - b.primal()).abs() < 1e-15);
            assert!((a.tangent() - b.tangent()).abs() < 1e-14);
            let ga = rec.backward_tangent(a).unwrap()[0];
            let gb = rec.backward_tangent(b).unwrap()[0];
            assert!((ga - gb).abs() < 1e-13);
        }
    }
}

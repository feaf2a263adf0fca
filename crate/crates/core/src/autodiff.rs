//! Scalar reverse-mode differentiation.
//!
//! Every arithmetic operation on a [`Var`] appends a node to its [`Tape`]
//! holding the parent indices and the local partial derivatives. A single
//! reverse sweep from the root then yields the gradient with respect to
//! every node recorded before it.
//!
//! Code that has to run both on plain floats and on the tape is written
//! against the [`Real`] trait, which is implemented for `f64` and `Var`.
//! Both instantiations execute the same floating point operations in the
//! same order, so a value computed through `Var` is bitwise equal to the
//! one computed through `f64`.
//!
//! Kinks (`min`, `max`, `abs`, `relu`, `select`) take the one-sided
//! derivative of the active argument; on exact ties the first argument is
//! active. Every such branch, plus any discrete choice reported through
//! [`Real::note_decision`], is folded into a decision fingerprint. Two
//! evaluations with equal fingerprints followed the same piecewise-smooth
//! branch, which is what [`gradcheck`] uses to detect kink-adjacent
//! coordinates.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const FP_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const FP_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("domain error in `{op}` at input {input}")]
    Domain { op: &'static str, input: f64 },
    #[error("variable belongs to tape {found}, expected tape {expected}")]
    ForeignTape { expected: u64, found: u64 },
    #[error("node {0} is not a leaf of the tape")]
    NotALeaf(usize),
    #[error("root node {root} precedes requested leaf {leaf}")]
    LeafAfterRoot { root: usize, leaf: usize },
}

#[derive(Default)]
struct Inner {
    values: Vec<f64>,
    // parents of node i live in edges[offsets[i]..offsets[i + 1]]
    offsets: Vec<usize>,
    edges: Vec<(u32, f64)>,
    leaf: Vec<bool>,
    fingerprint: u64,
    decisions: u64,
    domain_error: Option<AdError>,
}

/// Append-only recording of a computation.
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &inner.values.len())
            .field("decisions", &inner.decisions)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        let inner = Inner {
            offsets: vec![0],
            fingerprint: FP_SEED,
            ..Inner::default()
        };
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(inner),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates an independent input variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(value, &[], true);
        Var { tape: self, index, value }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// A node without parents that is not an input.
    pub fn constant(&self, value: f64) -> Var<'_> {
        let index = self.push(value, &[], false);
        Var { tape: self, index, value }
    }

    /// Records a node whose local partials were computed elsewhere.
    pub fn custom<'t>(&'t self, value: f64, parents: &[(Var<'t>, f64)]) -> Var<'t> {
        let edges: Vec<(u32, f64)> = parents
            .iter()
            .map(|(p, d)| {
                debug_assert_eq!(p.tape.id, self.id);
                (p.index, *d)
            })
            .collect();
        let index = self.push(value, &edges, false);
        Var { tape: self, index, value }
    }

    /// Folds a discrete choice into the decision fingerprint.
    pub fn note_decision(&self, tag: u64) {
        let mut inner = self.inner.borrow_mut();
        inner.fingerprint = (inner.fingerprint ^ tag).wrapping_mul(FP_PRIME).rotate_left(7);
        inner.decisions += 1;
    }

    pub fn fingerprint(&self) -> u64 {
        self.inner.borrow().fingerprint
    }

    pub fn decision_count(&self) -> u64 {
        self.inner.borrow().decisions
    }

    /// The first domain violation recorded on this tape, if any.
    pub fn check(&self) -> Result<(), AdError> {
        match &self.inner.borrow().domain_error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn push(&self, value: f64, edges: &[(u32, f64)], leaf: bool) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let index = inner.values.len();
        assert!(index < u32::MAX as usize, "tape overflow");
        inner.values.push(value);
        inner.edges.extend_from_slice(edges);
        let end = inner.edges.len();
        inner.offsets.push(end);
        inner.leaf.push(leaf);
        index as u32
    }

    fn domain(&self, op: &'static str, input: f64) {
        let mut inner = self.inner.borrow_mut();
        if inner.domain_error.is_none() {
            inner.domain_error = Some(AdError::Domain { op, input });
        }
    }

    fn unary<'t>(&'t self, x: Var<'t>, value: f64, partial: f64) -> Var<'t> {
        let index = self.push(value, &[(x.index, partial)], false);
        Var { tape: self, index, value }
    }

    fn binary<'t>(&'t self, a: Var<'t>, da: f64, b: Var<'t>, db: f64, value: f64) -> Var<'t> {
        let index = self.push(value, &[(a.index, da), (b.index, db)], false);
        Var { tape: self, index, value }
    }

    /// One reverse sweep from `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AdError> {
        if root.tape.id != self.id {
            return Err(AdError::ForeignTape { expected: self.id, found: root.tape.id });
        }
        self.check()?;
        let inner = self.inner.borrow();
        let n = root.index as usize + 1;
        let mut adjoint = vec![0.0; n];
        adjoint[n - 1] = 1.0;
        let mut visits = 0usize;
        for i in (0..n).rev() {
            visits += 1;
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            for &(p, d) in &inner.edges[inner.offsets[i]..inner.offsets[i + 1]] {
                adjoint[p as usize] += a * d;
            }
        }
        Ok(Gradients { tape_id: self.id, adjoint, visits })
    }

    /// ∂root/∂leaf for every leaf in `wrt`.
    pub fn gradient_of(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<f64>, AdError> {
        for v in wrt {
            if v.tape.id != self.id {
                return Err(AdError::ForeignTape { expected: self.id, found: v.tape.id });
            }
            if !self.inner.borrow().leaf[v.index as usize] {
                return Err(AdError::NotALeaf(v.index as usize));
            }
        }
        let grads = self.backward(root)?;
        Ok(wrt.iter().map(|v| grads.get(*v)).collect())
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: u64,
    adjoint: Vec<f64>,
    visits: usize,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> f64 {
        assert_eq!(v.tape.id, self.tape_id, "variable from a different tape");
        self.adjoint.get(v.index as usize).copied().unwrap_or(0.0)
    }

    /// Number of nodes visited by the sweep.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}={})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    /// Division that reports a zero divisor instead of recording it.
    pub fn checked_div(self, rhs: Var<'t>) -> Result<Var<'t>, AdError> {
        if rhs.value == 0.0 {
            return Err(AdError::Domain { op: "div", input: rhs.value });
        }
        Ok(self / rhs)
    }

    pub fn checked_ln(self) -> Result<Var<'t>, AdError> {
        if self.value <= 0.0 {
            return Err(AdError::Domain { op: "ln", input: self.value });
        }
        Ok(Real::ln(self))
    }

    pub fn checked_sqrt(self) -> Result<Var<'t>, AdError> {
        if self.value < 0.0 {
            return Err(AdError::Domain { op: "sqrt", input: self.value });
        }
        Ok(Real::sqrt(self))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, 1.0, rhs, 1.0, self.value + rhs.value)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, 1.0, rhs, -1.0, self.value - rhs.value)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs.value, rhs, self.value, self.value * rhs.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.value == 0.0 {
            self.tape.domain("div", rhs.value);
        }
        let q = self.value / rhs.value;
        self.tape.binary(self, 1.0 / rhs.value, rhs, -q / rhs.value, q)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            self.tape.domain("div", rhs);
        }
        self.tape.unary(self, self.value / rhs, 1.0 / rhs)
    }
}

/// Scalar arithmetic shared by plain and recorded evaluation.
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
    /// Whether operations are recorded for differentiation.
    const RECORDS: bool;

    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn constant_like(self, v: f64) -> Self;

    /// Square root; the derivative at exactly zero is taken as zero.
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// Logistic function 1 / (1 + e^-x).
    fn sigmoid(self) -> Self;
    fn relu(self) -> Self;
    fn abs(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    /// `atan2(self, x)` with `self` as the ordinate.
    fn atan2(self, x: Self) -> Self;
    /// `a` when `cond` holds, else `b`.
    fn select(cond: bool, a: Self, b: Self) -> Self;

    /// A node whose value and partials with respect to `parents` were
    /// computed outside the tape.
    fn fused(value: f64, parents: &[Self], partials: &[f64]) -> Self;
    /// Σ cᵢ·xᵢ recorded as a single node. `terms` must be non-empty.
    fn linear_combination(terms: &[(f64, Self)]) -> Self;
    fn note_decision(self, tag: u64);

    fn square(self) -> Self {
        self * self
    }

    fn max0(self) -> Self {
        self.relu()
    }
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    const RECORDS: bool = false;

    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn constant_like(self, v: f64) -> f64 {
        v
    }
    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
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
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    #[inline]
    fn sigmoid(self) -> f64 {
        sigmoid_f64(self)
    }
    #[inline]
    fn relu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn abs(self) -> f64 {
        if self >= 0.0 {
            self
        } else {
            -self
        }
    }
    #[inline]
    fn min(self, other: f64) -> f64 {
        if self <= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn max(self, other: f64) -> f64 {
        if self >= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn atan2(self, x: f64) -> f64 {
        f64::atan2(self, x)
    }
    #[inline]
    fn select(cond: bool, a: f64, b: f64) -> f64 {
        if cond {
            a
        } else {
            b
        }
    }
    #[inline]
    fn fused(value: f64, _parents: &[f64], _partials: &[f64]) -> f64 {
        value
    }
    #[inline]
    fn linear_combination(terms: &[(f64, f64)]) -> f64 {
        let mut acc = 0.0;
        for &(c, x) in terms {
            acc += c * x;
        }
        acc
    }
    #[inline]
    fn note_decision(self, _tag: u64) {}
}

impl<'t> Real for Var<'t> {
    const RECORDS: bool = true;

    fn value(self) -> f64 {
        self.value
    }

    fn constant_like(self, v: f64) -> Self {
        self.tape.constant(v)
    }

    fn sqrt(self) -> Self {
        if self.value < 0.0 {
            self.tape.domain("sqrt", self.value);
        }
        let r = self.value.sqrt();
        let d = if r > 0.0 { 0.5 / r } else { 0.0 };
        self.tape.unary(self, r, d)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.tape.unary(self, e, e)
    }

    fn ln(self) -> Self {
        if self.value <= 0.0 {
            self.tape.domain("ln", self.value);
        }
        self.tape.unary(self, self.value.ln(), 1.0 / self.value)
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.tape.unary(self, t, 1.0 - t * t)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.value);
        self.tape.unary(self, s, s * (1.0 - s))
    }

    fn relu(self) -> Self {
        let on = self.value > 0.0;
        self.tape.note_decision(on as u64);
        if on {
            self.tape.unary(self, self.value, 1.0)
        } else {
            self.tape.unary(self, 0.0, 0.0)
        }
    }

    fn abs(self) -> Self {
        let pos = self.value >= 0.0;
        self.tape.note_decision(pos as u64 | 2);
        if pos {
            self.tape.unary(self, self.value, 1.0)
        } else {
            self.tape.unary(self, -self.value, -1.0)
        }
    }

    fn min(self, other: Self) -> Self {
        let first = self.value <= other.value;
        self.tape.note_decision(first as u64 | 4);
        if first {
            self.tape.binary(self, 1.0, other, 0.0, self.value)
        } else {
            self.tape.binary(self, 0.0, other, 1.0, other.value)
        }
    }

    fn max(self, other: Self) -> Self {
        let first = self.value >= other.value;
        self.tape.note_decision(first as u64 | 8);
        if first {
            self.tape.binary(self, 1.0, other, 0.0, self.value)
        } else {
            self.tape.binary(self, 0.0, other, 1.0, other.value)
        }
    }

    fn atan2(self, x: Self) -> Self {
        let (y, xv) = (self.value, x.value);
        let r2 = y * y + xv * xv;
        if r2 == 0.0 {
            self.tape.domain("atan2", 0.0);
        }
        self.tape.binary(self, xv / r2, x, -y / r2, y.atan2(xv))
    }

    fn select(cond: bool, a: Self, b: Self) -> Self {
        a.tape.note_decision(cond as u64 | 16);
        let (src, value) = if cond { (a, a.value) } else { (b, b.value) };
        a.tape.unary(src, value, 1.0)
    }

    fn fused(value: f64, parents: &[Self], partials: &[f64]) -> Self {
        assert_eq!(parents.len(), partials.len());
        let tape = parents.first().expect("fused node needs a parent").tape;
        if !value.is_finite() {
            tape.domain("fused", value);
        }
        let edges: Vec<(u32, f64)> =
            parents.iter().zip(partials).map(|(p, &d)| (p.index, d)).collect();
        let index = tape.push(value, &edges, false);
        Var { tape, index, value }
    }

    fn linear_combination(terms: &[(f64, Self)]) -> Self {
        let tape = terms.first().expect("empty linear combination").1.tape;
        let mut acc = 0.0;
        for &(c, x) in terms {
            acc += c * x.value;
        }
        let edges: Vec<(u32, f64)> = terms.iter().map(|&(c, x)| (x.index, c)).collect();
        let index = tape.push(acc, &edges, false);
        Var { tape, index, value: acc }
    }

    fn note_decision(self, tag: u64) {
        self.tape.note_decision(tag);
    }
}

/// Per-coordinate outcome of [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// A branch flips within ±h along this coordinate.
    pub kink_adjacent: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub value: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradcheckReport {
    pub fn checked(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.coordinates.iter().filter(|c| !c.kink_adjacent)
    }

    pub fn excluded(&self) -> usize {
        self.coordinates.iter().filter(|c| c.kink_adjacent).count()
    }

    /// Fraction of non-excluded coordinates within tolerance (1 when none remain).
    pub fn pass_rate(&self) -> f64 {
        let (mut n, mut ok) = (0usize, 0usize);
        for c in self.checked() {
            n += 1;
            ok += c.passed as usize;
        }
        if n == 0 {
            1.0
        } else {
            ok as f64 / n as f64
        }
    }

    pub fn failures(&self) -> Vec<&CoordinateCheck> {
        self.checked().filter(|c| !c.passed).collect()
    }
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences with step `h`.
///
/// `f` builds its result on the supplied tape from the supplied leaves.
/// A coordinate is excluded as kink-adjacent when the decision fingerprint
/// at `point ± h·eᵢ` differs from the one at `point`.
pub fn gradcheck<F, E>(f: F, point: &[f64], h: f64, tol: f64) -> Result<GradcheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<AdError>,
{
    let eval = |x: &[f64]| -> Result<(f64, u64), E> {
        let tape = Tape::new();
        let leaves = tape.vars(x);
        let out = f(&tape, &leaves)?;
        tape.check()?;
        Ok((out.value, tape.fingerprint()))
    };

    let tape = Tape::new();
    let leaves = tape.vars(point);
    let root = f(&tape, &leaves)?;
    let analytic = tape.gradient_of(root, &leaves)?;
    let base_fp = tape.fingerprint();

    let mut coordinates = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for (i, &g) in analytic.iter().enumerate() {
        x[i] = point[i] + h;
        let (fp, fp_plus) = eval(&x)?;
        x[i] = point[i] - h;
        let (fm, fp_minus) = eval(&x)?;
        x[i] = point[i];
        let numeric = (fp - fm) / (2.0 * h);
        let rel_error = (numeric - g).abs() / g.abs().max(1.0);
        let kink_adjacent = fp_plus != base_fp || fp_minus != base_fp;
        coordinates.push(CoordinateCheck {
            index: i,
            analytic: g,
            numeric,
            rel_error,
            kink_adjacent,
            passed: rel_error <= tol,
        });
    }
    Ok(GradcheckReport { value: root.value, coordinates })
}

//! Minimal reverse-mode automatic differentiation.
//!
//! A thread-local tape records every operation on [`Var`] values as a node
//! with its parents and local partial derivatives. [`Session::backward`]
//! sweeps the tape in reverse and returns adjoints for every node.
//!
//! Constants never touch the tape: a `Var` built with [`Var::constant`]
//! carries a sentinel index and contributes no edges, so lifting data
//! (prices, detached state) into tape arithmetic is free.
//!
//! Only one [`Session`] may be alive per thread. Vars outlive nothing: using
//! a `Var` after its session is dropped yields garbage gradients.

use std::cell::RefCell;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::scalar::{std_normal_cdf, std_normal_pdf, Real};

const CONST: u32 = u32::MAX;

#[derive(Default)]
struct Tape {
    /// `offsets[i]..offsets[i + 1]` indexes node `i`'s edges.
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    active: bool,
}

impl Tape {
    fn clear(&mut self) {
        self.offsets.clear();
        self.offsets.push(0);
        self.parents.clear();
        self.partials.clear();
    }

    fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    pub fn constant(val: f64) -> Self {
        Var { idx: CONST, val }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    #[inline]
    fn node<I>(val: f64, edges: I) -> Self
    where
        I: IntoIterator<Item = (Var, f64)>,
    {
        TAPE.with(|tape| {
            let mut tape = tape.borrow_mut();
            debug_assert!(tape.active, "tape arithmetic outside of a Session");
            let start = tape.parents.len();
            for (parent, partial) in edges {
                if parent.idx != CONST {
                    tape.parents.push(parent.idx);
                    tape.partials.push(partial);
                }
            }
            if tape.parents.len() == start {
                return Var::constant(val);
            }
            let idx = tape.len() as u32;
            let end = tape.parents.len() as u32;
            tape.offsets.push(end);
            Var { idx, val }
        })
    }

    #[inline]
    fn unary(self, val: f64, partial: f64) -> Self {
        if self.is_constant() {
            Var::constant(val)
        } else {
            Var::node(val, [(self, partial)])
        }
    }

    #[inline]
    fn binary(a: Var, b: Var, val: f64, da: f64, db: f64) -> Self {
        if a.is_constant() && b.is_constant() {
            Var::constant(val)
        } else {
            Var::node(val, [(a, da), (b, db)])
        }
    }
}

/// Exclusive handle on this thread's tape.
pub struct Session {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Session {
    /// Clears the tape and starts recording.
    ///
    /// # Panics
    /// If another session is alive on this thread.
    pub fn new() -> Self {
        TAPE.with(|tape| {
            let mut tape = tape.borrow_mut();
            assert!(!tape.active, "nested autodiff sessions are not supported");
            tape.clear();
            tape.active = true;
        });
        Session {
            _not_send: std::marker::PhantomData,
        }
    }

    /// New independent leaf variable.
    pub fn var(&self, val: f64) -> Var {
        TAPE.with(|tape| {
            let mut tape = tape.borrow_mut();
            let idx = tape.len() as u32;
            let end = tape.parents.len() as u32;
            tape.offsets.push(end);
            Var { idx, val }
        })
    }

    pub fn vars(&self, vals: &[f64]) -> Vec<Var> {
        vals.iter().map(|&v| self.var(v)).collect()
    }

    pub fn tape_len(&self) -> usize {
        TAPE.with(|tape| tape.borrow().len())
    }

    /// Reverse sweep seeded with `Σ seed_i · output_i`.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Adjoints {
        TAPE.with(|tape| {
            let tape = tape.borrow();
            let n = tape.len();
            let mut adj = vec![0.0; n];
            for &(v, s) in seeds {
                if v.idx != CONST {
                    adj[v.idx as usize] += s;
                }
            }
            for i in (0..n).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let lo = tape.offsets[i] as usize;
                let hi = tape.offsets[i + 1] as usize;
                for e in lo..hi {
                    adj[tape.parents[e] as usize] += a * tape.partials[e];
                }
            }
            Adjoints { adj }
        })
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        TAPE.with(|tape| {
            let mut tape = tape.borrow_mut();
            tape.clear();
            tape.active = false;
        });
    }
}

pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn wrt(&self, v: Var) -> f64 {
        if v.idx == CONST {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }

    pub fn wrt_all(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: Var) -> Var {
        Var::binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: Var) -> Var {
        let q = self.val / rhs.val;
        Var::binary(self, rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl AddAssign for Var {
    fn add_assign(&mut self, rhs: Var) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var {
    fn sub_assign(&mut self, rhs: Var) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var {
    fn mul_assign(&mut self, rhs: Var) {
        *self = *self * rhs;
    }
}

impl Real for Var {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }

    #[inline]
    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn abs(self) -> Self {
        let sign = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.unary(self.val.abs(), sign)
    }

    fn normal_cdf(self, scale: f64) -> Self {
        let x = self.val / scale;
        self.unary(std_normal_cdf(x), std_normal_pdf(x) / scale)
    }

    fn sigmoid(self) -> Self {
        let s = 1.0 / (1.0 + (-self.val).exp());
        self.unary(s, s * (1.0 - s))
    }

    fn affine(weights: &[Self], x: &[Self], bias: Self) -> Self {
        debug_assert_eq!(weights.len(), x.len());
        let val = weights
            .iter()
            .zip(x)
            .fold(bias.val, |acc, (w, xi)| acc + w.val * xi.val);
        let edges = weights
            .iter()
            .zip(x)
            .flat_map(|(&w, &xi)| [(w, xi.val), (xi, w.val)])
            .chain(std::iter::once((bias, 1.0)));
        Var::node(val, edges)
    }

    fn sum(xs: &[Self]) -> Self {
        let val = xs.iter().map(|v| v.val).sum();
        Var::node(val, xs.iter().map(|&v| (v, 1.0)))
    }
}

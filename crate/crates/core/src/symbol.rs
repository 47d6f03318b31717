//! Phase-space symbols `a(x, xi)`, the example catalog, and numerical checks
//! of the gradient-ellipticity, x-decay and imaginary-part conditions.
//!
//! Symbols polynomial in `xi` carry a [`PolySymbol`] so derivatives are exact
//! and the calculus can compose them term by term. Everything else falls
//! back to central differences on whatever analytic derivatives exist.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bracket, norm, Grid, Point, C64};
use crate::weights::WeightFn;

/// Multi-index over at most two axes.
pub type MultiIndex = [usize; 2];

pub const ZERO: MultiIndex = [0, 0];
/// Relative finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Floor on `|xi|` when fitting ratios against powers of `|xi|`.
pub const XI_FLOOR: f64 = 1e-8;

pub fn unit(axis: usize) -> MultiIndex {
    let mut e = ZERO;
    e[axis] = 1;
    e
}

pub fn order_of(a: MultiIndex) -> usize {
    a[0] + a[1]
}

fn add(a: MultiIndex, b: MultiIndex) -> MultiIndex {
    [a[0] + b[0], a[1] + b[1]]
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

pub fn index_factorial(a: MultiIndex) -> f64 {
    factorial(a[0]) * factorial(a[1])
}

fn binom(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// All multi-indices of total order `k` in `dim` variables.
pub fn indices_of_order(dim: usize, k: usize) -> Vec<MultiIndex> {
    if dim == 1 {
        vec![[k, 0]]
    } else {
        (0..=k).map(|i| [k - i, i]).collect()
    }
}

/// Multi-indices `g <= a` componentwise.
pub fn sub_indices(a: MultiIndex) -> impl Iterator<Item = MultiIndex> {
    (0..=a[0]).flat_map(move |i| (0..=a[1]).map(move |j| [i, j]))
}

/// `d^alpha xi^p` evaluated at `xi`.
pub fn monomial_deriv(p: MultiIndex, alpha: MultiIndex, xi: &Point) -> f64 {
    let mut out = 1.0;
    for ax in 0..2 {
        if alpha[ax] > p[ax] {
            return 0.0;
        }
        let falling: f64 = ((p[ax] - alpha[ax] + 1)..=p[ax]).map(|v| v as f64).product();
        out *= falling * xi[ax].powi((p[ax] - alpha[ax]) as i32);
    }
    out
}

/// `d^beta (1 + |y|^2)^{power/2}`, exact for any order.
pub fn bracket_deriv(power: f64, beta: MultiIndex, y: &Point) -> f64 {
    let order = order_of(beta);
    if order == 0 {
        return bracket(y).powf(power);
    }
    let size = order + 1;
    // polys[k] holds P_k with the full derivative equal to sum_k <y>^{power-2k} P_k(y).
    let mut polys = vec![vec![0.0; size * size]; order + 1];
    polys[0][0] = 1.0;
    let half = power / 2.0;
    let steps = std::iter::repeat(0).take(beta[0]).chain(std::iter::repeat(1).take(beta[1]));
    for axis in steps {
        let mut next = vec![vec![0.0; size * size]; order + 1];
        for k in 0..=order {
            for a in 0..size {
                for b in 0..size {
                    let c = polys[k][a * size + b];
                    if c == 0.0 {
                        continue;
                    }
                    let e = half - k as f64;
                    if k < order && e != 0.0 {
                        let (a2, b2) = if axis == 0 { (a + 1, b) } else { (a, b + 1) };
                        next[k + 1][a2 * size + b2] += 2.0 * e * c;
                    }
                    if axis == 0 && a > 0 {
                        next[k][(a - 1) * size + b] += c * a as f64;
                    }
                    if axis == 1 && b > 0 {
                        next[k][a * size + b - 1] += c * b as f64;
                    }
                }
            }
        }
        polys = next;
    }
    let base = 1.0 + y[0] * y[0] + y[1] * y[1];
    let mut total = 0.0;
    for (k, poly) in polys.iter().enumerate() {
        let mut p = 0.0;
        for a in 0..size {
            for b in 0..size {
                let c = poly[a * size + b];
                if c != 0.0 {
                    p += c * y[0].powi(a as i32) * y[1].powi(b as i32);
                }
            }
        }
        if p != 0.0 {
            total += p * base.powf(half - k as f64);
        }
    }
    total
}

fn hermite(k: usize, y: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * y);
    if k == 0 {
        return h0;
    }
    for j in 1..k {
        let h2 = 2.0 * y * h1 - 2.0 * j as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Smooth coefficient functions of `x` with exact derivatives of any order.
#[derive(Clone, Debug, PartialEq)]
pub enum CoefFn {
    Const(C64),
    /// `amp * exp(-|x - center|^2 / width^2)`.
    Gauss { amp: C64, width: f64, center: Point },
    /// `amp * <x>^power`.
    Bracket { amp: C64, power: f64 },
    /// The coordinate `x_axis`.
    Coord(usize),
    Sum(Vec<CoefFn>),
    Prod(Vec<CoefFn>),
    Deriv(Box<CoefFn>, MultiIndex),
}

impl CoefFn {
    pub fn constant(c: f64) -> Self {
        CoefFn::Const(C64::new(c, 0.0))
    }

    pub fn gauss(amp: f64, width: f64) -> Self {
        CoefFn::Gauss { amp: C64::new(amp, 0.0), width, center: [0.0, 0.0] }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            CoefFn::Const(c) => *c == C64::new(0.0, 0.0),
            CoefFn::Gauss { amp, .. } | CoefFn::Bracket { amp, .. } => *amp == C64::new(0.0, 0.0),
            CoefFn::Coord(_) => false,
            CoefFn::Sum(v) => v.iter().all(|c| c.is_zero()),
            CoefFn::Prod(v) => v.iter().any(|c| c.is_zero()),
            CoefFn::Deriv(f, b) => f.is_zero() || (order_of(*b) > 0 && matches!(**f, CoefFn::Const(_))),
        }
    }

    /// Derivative node with flattening and structural zeros.
    pub fn derivative(&self, beta: MultiIndex) -> CoefFn {
        if order_of(beta) == 0 {
            return self.clone();
        }
        match self {
            CoefFn::Const(_) => CoefFn::Const(C64::new(0.0, 0.0)),
            CoefFn::Deriv(f, b) => CoefFn::Deriv(f.clone(), add(*b, beta)),
            f if f.is_zero() => CoefFn::Const(C64::new(0.0, 0.0)),
            f => CoefFn::Deriv(Box::new(f.clone()), beta),
        }
    }

    pub fn eval(&self, x: &Point) -> C64 {
        self.d(ZERO, x)
    }

    /// `d^beta` of the coefficient at `x`.
    pub fn d(&self, beta: MultiIndex, x: &Point) -> C64 {
        let zero = C64::new(0.0, 0.0);
        match self {
            CoefFn::Const(c) => {
                if order_of(beta) == 0 {
                    *c
                } else {
                    zero
                }
            }
            CoefFn::Gauss { amp, width, center } => {
                let mut v = *amp;
                for ax in 0..2 {
                    let y = (x[ax] - center[ax]) / width;
                    let k = beta[ax];
                    v *= (-1.0 / width).powi(k as i32) * hermite(k, y) * (-y * y).exp();
                }
                v
            }
            CoefFn::Bracket { amp, power } => amp * bracket_deriv(*power, beta, x),
            CoefFn::Coord(ax) => match order_of(beta) {
                0 => C64::new(x[*ax], 0.0),
                1 if beta[*ax] == 1 => C64::new(1.0, 0.0),
                _ => zero,
            },
            CoefFn::Sum(v) => v.iter().map(|f| f.d(beta, x)).sum(),
            CoefFn::Prod(v) => leibniz(v, beta, x),
            CoefFn::Deriv(f, b) => f.d(add(*b, beta), x),
        }
    }

    /// Limit as `|x| -> infinity` when it exists.
    pub fn at_infinity(&self) -> Option<C64> {
        let zero = C64::new(0.0, 0.0);
        match self {
            CoefFn::Const(c) => Some(*c),
            CoefFn::Gauss { .. } => Some(zero),
            CoefFn::Bracket { amp, power } => {
                if *power < 0.0 {
                    Some(zero)
                } else if *power == 0.0 {
                    Some(*amp)
                } else {
                    None
                }
            }
            CoefFn::Coord(_) => None,
            CoefFn::Sum(v) => v.iter().map(|f| f.at_infinity()).sum(),
            CoefFn::Prod(v) => {
                let parts: Vec<Option<C64>> = v.iter().map(|f| f.at_infinity()).collect();
                if parts.iter().all(|p| p.is_some()) {
                    Some(parts.iter().map(|p| p.unwrap()).product())
                } else if v.iter().any(|f| matches!(f, CoefFn::Gauss { .. })) {
                    Some(zero)
                } else {
                    None
                }
            }
            CoefFn::Deriv(f, b) => {
                if order_of(*b) == 0 {
                    f.at_infinity()
                } else {
                    f.at_infinity().map(|_| zero)
                }
            }
        }
    }

    pub fn is_real(&self) -> bool {
        match self {
            CoefFn::Const(c) => c.im == 0.0,
            CoefFn::Gauss { amp, .. } | CoefFn::Bracket { amp, .. } => amp.im == 0.0,
            CoefFn::Coord(_) => true,
            CoefFn::Sum(v) | CoefFn::Prod(v) => v.iter().all(|f| f.is_real()),
            CoefFn::Deriv(f, _) => f.is_real(),
        }
    }

    pub fn is_const(&self) -> bool {
        match self {
            CoefFn::Const(_) => true,
            CoefFn::Sum(v) | CoefFn::Prod(v) => v.iter().all(|f| f.is_const()),
            CoefFn::Deriv(f, b) => f.is_const() || order_of(*b) == 0 && f.is_const(),
            _ => self.is_zero(),
        }
    }

    pub fn times(self, other: CoefFn) -> CoefFn {
        CoefFn::Prod(vec![self, other])
    }

    pub fn scaled(self, c: C64) -> CoefFn {
        CoefFn::Prod(vec![CoefFn::Const(c), self])
    }
}

fn leibniz(fs: &[CoefFn], beta: MultiIndex, x: &Point) -> C64 {
    match fs.len() {
        0 => C64::new(1.0, 0.0),
        1 => fs[0].d(beta, x),
        _ => {
            let mut acc = C64::new(0.0, 0.0);
            for g in sub_indices(beta) {
                let head = fs[0].d(g, x);
                if head == C64::new(0.0, 0.0) {
                    continue;
                }
                let w = binom(beta[0], g[0]) * binom(beta[1], g[1]);
                acc += w * head * leibniz(&fs[1..], [beta[0] - g[0], beta[1] - g[1]], x);
            }
            acc
        }
    }
}

/// Serializable coefficient: `base + (amp + i*imag_amp) exp(-|x|^2/width^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefSpec {
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub amp: f64,
    #[serde(default)]
    pub imag_amp: f64,
    #[serde(default = "one")]
    pub width: f64,
}

fn one() -> f64 {
    1.0
}

impl CoefSpec {
    pub fn constant(base: f64) -> Self {
        Self { base, amp: 0.0, imag_amp: 0.0, width: 1.0 }
    }

    pub fn bump(base: f64, amp: f64) -> Self {
        Self { base, amp, imag_amp: 0.0, width: 1.0 }
    }

    pub fn to_coef(&self) -> Result<CoefFn> {
        if !(self.width > 0.0) {
            return Err(Error::InvalidParam(format!("coefficient width {} must be positive", self.width)));
        }
        let mut parts = vec![CoefFn::constant(self.base)];
        if self.amp != 0.0 || self.imag_amp != 0.0 {
            parts.push(CoefFn::Gauss {
                amp: C64::new(self.amp, self.imag_amp),
                width: self.width,
                center: [0.0, 0.0],
            });
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { CoefFn::Sum(parts) })
    }
}

/// One term `coef(x) * xi^power`.
#[derive(Clone, Debug)]
pub struct PolyTerm {
    pub power: MultiIndex,
    pub coef: CoefFn,
    /// Set on terms of the leading homogeneous part.
    pub principal: bool,
}

/// Symbol polynomial in `xi` with smooth coefficients in `x`.
#[derive(Clone, Debug, Default)]
pub struct PolySymbol {
    pub dim: usize,
    pub terms: Vec<PolyTerm>,
}

impl PolySymbol {
    pub fn new(dim: usize) -> Self {
        Self { dim, terms: Vec::new() }
    }

    pub fn push(&mut self, power: MultiIndex, coef: CoefFn, principal: bool) {
        if !coef.is_zero() {
            self.terms.push(PolyTerm { power, coef, principal });
        }
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|t| order_of(t.power)).max().unwrap_or(0)
    }

    pub fn is_x_independent(&self) -> bool {
        self.terms.iter().all(|t| t.coef.is_const())
    }

    pub fn is_real(&self) -> bool {
        self.terms.iter().all(|t| t.coef.is_real())
    }

    pub fn filter(&self, keep: impl Fn(&PolyTerm) -> bool) -> PolySymbol {
        PolySymbol { dim: self.dim, terms: self.terms.iter().filter(|t| keep(t)).cloned().collect() }
    }

    pub fn extend(&mut self, other: &PolySymbol) {
        self.terms.extend(other.terms.iter().cloned());
    }

    /// Split into the `x`-independent far-field part and the remainder.
    pub fn split_far_field(&self) -> Option<(PolySymbol, PolySymbol)> {
        let mut far = PolySymbol::new(self.dim);
        let mut rest = PolySymbol::new(self.dim);
        for t in &self.terms {
            let c = t.coef.at_infinity()?;
            if c != C64::new(0.0, 0.0) {
                far.push(t.power, CoefFn::Const(c), t.principal);
            }
            if !t.coef.is_const() {
                rest.push(t.power, CoefFn::Sum(vec![t.coef.clone(), CoefFn::Const(-c)]), t.principal);
            }
        }
        Some((far, rest))
    }

    pub fn eval_at(&self, x: &Point, xi: &Point) -> C64 {
        self.terms.iter().map(|t| t.coef.eval(x) * monomial_deriv(t.power, ZERO, xi)).sum()
    }

    pub fn deriv_at(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> C64 {
        self.terms
            .iter()
            .map(|t| {
                let m = monomial_deriv(t.power, alpha, xi);
                if m == 0.0 {
                    C64::new(0.0, 0.0)
                } else {
                    t.coef.d(beta, x) * m
                }
            })
            .sum()
    }
}

/// Evaluation interface behind [`Symbol`].
pub trait SymbolFn: Send + Sync {
    fn eval(&self, x: &Point, xi: &Point) -> C64;

    /// Exact derivative when available.
    fn deriv(&self, _alpha: MultiIndex, _beta: MultiIndex, _x: &Point, _xi: &Point) -> Option<C64> {
        None
    }
}

impl SymbolFn for PolySymbol {
    fn eval(&self, x: &Point, xi: &Point) -> C64 {
        self.eval_at(x, xi)
    }

    fn deriv(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> Option<C64> {
        Some(self.deriv_at(alpha, beta, x, xi))
    }
}

struct ClosureSymbol<F>(F);

impl<F> SymbolFn for ClosureSymbol<F>
where
    F: Fn(&Point, &Point) -> C64 + Send + Sync,
{
    fn eval(&self, x: &Point, xi: &Point) -> C64 {
        (self.0)(x, xi)
    }
}

/// `amp * <xi>^power`, exact derivatives.
struct XiBracket {
    amp: f64,
    power: f64,
}

impl SymbolFn for XiBracket {
    fn eval(&self, _x: &Point, xi: &Point) -> C64 {
        C64::new(self.amp * bracket(xi).powf(self.power), 0.0)
    }

    fn deriv(&self, alpha: MultiIndex, beta: MultiIndex, _x: &Point, xi: &Point) -> Option<C64> {
        if order_of(beta) > 0 {
            return Some(C64::new(0.0, 0.0));
        }
        Some(C64::new(self.amp * bracket_deriv(self.power, alpha, xi), 0.0))
    }
}

/// Real part of another symbol.
struct RealPart(Arc<dyn SymbolFn>);

impl SymbolFn for RealPart {
    fn eval(&self, x: &Point, xi: &Point) -> C64 {
        C64::new(self.0.eval(x, xi).re, 0.0)
    }

    fn deriv(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> Option<C64> {
        self.0.deriv(alpha, beta, x, xi).map(|v| C64::new(v.re, 0.0))
    }
}

struct Scaled(Arc<dyn SymbolFn>, f64);

impl SymbolFn for Scaled {
    fn eval(&self, x: &Point, xi: &Point) -> C64 {
        self.0.eval(x, xi) * self.1
    }

    fn deriv(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> Option<C64> {
        self.0.deriv(alpha, beta, x, xi).map(|v| v * self.1)
    }
}

/// A symbol together with its metadata.
#[derive(Clone)]
pub struct Symbol {
    pub name: String,
    pub dim: usize,
    pub order: f64,
    pub real_valued: bool,
    pub classical: bool,
    pub x_independent: bool,
    pub xi_independent: bool,
    func: Arc<dyn SymbolFn>,
    poly: Option<Arc<PolySymbol>>,
    parts: Option<Arc<(Symbol, Symbol)>>,
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Symbol")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("order", &self.order)
            .field("real_valued", &self.real_valued)
            .finish()
    }
}

impl Symbol {
    pub fn from_poly(name: &str, dim: usize, order: f64, poly: PolySymbol) -> Self {
        let poly = Arc::new(PolySymbol { dim, terms: poly.terms });
        Self {
            name: name.to_string(),
            dim,
            order,
            real_valued: poly.is_real(),
            classical: true,
            x_independent: poly.is_x_independent(),
            xi_independent: poly.degree() == 0,
            func: poly.clone(),
            poly: Some(poly),
            parts: None,
        }
    }

    pub fn from_fn<F>(name: &str, dim: usize, order: f64, f: F) -> Self
    where
        F: Fn(&Point, &Point) -> C64 + Send + Sync + 'static,
    {
        Self::custom(name, dim, order, Arc::new(ClosureSymbol(f)))
    }

    pub fn custom(name: &str, dim: usize, order: f64, func: Arc<dyn SymbolFn>) -> Self {
        Self {
            name: name.to_string(),
            dim,
            order,
            real_valued: false,
            classical: false,
            x_independent: false,
            xi_independent: false,
            func,
            poly: None,
            parts: None,
        }
    }

    /// `amp <xi>^power`.
    pub fn xi_bracket(dim: usize, power: f64, amp: f64) -> Self {
        Self::custom("xi_bracket", dim, power, Arc::new(XiBracket { amp, power }))
            .real(true)
            .x_only(false, true)
    }

    /// Multiplication by `coef(x)`.
    pub fn multiplication(dim: usize, coef: CoefFn) -> Self {
        let mut p = PolySymbol::new(dim);
        p.push(ZERO, coef, true);
        Self::from_poly("multiplication", dim, 0.0, p)
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_poly("zero", dim, f64::NEG_INFINITY, PolySymbol::new(dim))
    }

    pub fn real(mut self, flag: bool) -> Self {
        self.real_valued = flag;
        self
    }

    /// Declare `x`/`xi` independence explicitly.
    pub fn x_only(mut self, xi_independent: bool, x_independent: bool) -> Self {
        self.xi_independent = xi_independent;
        self.x_independent = x_independent;
        self
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn with_parts(mut self, principal: Symbol, lower: Symbol) -> Self {
        self.parts = Some(Arc::new((principal, lower)));
        self
    }

    pub fn parts(&self) -> Option<(&Symbol, &Symbol)> {
        self.parts.as_ref().map(|p| (&p.0, &p.1))
    }

    pub fn poly(&self) -> Option<&PolySymbol> {
        self.poly.as_deref()
    }

    pub fn eval(&self, x: &Point, xi: &Point) -> C64 {
        self.func.eval(x, xi)
    }

    /// `d_xi^alpha d_x^beta a`, analytic where possible.
    pub fn deriv(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> C64 {
        if order_of(alpha) + order_of(beta) == 0 {
            return self.eval(x, xi);
        }
        if let Some(v) = self.func.deriv(alpha, beta, x, xi) {
            return v;
        }
        self.peel(alpha, beta, x, xi, FD_STEP, &|a, b, x, xi| self.deriv(a, b, x, xi))
    }

    /// Pure nested central differences of `eval` with relative step `step`.
    pub fn deriv_fd(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point, step: f64) -> C64 {
        if order_of(alpha) + order_of(beta) == 0 {
            return self.eval(x, xi);
        }
        self.peel(alpha, beta, x, xi, step, &|a, b, x, xi| self.deriv_fd(a, b, x, xi, step))
    }

    fn peel(
        &self,
        alpha: MultiIndex,
        beta: MultiIndex,
        x: &Point,
        xi: &Point,
        step: f64,
        inner: &dyn Fn(MultiIndex, MultiIndex, &Point, &Point) -> C64,
    ) -> C64 {
        if let Some(ax) = (0..2).find(|&i| alpha[i] > 0) {
            let mut a = alpha;
            a[ax] -= 1;
            let h = step * (1.0 + norm(xi));
            let (mut p, mut m) = (*xi, *xi);
            p[ax] += h;
            m[ax] -= h;
            (inner(a, beta, x, &p) - inner(a, beta, x, &m)) / (2.0 * h)
        } else {
            let ax = (0..2).find(|&i| beta[i] > 0).expect("nonzero index");
            let mut b = beta;
            b[ax] -= 1;
            let h = step * (1.0 + norm(x));
            let (mut p, mut m) = (*x, *x);
            p[ax] += h;
            m[ax] -= h;
            (inner(alpha, b, &p, xi) - inner(alpha, b, &m, xi)) / (2.0 * h)
        }
    }

    pub fn grad_xi(&self, x: &Point, xi: &Point) -> [C64; 2] {
        let z = C64::new(0.0, 0.0);
        let g0 = self.deriv(unit(0), ZERO, x, xi);
        let g1 = if self.dim == 2 { self.deriv(unit(1), ZERO, x, xi) } else { z };
        [g0, g1]
    }

    pub fn grad_x(&self, x: &Point, xi: &Point) -> [C64; 2] {
        let z = C64::new(0.0, 0.0);
        let g0 = self.deriv(ZERO, unit(0), x, xi);
        let g1 = if self.dim == 2 { self.deriv(ZERO, unit(1), x, xi) } else { z };
        [g0, g1]
    }

    pub fn real_part(&self) -> Symbol {
        if self.real_valued {
            return self.clone();
        }
        let mut s = Symbol::custom(&format!("re({})", self.name), self.dim, self.order, Arc::new(RealPart(self.func.clone())));
        s.real_valued = true;
        s.x_independent = self.x_independent;
        s.xi_independent = self.xi_independent;
        s.classical = self.classical;
        s
    }

    /// `c * a` for real `c`; polynomial structure is kept.
    pub fn scaled(&self, c: f64) -> Symbol {
        if let Some(p) = &self.poly {
            let mut q = PolySymbol::new(self.dim);
            for t in &p.terms {
                q.push(t.power, t.coef.clone().scaled(C64::new(c, 0.0)), t.principal);
            }
            let mut s = Symbol::from_poly(&self.name, self.dim, self.order, q);
            s.real_valued = self.real_valued;
            return s;
        }
        let mut s = self.clone();
        s.func = Arc::new(Scaled(self.func.clone(), c));
        s.parts = None;
        s
    }
}

/// `{a, b} = grad_xi a . grad_x b - grad_x a . grad_xi b`.
pub fn poisson_bracket(a: &Symbol, b: &Symbol, x: &Point, xi: &Point) -> C64 {
    let (axi, ax) = (a.grad_xi(x, xi), a.grad_x(x, xi));
    let (bxi, bx) = (b.grad_xi(x, xi), b.grad_x(x, xi));
    let n = a.dim.max(b.dim);
    (0..n).map(|j| axi[j] * bx[j] - ax[j] * bxi[j]).sum()
}

/// Catalog parameters; unused keys are rejected at deserialization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolParams {
    /// Dimension for `kdv_sum`, `ultrahyperbolic` and `poly`.
    pub n: Option<usize>,
    /// Bump amplitude for `gaussian_kdv` and `ultrahyperbolic`.
    pub eps: Option<f64>,
    /// Symmetric principal matrix for `ultrahyperbolic`.
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Terms of a `poly` symbol.
    pub terms: Option<Vec<TermSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub power: Vec<usize>,
    pub coef: CoefSpec,
}

pub const CATALOG: [&str; 6] = ["airy", "zk", "kdv_sum", "ultrahyperbolic", "gaussian_kdv", "poly"];

pub fn catalog_description(name: &str) -> &'static str {
    match name {
        "airy" => "xi^3 (n = 1)",
        "zk" => "xi_1 (xi_1^2 + xi_2^2) (n = 2)",
        "kdv_sum" => "sum_l xi_l |xi|^2 (params: n)",
        "ultrahyperbolic" => "-sum a_ij xi_i xi_j - sum_k (sum_l d_l a_lk) xi_k, a_ij = M_ij (1 + eps e^{-|x|^2}) (params: matrix, eps)",
        "gaussian_kdv" => "(1 + eps e^{-|x|^2}) xi^3 (params: eps)",
        "poly" => "sum of coef(x) xi^power terms (params: n, terms)",
        _ => "",
    }
}

fn principal_split(name: &str, dim: usize, order: f64, poly: PolySymbol) -> Symbol {
    let top = order as usize;
    let lead = poly.filter(|t| order_of(t.power) == top);
    let rest = poly.filter(|t| order_of(t.power) != top);
    let am = Symbol::from_poly(&format!("{name}_principal"), dim, order, lead);
    let lower = Symbol::from_poly(&format!("{name}_lower"), dim, order - 1.0, rest);
    Symbol::from_poly(name, dim, order, poly).with_parts(am, lower)
}

/// Build a catalog symbol.
pub fn catalog(name: &str, params: &SymbolParams) -> Result<Symbol> {
    let one = CoefFn::constant(1.0);
    match name {
        "airy" => {
            let mut p = PolySymbol::new(1);
            p.push([3, 0], one, true);
            Ok(principal_split(name, 1, 3.0, p))
        }
        "zk" => {
            let mut p = PolySymbol::new(2);
            p.push([3, 0], one.clone(), true);
            p.push([1, 2], one, true);
            Ok(principal_split(name, 2, 3.0, p))
        }
        "kdv_sum" => {
            let n = params.n.unwrap_or(2);
            if n != 1 && n != 2 {
                return Err(Error::InvalidParam(format!("kdv_sum dimension {n} not in {{1, 2}}")));
            }
            let mut p = PolySymbol::new(n);
            for l in 0..n {
                for j in 0..n {
                    let mut pw = unit(l);
                    pw[j] += 2;
                    p.push(pw, one.clone(), true);
                }
            }
            Ok(principal_split(name, n, 3.0, p))
        }
        "gaussian_kdv" => {
            let eps = params.eps.unwrap_or(0.05);
            let mut p = PolySymbol::new(1);
            p.push([3, 0], CoefFn::Sum(vec![one, CoefFn::gauss(eps, 1.0)]), true);
            Ok(principal_split(name, 1, 3.0, p))
        }
        "ultrahyperbolic" => ultrahyperbolic(params),
        "poly" => {
            let n = params.n.unwrap_or(1);
            if n != 1 && n != 2 {
                return Err(Error::InvalidParam(format!("poly dimension {n} not in {{1, 2}}")));
            }
            let terms = params
                .terms
                .as_ref()
                .ok_or_else(|| Error::InvalidParam("poly requires `terms`".into()))?;
            let mut p = PolySymbol::new(n);
            for t in terms {
                if t.power.len() != n {
                    return Err(Error::InvalidParam(format!("power {:?} does not match dimension {n}", t.power)));
                }
                let pw = if n == 1 { [t.power[0], 0] } else { [t.power[0], t.power[1]] };
                p.push(pw, t.coef.to_coef()?, true);
            }
            let order = p.degree() as f64;
            let top = p.degree();
            for t in p.terms.iter_mut() {
                t.principal = order_of(t.power) == top;
            }
            Ok(principal_split(name, n, order, p))
        }
        other => Err(Error::UnknownSymbol(other.to_string())),
    }
}

fn ultrahyperbolic(params: &SymbolParams) -> Result<Symbol> {
    let m = params.matrix.clone().unwrap_or_else(|| vec![vec![1.0, 0.0], vec![0.0, -1.0]]);
    let n = m.len();
    if !(n == 1 || n == 2) || m.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidParam("ultrahyperbolic matrix must be 1x1 or 2x2".into()));
    }
    for i in 0..n {
        for j in 0..n {
            if (m[i][j] - m[j][i]).abs() > 1e-14 {
                return Err(Error::InvalidParam("ultrahyperbolic matrix is not symmetric".into()));
            }
        }
    }
    let eps = params.eps.unwrap_or(0.05);
    if 1.0 + eps.min(0.0) <= 0.0 {
        return Err(Error::InvalidParam(format!("bump amplitude {eps} makes the coefficients vanish")));
    }
    let sv_min = if n == 1 {
        m[0][0].abs()
    } else {
        let mat = nalgebra::Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
        mat.singular_values().min()
    };
    if sv_min < 1e-12 {
        return Err(Error::InvalidParam("ultrahyperbolic matrix is degenerate".into()));
    }
    let coef = |i: usize, j: usize| {
        CoefFn::Sum(vec![CoefFn::constant(m[i][j]), CoefFn::gauss(m[i][j] * eps, 1.0)])
    };
    let mut p = PolySymbol::new(n);
    for i in 0..n {
        for j in 0..n {
            let mut pw = unit(i);
            pw[j] += 1;
            p.push(pw, coef(i, j).scaled(C64::new(-1.0, 0.0)), true);
        }
    }
    for k in 0..n {
        let div = CoefFn::Sum((0..n).map(|l| coef(l, k).derivative(unit(l))).collect());
        p.push(unit(k), div.scaled(C64::new(-1.0, 0.0)), false);
    }
    Ok(principal_split("ultrahyperbolic", n, 2.0, p))
}

/// Non-degeneracy constant `nu` of `nu^{-1}|xi| <= |A(x) xi| <= nu |xi|` for the catalog coefficients.
pub fn ultrahyperbolic_nu(params: &SymbolParams) -> Result<f64> {
    ultrahyperbolic(params)?;
    let m = params.matrix.clone().unwrap_or_else(|| vec![vec![1.0, 0.0], vec![0.0, -1.0]]);
    let eps = params.eps.unwrap_or(0.05);
    let (lo, hi) = (1.0 + eps.min(0.0), 1.0 + eps.max(0.0));
    let (smin, smax) = if m.len() == 1 {
        (m[0][0].abs(), m[0][0].abs())
    } else {
        let sv = nalgebra::Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]).singular_values();
        (sv.min(), sv.max())
    };
    Ok((hi * smax).max(1.0 / (lo * smin)))
}

/// Phase-space probe points: log-spaced shells times directions times an `x` lattice.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub dim: usize,
    pub xs: Vec<Point>,
    pub xis: Vec<Point>,
    /// Shell radius of each entry of `xis`.
    pub radii: Vec<f64>,
    pub x_half: f64,
    pub xi_max: f64,
}

impl SampleSet {
    /// Default: 24 shells on `[1, N pi/(2L)]`, 32 directions (n = 2), 33 lattice points per axis.
    pub fn standard(grid: &Grid) -> Self {
        Self::new(grid.dim(), grid.half_width(), 1.0, grid.xi_max(), 24, 32, 33)
    }

    pub fn new(dim: usize, x_half: f64, xi_min: f64, xi_max: f64, shells: usize, dirs: usize, x_count: usize) -> Self {
        let mut xis = Vec::new();
        let mut radii = Vec::new();
        for s in 0..shells {
            let r = if shells == 1 {
                xi_min
            } else {
                xi_min * (xi_max / xi_min).powf(s as f64 / (shells - 1) as f64)
            };
            if dim == 1 {
                for sign in [1.0, -1.0] {
                    xis.push([sign * r, 0.0]);
                    radii.push(r);
                }
            } else {
                for d in 0..dirs {
                    let th = 2.0 * std::f64::consts::PI * d as f64 / dirs as f64;
                    xis.push([r * th.cos(), r * th.sin()]);
                    radii.push(r);
                }
            }
        }
        let line: Vec<f64> = (0..x_count)
            .map(|i| if x_count == 1 { 0.0 } else { -x_half + 2.0 * x_half * i as f64 / (x_count - 1) as f64 })
            .collect();
        let xs = if dim == 1 {
            line.iter().map(|&a| [a, 0.0]).collect()
        } else {
            line.iter().flat_map(|&a| line.iter().map(move |&b| [a, b])).collect()
        };
        Self { dim, xs, xis, radii, x_half, xi_max }
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.xis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn describe(&self) -> String {
        format!(
            "{} x-points on [-{:.3}, {:.3}]^{}, {} frequencies with |xi| in [{:.3}, {:.3}]",
            self.xs.len(),
            self.x_half,
            self.x_half,
            self.dim,
            self.xis.len(),
            self.radii.iter().cloned().fold(f64::INFINITY, f64::min),
            self.xi_max
        )
    }

    /// Largest shell radius below which a fraction `frac` of shells lies.
    pub fn radius_quantile(&self, frac: f64) -> f64 {
        let mut r = self.radii.clone();
        r.sort_by(f64::total_cmp);
        r.dedup();
        let i = ((r.len() as f64 - 1.0) * frac).floor() as usize;
        r[i.min(r.len() - 1)]
    }

    /// Map `f` over all `(x, xi)` pairs in parallel, returning the max of the
    /// first output together with the pair attaining it.
    pub fn max_over(&self, f: impl Fn(&Point, &Point) -> f64 + Sync) -> (f64, Point, Point) {
        self.xs
            .par_iter()
            .map(|x| {
                let mut best = (f64::NEG_INFINITY, *x, [0.0, 0.0]);
                for xi in &self.xis {
                    let v = f(x, xi);
                    if v > best.0 || v.is_nan() {
                        best = (if v.is_nan() { f64::INFINITY } else { v }, *x, *xi);
                    }
                }
                best
            })
            .reduce(|| (f64::NEG_INFINITY, [0.0; 2], [0.0; 2]), |a, b| if b.0 > a.0 { b } else { a })
    }

    pub fn min_over(&self, f: impl Fn(&Point, &Point) -> f64 + Sync) -> (f64, Point, Point) {
        let (v, x, xi) = self.max_over(|x, xi| -f(x, xi));
        (-v, x, xi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }

    pub fn and(self, other: Verdict) -> Verdict {
        match (self, other) {
            (Verdict::Fail, _) | (_, Verdict::Fail) => Verdict::Fail,
            (Verdict::Inconclusive, _) | (_, Verdict::Inconclusive) => Verdict::Inconclusive,
            _ => Verdict::Pass,
        }
    }

    /// Compare a fitted value against an upper threshold with a relative band.
    pub fn at_most(value: f64, threshold: f64) -> Verdict {
        if !value.is_finite() {
            return Verdict::Fail;
        }
        let band = 1e-3 * threshold.abs();
        if value < threshold - band {
            Verdict::Pass
        } else if value > threshold + band {
            Verdict::Fail
        } else {
            Verdict::Inconclusive
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub samples: String,
    pub constants: BTreeMap<String, f64>,
    pub worst_x: Point,
    pub worst_xi: Point,
    pub verdict: Verdict,
}

/// Pass thresholds for the condition checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Upper bound on the fitted x-decay constant.
    #[serde(default = "one")]
    pub eps: f64,
    /// Upper bound on the fitted imaginary-part constant.
    #[serde(default = "one")]
    pub c0: f64,
    /// Fitted ellipticity constants above this count as degenerate.
    #[serde(default = "cap")]
    pub c_cap: f64,
}

fn cap() -> f64 {
    1e6
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { eps: 1.0, c0: 1.0, c_cap: 1e6 }
    }
}

fn xi_power(xi: &Point, p: f64) -> f64 {
    norm(xi).max(XI_FLOOR).powf(p)
}

/// Gradient ellipticity of `Re a`: `|xi|^{m-1}/C <= |grad_xi Re a| <= C |xi|^{m-1}`.
pub fn check_grad_ellipticity(a: &Symbol, s: &SampleSet, th: &Thresholds) -> ConditionReport {
    let m = a.order;
    let grad = |x: &Point, xi: &Point| {
        let g = a.grad_xi(x, xi);
        (g[0].re * g[0].re + g[1].re * g[1].re).sqrt()
    };
    let (lower, wx, wxi) = s.max_over(|x, xi| {
        let g = grad(x, xi);
        if g == 0.0 {
            f64::INFINITY
        } else {
            xi_power(xi, m - 1.0) / g
        }
    });
    let (upper, _, _) = s.max_over(|x, xi| grad(x, xi) / xi_power(xi, m - 1.0));
    let ok = lower.is_finite() && upper.is_finite() && lower <= th.c_cap && upper <= th.c_cap;
    let mut constants = BTreeMap::new();
    constants.insert("c_lower".into(), lower);
    constants.insert("c_upper".into(), upper);
    constants.insert("c".into(), lower.max(upper));
    ConditionReport {
        condition: "gradient_ellipticity".into(),
        samples: s.describe(),
        constants,
        worst_x: wx,
        worst_xi: wxi,
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
    }
}

/// All `(alpha, beta)` with `|beta| >= 1` and `|alpha| + |beta| <= k`.
pub fn decay_indices(dim: usize, k: usize) -> Vec<(MultiIndex, MultiIndex)> {
    let mut out = Vec::new();
    for bo in 1..=k {
        for beta in indices_of_order(dim, bo) {
            for ao in 0..=(k - bo) {
                for alpha in indices_of_order(dim, ao) {
                    out.push((alpha, beta));
                }
            }
        }
    }
    out
}

/// x-decay of `Re a`: fitted `eps` with `|d_x^beta d_xi^alpha Re a| <= eps lambda |xi|^{m-|alpha|}`.
pub fn check_x_decay(a: &Symbol, lambda: &WeightFn, s: &SampleSet, max_order: usize, th: &Thresholds) -> ConditionReport {
    let idx = decay_indices(a.dim, max_order.max(1));
    let (eps, wx, wxi) = if a.x_independent {
        (0.0, [0.0; 2], [0.0; 2])
    } else {
        s.max_over(|x, xi| {
            let w = lambda.eval(norm(x));
            idx.iter()
                .map(|(al, be)| {
                    a.deriv(*al, *be, x, xi).re.abs() / (w * xi_power(xi, a.order - order_of(*al) as f64))
                })
                .fold(0.0, f64::max)
        })
    };
    let mut constants = BTreeMap::new();
    constants.insert("eps_hat".into(), eps);
    constants.insert("threshold".into(), th.eps);
    constants.insert("max_order".into(), max_order as f64);
    ConditionReport {
        condition: "x_decay".into(),
        samples: s.describe(),
        constants,
        worst_x: wx,
        worst_xi: wxi,
        verdict: Verdict::at_most(eps, th.eps),
    }
}

/// Smallness of the imaginary lower-order part: `|Im a_{m-1}| <= c0 lambda |xi|^{m-1}`.
pub fn check_im_smallness(a: &Symbol, lambda: &WeightFn, s: &SampleSet, th: &Thresholds) -> Result<ConditionReport> {
    let (_, lower) = a.parts().ok_or(Error::MissingSplit)?;
    let (c0, wx, wxi) = if a.real_valued || lower.real_valued {
        (0.0, [0.0; 2], [0.0; 2])
    } else {
        s.max_over(|x, xi| lower.eval(x, xi).im.abs() / (lambda.eval(norm(x)) * xi_power(xi, a.order - 1.0)))
    };
    let mut constants = BTreeMap::new();
    constants.insert("c0_hat".into(), c0);
    constants.insert("threshold".into(), th.c0);
    Ok(ConditionReport {
        condition: "im_smallness".into(),
        samples: s.describe(),
        constants,
        worst_x: wx,
        worst_xi: wxi,
        verdict: Verdict::at_most(c0, th.c0),
    })
}

/// `sup |d_x^beta d_xi^alpha a| <xi>^{-m+|alpha|}` over `|alpha| + |beta| <= k`.
pub fn seminorm_estimate(a: &Symbol, k: usize, s: &SampleSet) -> f64 {
    let mut idx = Vec::new();
    for t in 0..=k {
        for ao in 0..=t {
            for alpha in indices_of_order(a.dim, ao) {
                for beta in indices_of_order(a.dim, t - ao) {
                    idx.push((alpha, beta));
                }
            }
        }
    }
    let f = |x: &Point, xi: &Point| {
        idx.iter()
            .map(|(al, be)| a.deriv(*al, *be, x, xi).norm() * bracket(xi).powf(order_of(*al) as f64 - a.order))
            .fold(0.0, f64::max)
    };
    let (v, _, _) = s.max_over(f);
    let origin = s.xs.iter().map(|x| f(x, &[0.0, 0.0])).fold(0.0, f64::max);
    v.max(origin)
}

/// Coefficients `a_ij(x)` of the vector fields `X_j = sum_i a_ij(x) xi_i`.
#[derive(Clone, Debug)]
pub struct VectorFieldSystem {
    pub dim: usize,
    /// `coef[i][j] = a_ij`.
    pub coef: Vec<Vec<CoefFn>>,
}

/// Output of [`build_kdv_type`].
#[derive(Clone, Debug)]
pub struct KdvTypeSymbols {
    /// Full Weyl symbol `a3 + a2`, with that split attached.
    pub full: Symbol,
    pub a3: Symbol,
    pub re_a2: Symbol,
    /// Degree-two imaginary part from the bracket formula.
    pub im_a2: Symbol,
    pub qualifying: Vec<KQualification>,
}

/// Candidate index `k` for the lower bound on `d_{xi_k} X_1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KQualification {
    pub k: usize,
    /// `inf_x |a_k1(x)|` on the probe lattice.
    pub c: f64,
    /// `max_{j >= 2} sup_x |a_kj(x)|^2`.
    pub sup_akj_sq: f64,
    /// `3C/(n-1)`, infinite for `n = 1`.
    pub bound: f64,
    pub qualifies: bool,
}

impl VectorFieldSystem {
    pub fn from_specs(specs: &[Vec<CoefSpec>]) -> Result<Self> {
        let n = specs.len();
        if !(n == 1 || n == 2) || specs.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidParam("vector-field coefficients must be 1x1 or 2x2".into()));
        }
        let coef = specs.iter().map(|r| r.iter().map(|c| c.to_coef()).collect::<Result<Vec<_>>>()).collect::<Result<_>>()?;
        Ok(Self { dim: n, coef })
    }

    /// Kohn-Nirenberg symbol of `X_j`.
    pub fn field(&self, j: usize) -> PolySymbol {
        let mut p = PolySymbol::new(self.dim);
        for i in 0..self.dim {
            p.push(unit(i), self.coef[i][j].clone(), true);
        }
        p
    }

    /// `d_{X_j} = (1/2) sum_i D_i a_ij = -(i/2) sum_i d_i a_ij`.
    pub fn correction(&self, j: usize) -> CoefFn {
        CoefFn::Sum((0..self.dim).map(|i| self.coef[i][j].derivative(unit(i))).collect()).scaled(C64::new(0.0, -0.5))
    }

    /// Weyl symbol `X_j + d_{X_j}`.
    pub fn weyl_field(&self, j: usize) -> PolySymbol {
        let mut p = self.field(j);
        p.push(ZERO, self.correction(j), false);
        p
    }
}

/// Weyl symbol of `sum_j X_1 X_j X_j` split into `a3` and the lower part.
pub fn build_kdv_type(sys: &VectorFieldSystem, probe: &SampleSet) -> Result<KdvTypeSymbols> {
    let n = sys.dim;
    for j in 0..n {
        let d = sys.correction(j);
        for x in &probe.xs {
            let v = d.eval(x);
            if v.re.abs() > 1e-12 * (1.0 + v.im.abs()) {
                return Err(Error::InvalidParam(format!(
                    "correction d_X{} = {v} is not purely imaginary at {x:?}",
                    j + 1
                )));
            }
        }
    }
    let x1 = sys.weyl_field(0);
    let mut full = PolySymbol::new(n);
    for j in 0..n {
        let xj = sys.weyl_field(j);
        let sq = crate::calculus::compose_poly(&xj, &xj, 2);
        full.extend(&crate::calculus::compose_poly(&x1, &sq, 3));
    }
    let a3 = full.filter(|t| t.principal);
    let a2 = full.filter(|t| !t.principal);
    let a3s = Symbol::from_poly("kdv_type_a3", n, 3.0, a3).real(true);
    let a2s = Symbol::from_poly("kdv_type_a2", n, 2.0, a2);
    let re_a2 = a2s.real_part().named("kdv_type_re_a2");

    let fields: Vec<Symbol> = (0..n).map(|j| Symbol::from_poly("X", n, 1.0, sys.field(j)).real(true)).collect();
    let im_d: Vec<CoefFn> = (0..n).map(|j| sys.correction(j)).collect();
    let im_a2 = {
        let fields = fields.clone();
        Symbol::from_fn("kdv_type_im_a2", n, 2.0, move |x, xi| {
            let x1v = fields[0].eval(x, xi).re;
            let mut acc = 0.0;
            for j in 0..fields.len() {
                let xj = &fields[j];
                let xjv = xj.eval(x, xi).re;
                // {X_1, X_j^2} = 2 X_j {X_1, X_j}
                let br = 2.0 * xjv * poisson_bracket(&fields[0], xj, x, xi).re;
                let d1 = im_d[0].eval(x).im;
                let dj = im_d[j].eval(x).im;
                acc += br - 2.0 * d1 * xjv * xjv - 4.0 * dj * x1v * xjv;
            }
            C64::new(-0.5 * acc, 0.0)
        })
        .real(true)
    };
    let full_sym = Symbol::from_poly("kdv_type", n, 3.0, full).with_parts(a3s.clone(), a2s);

    let mut qualifying = Vec::new();
    for k in 0..n {
        let c = probe.xs.iter().map(|x| sys.coef[k][0].eval(x).norm()).fold(f64::INFINITY, f64::min);
        let sup = (1..n)
            .map(|j| probe.xs.iter().map(|x| sys.coef[k][j].eval(x).norm_sqr()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let bound = if n == 1 { f64::INFINITY } else { 3.0 * c / (n as f64 - 1.0) };
        qualifying.push(KQualification { k: k + 1, c, sup_akj_sq: sup, bound, qualifies: c > 0.0 && sup < bound });
    }
    Ok(KdvTypeSymbols { full: full_sym, a3: a3s, re_a2, im_a2, qualifying })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn airy_gradient() {
        let a = catalog("airy", &SymbolParams::default()).unwrap();
        for xi in [0.5, 1.0, -2.0] {
            assert_eq!(a.eval(&[0.3, 0.0], &[xi, 0.0]).re, xi * xi * xi);
            assert_eq!(a.grad_xi(&[0.0, 0.0], &[xi, 0.0])[0].re, 3.0 * xi * xi);
        }
    }

    #[test]
    fn kdv_sum_divergence_in_xi() {
        let a = catalog("kdv_sum", &SymbolParams { n: Some(2), ..Default::default() }).unwrap();
        let xi = [1.0, -1.0];
        let g = a.grad_xi(&[0.0; 2], &xi);
        assert!((g[0].re + g[1].re - 4.0).abs() < 1e-14);
        let (n, s2, sum) = (2.0, 2.0, 0.0f64);
        assert!((n * s2 + 2.0 * sum * sum - 4.0).abs() < 1e-14);
    }

    #[test]
    fn zk_gradient_at_pole() {
        let a = catalog("zk", &SymbolParams::default()).unwrap();
        let g = a.grad_xi(&[0.0; 2], &[0.0, 1.0]);
        assert_eq!([g[0].re, g[1].re], [1.0, 0.0]);
    }

    #[test]
    fn catalog_errors() {
        assert!(matches!(catalog("nope", &SymbolParams::default()), Err(Error::UnknownSymbol(_))));
        let bad = SymbolParams { matrix: Some(vec![vec![1.0, 0.5], vec![0.0, -1.0]]), ..Default::default() };
        assert!(matches!(catalog("ultrahyperbolic", &bad), Err(Error::InvalidParam(_))));
        let degenerate = SymbolParams { matrix: Some(vec![vec![1.0, 1.0], vec![1.0, 1.0]]), ..Default::default() };
        assert!(catalog("ultrahyperbolic", &degenerate).is_err());
    }

    #[test]
    fn ultrahyperbolic_matches_definition() {
        let params = SymbolParams { eps: Some(0.1), ..Default::default() };
        let a = catalog("ultrahyperbolic", &params).unwrap();
        let (x, xi) = ([0.4, -0.7], [1.3, 0.6]);
        let g = (-(x[0] * x[0] + x[1] * x[1]) as f64).exp();
        let s = 1.0 + 0.1 * g;
        let principal = -(s * xi[0] * xi[0] - s * xi[1] * xi[1]);
        // d_l a_lk with a = M(1 + eps g): M_kk eps d_k g
        let first = -(0.1 * (-2.0 * x[0] * g) * xi[0] + (-1.0) * 0.1 * (-2.0 * x[1] * g) * xi[1]);
        assert!(close(a.eval(&x, &xi).re, principal + first, 1e-14));
        assert!(a.real_valued);
        let nu = ultrahyperbolic_nu(&params).unwrap();
        assert!((nu - 1.1).abs() < 1e-12);
    }

    #[test]
    fn parts_sum_to_symbol() {
        for name in ["airy", "zk", "kdv_sum", "ultrahyperbolic", "gaussian_kdv"] {
            let a = catalog(name, &SymbolParams::default()).unwrap();
            let (am, lower) = a.parts().unwrap();
            for (x, xi) in [([0.2, 0.1], [1.5, -0.5]), ([-1.0, 2.0], [0.3, 2.0])] {
                let lhs = a.eval(&x, &xi);
                let rhs = am.eval(&x, &xi) + lower.eval(&x, &xi);
                assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()), "{name}");
                assert!(lhs.im.abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn bracket_derivatives_match_hand_formulas() {
        // d/dy <y>^s = s y <y>^{s-2}; d^2/dy^2 = s<y>^{s-2} + s(s-2) y^2 <y>^{s-4}
        let (s, y) = (-2.0, 0.7);
        let b = 1.0 + y * y;
        assert!(close(bracket_deriv(s, [1, 0], &[y, 0.0]), s * y * b.powf(s / 2.0 - 1.0), 1e-14));
        let d2 = s * b.powf(s / 2.0 - 1.0) + s * (s - 2.0) * y * y * b.powf(s / 2.0 - 2.0);
        assert!(close(bracket_deriv(s, [2, 0], &[y, 0.0]), d2, 1e-14));
        let p = [0.3, -0.8];
        let num = (bracket_deriv(1.5, [1, 0], &[p[0], p[1] + 1e-5]) - bracket_deriv(1.5, [1, 0], &[p[0], p[1] - 1e-5])) / 2e-5;
        assert!(close(bracket_deriv(1.5, [1, 1], &p), num, 1e-8));
    }

    #[test]
    fn gauss_derivatives_match_hand_formulas() {
        let g = CoefFn::gauss(1.0, 1.0);
        let x = 0.6f64;
        let e = (-x * x).exp();
        assert!(close(g.d([1, 0], &[x, 0.0]).re, -2.0 * x * e, 1e-14));
        assert!(close(g.d([2, 0], &[x, 0.0]).re, (4.0 * x * x - 2.0) * e, 1e-14));
        assert!(close(g.d([3, 0], &[x, 0.0]).re, (12.0 * x - 8.0 * x * x * x) * e, 1e-14));
    }

    #[test]
    fn product_rule() {
        let f = CoefFn::Prod(vec![CoefFn::Coord(0), CoefFn::gauss(2.0, 1.0)]);
        let x = 0.4f64;
        let e = (-x * x).exp();
        // d/dx (2 x e^{-x^2}) = 2 e - 4x^2 e
        assert!(close(f.d([1, 0], &[x, 0.0]).re, 2.0 * e - 4.0 * x * x * e, 1e-14));
    }

    #[test]
    fn ellipticity_examples() {
        let g = Grid::new(1, 10.0, 64).unwrap();
        let s = SampleSet::standard(&g);
        let th = Thresholds::default();
        let airy = check_grad_ellipticity(&catalog("airy", &SymbolParams::default()).unwrap(), &s, &th);
        assert!(close(airy.constants["c_lower"], 1.0 / 3.0, 1e-14));
        assert!(close(airy.constants["c_upper"], 3.0, 1e-14));
        assert_eq!(airy.verdict, Verdict::Pass);

        let g2 = Grid::new(2, 10.0, 32).unwrap();
        let s2 = SampleSet::standard(&g2);
        let zk = check_grad_ellipticity(&catalog("zk", &SymbolParams::default()).unwrap(), &s2, &th);
        // Oracle: |grad a|/|xi|^2 on a fine scan of the unit circle.
        let oracle = (0..100000)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 100000.0;
                let (c, s) = (t.cos(), t.sin());
                let g0 = 3.0 * c * c + s * s;
                let g1 = 2.0 * c * s;
                (g0 * g0 + g1 * g1).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(close(1.0 / zk.constants["c_lower"], oracle, 1e-9));
        assert!(close(oracle, 1.0, 1e-9));
        assert_eq!(zk.verdict, Verdict::Pass);

        let cubic = SymbolParams {
            n: Some(2),
            terms: Some(vec![TermSpec { power: vec![3, 0], coef: CoefSpec::constant(1.0) }]),
            ..Default::default()
        };
        let bad = check_grad_ellipticity(&catalog("poly", &cubic).unwrap(), &s2, &th);
        assert_eq!(bad.verdict, Verdict::Fail);
        assert!(bad.worst_xi[0].abs() < 1e-12);
    }

    #[test]
    fn x_decay_examples() {
        let g = Grid::new(1, 10.0, 128).unwrap();
        let s = SampleSet::standard(&g);
        let lam = WeightFn::new(2).unwrap();
        let th = Thresholds::default();
        let airy = check_x_decay(&catalog("airy", &SymbolParams::default()).unwrap(), &lam, &s, 3, &th);
        assert_eq!(airy.constants["eps_hat"], 0.0);
        assert_eq!(airy.verdict, Verdict::Pass);

        // Oracle: direct scan of the closed-form derivatives of (1 + eps e^{-x^2}) xi^3.
        let scan = |eps: f64| {
            let mut best = 0.0f64;
            for x in &s.xs {
                let y = x[0];
                let e = (-y * y).exp();
                let dg = [-2.0 * y * e, (4.0 * y * y - 2.0) * e, (12.0 * y - 8.0 * y * y * y) * e];
                let w = (1.0 + y * y).powi(-1);
                for r in s.radii.iter().cloned() {
                    // (beta, alpha) with beta >= 1, alpha + beta <= 3; ratio is r-independent.
                    let _ = r;
                    for (b, a) in [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (3, 0)] {
                        let mono: f64 = (0..a).map(|i| (3 - i) as f64).product();
                        best = best.max(eps * dg[b - 1].abs() * mono / w);
                    }
                }
            }
            best
        };
        let small = check_x_decay(&catalog("gaussian_kdv", &SymbolParams { eps: Some(0.05), ..Default::default() }).unwrap(), &lam, &s, 3, &th);
        assert!(close(small.constants["eps_hat"], scan(0.05), 1e-10));
        assert_eq!(small.verdict, Verdict::Pass);
        let big = check_x_decay(&catalog("gaussian_kdv", &SymbolParams { eps: Some(5.0), ..Default::default() }).unwrap(), &lam, &s, 3, &th);
        assert!(close(big.constants["eps_hat"], scan(5.0), 1e-10));
        assert_eq!(big.verdict, Verdict::Fail);
    }

    #[test]
    fn im_smallness_examples() {
        let g = Grid::new(1, 10.0, 64).unwrap();
        let s = SampleSet::standard(&g);
        let lam = WeightFn::new(2).unwrap();
        let th = Thresholds::default();
        let airy = catalog("airy", &SymbolParams::default()).unwrap();
        assert_eq!(check_im_smallness(&airy, &lam, &s, &th).unwrap().constants["c0_hat"], 0.0);

        let mut lower = PolySymbol::new(1);
        lower.push([2, 0], CoefFn::Const(C64::new(0.0, 1.0)), false);
        let lower = Symbol::from_poly("im", 1, 2.0, lower);
        let bad = airy.clone().with_parts(airy.clone(), lower);
        let mut bad = bad;
        bad.real_valued = false;
        let rep = check_im_smallness(&bad, &lam, &s, &th).unwrap();
        assert_eq!(rep.verdict, Verdict::Fail);
        assert!(close(rep.constants["c0_hat"], 101.0, 1e-12));
        let bare = Symbol::xi_bracket(1, 1.0, 1.0);
        assert!(matches!(check_im_smallness(&bare, &lam, &s, &th), Err(Error::MissingSplit)));
    }

    #[test]
    fn seminorm_examples() {
        let g = Grid::new(1, 10.0, 64).unwrap();
        let s = SampleSet::new(1, 10.0, 1.0, 1e4, 24, 1, 33);
        let one = Symbol::multiplication(1, CoefFn::constant(1.0));
        assert!((seminorm_estimate(&one, 3, &s) - 1.0).abs() < 1e-14);
        let airy = catalog("airy", &SymbolParams::default()).unwrap();
        assert!((seminorm_estimate(&airy, 0, &s) - 1.0).abs() < 1e-6);
        let zk = catalog("zk", &SymbolParams::default()).unwrap();
        let s2 = SampleSet::standard(&Grid::new(2, 10.0, 32).unwrap());
        let v = seminorm_estimate(&zk, 1, &s2);
        assert!(v.is_finite() && v >= 1.0 && v < 10.0, "{v}");
        let _ = g;
    }

    #[test]
    fn kdv_type_constant_coefficients() {
        let specs = vec![
            vec![CoefSpec::constant(1.0), CoefSpec::constant(0.0)],
            vec![CoefSpec::constant(0.0), CoefSpec::constant(1.0)],
        ];
        let sys = VectorFieldSystem::from_specs(&specs).unwrap();
        let probe = SampleSet::new(2, 5.0, 1.0, 10.0, 4, 8, 5);
        let out = build_kdv_type(&sys, &probe).unwrap();
        for x in &probe.xs {
            for xi in &probe.xis {
                let a3 = out.a3.eval(x, xi).re;
                assert!(close(a3, xi[0] * (xi[0] * xi[0] + xi[1] * xi[1]), 1e-14));
                assert_eq!(out.re_a2.eval(x, xi).re, 0.0);
                assert_eq!(out.im_a2.eval(x, xi).re, 0.0);
            }
        }
        assert!(out.qualifying.iter().any(|q| q.k == 1 && q.qualifies));
    }

    #[test]
    fn kdv_type_one_dimensional_bracket_oracle() {
        // a11 = 1 + eps e^{-x^2}; hand expansion: in 1D {X, X^2} = 0 and d = -(i/2) a',
        // so the degree-two imaginary part is -(1/2)(-2 Im d - 4 Im d) a^2 xi^2 = 3 Im(d) a^2 xi^2.
        let eps = 0.2;
        let sys = VectorFieldSystem::from_specs(&[vec![CoefSpec::bump(1.0, eps)]]).unwrap();
        let probe = SampleSet::new(1, 3.0, 1.0, 5.0, 3, 1, 7);
        let out = build_kdv_type(&sys, &probe).unwrap();
        for (x, xi) in [(0.0f64, 1.0f64), (0.7, 1.3), (-1.1, -2.0)] {
            let e = (-x * x).exp();
            let a = 1.0 + eps * e;
            let ap = -2.0 * x * eps * e;
            let want = 3.0 * (-0.5 * ap) * a * a * xi * xi;
            let got = out.im_a2.eval(&[x, 0.0], &[xi, 0.0]).re;
            assert!(close(got, want, 1e-12), "{got} vs {want}");
            // The composed symbol's degree-two imaginary coefficient agrees.
            let deg2: f64 = out
                .full
                .poly()
                .unwrap()
                .terms
                .iter()
                .filter(|t| order_of(t.power) == 2)
                .map(|t| t.coef.eval(&[x, 0.0]).im * xi * xi)
                .sum();
            assert!(close(deg2, want, 1e-12), "{deg2} vs {want}");
        }
        assert!(close(out.im_a2.eval(&[0.0, 0.0], &[1.0, 0.0]).re, 0.0, 1e-15));
    }

    #[test]
    fn kdv_type_rejects_complex_coefficients() {
        let bad = CoefSpec { base: 1.0, amp: 0.0, imag_amp: 0.3, width: 1.0 };
        let sys = VectorFieldSystem::from_specs(&[vec![bad]]).unwrap();
        let probe = SampleSet::new(1, 3.0, 1.0, 5.0, 3, 1, 7);
        assert!(matches!(build_kdv_type(&sys, &probe), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn kdv_type_two_dimensional_degree_two_part() {
        let specs = vec![
            vec![CoefSpec::bump(1.0, 0.1), CoefSpec::bump(0.0, 0.05)],
            vec![CoefSpec::bump(0.0, -0.05), CoefSpec::bump(1.0, 0.1)],
        ];
        let sys = VectorFieldSystem::from_specs(&specs).unwrap();
        let probe = SampleSet::new(2, 3.0, 1.0, 5.0, 3, 8, 5);
        let out = build_kdv_type(&sys, &probe).unwrap();
        for (x, xi) in [([0.3, -0.2], [1.0, 0.5]), ([-0.8, 0.6], [-1.5, 2.0])] {
            let deg2: f64 = out
                .full
                .poly()
                .unwrap()
                .terms
                .iter()
                .filter(|t| order_of(t.power) == 2)
                .map(|t| t.coef.eval(&x).im * monomial_deriv(t.power, ZERO, &xi))
                .sum();
            let got = out.im_a2.eval(&x, &xi).re;
            assert!(close(got, deg2, 1e-11), "{got} vs {deg2}");
            let a3 = out.a3.eval(&x, &xi);
            assert!(a3.im.abs() < 1e-14);
        }
    }

    #[test]
    fn fd_matches_analytic_second_order() {
        for name in ["airy", "zk", "kdv_sum", "ultrahyperbolic", "gaussian_kdv"] {
            let a = catalog(name, &SymbolParams::default()).unwrap();
            let (x, xi) = ([0.37, -0.61], [1.3, 0.7]);
            let mut checked = 0;
            for (al, be) in [([1, 0], [0, 0]), ([0, 0], [1, 0]), ([1, 0], [1, 0])] {
                let exact = a.deriv(al, be, &x, &xi);
                let e1 = (a.deriv_fd(al, be, &x, &xi, 1e-3) - exact).norm();
                let e2 = (a.deriv_fd(al, be, &x, &xi, 5e-4) - exact).norm();
                if e1 < 1e-11 {
                    continue;
                }
                let ratio = e1 / e2;
                assert!((3.5..=4.5).contains(&ratio), "{name} {al:?} {be:?}: {ratio}");
                checked += 1;
            }
            assert!(checked >= 1, "{name}");
        }
    }
}

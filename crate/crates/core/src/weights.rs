//! Spatial decay weights, the explicit Gårding weight `q`, the bounded Doi
//! weight `p` built from it, and the exponential conjugation pair
//! `E = Op^w(e^p)`, `E~ = Op^w(e^{-p})`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calculus::{quantize_dense, DenseOperator, ProbeFamily, Quantization};
use crate::error::{Error, Result};
use crate::grid::{apply_bessel, bracket, bracket as japanese, norm, sobolev_norm, Field, Grid, Point, C64};
use crate::symbol::{
    bracket_deriv, check_grad_ellipticity, check_im_smallness, check_x_decay, order_of, sub_indices, unit, ConditionReport,
    MultiIndex, SampleSet, Symbol, SymbolFn, Thresholds, Verdict, ZERO,
};

/// `lambda(r) = <r>^{-N}` with integer `N > 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightFn {
    pub exponent: u32,
}

impl WeightFn {
    pub fn new(exponent: u32) -> Result<Self> {
        if exponent <= 1 {
            return Err(Error::InvalidParam(format!("weight exponent {exponent} must exceed 1")));
        }
        Ok(Self { exponent })
    }

    pub fn eval(&self, r: f64) -> f64 {
        (1.0 + r * r).powf(-(self.exponent as f64) / 2.0)
    }

    pub fn derivative(&self, r: f64) -> f64 {
        let n = self.exponent as f64;
        -n * r * (1.0 + r * r).powf(-n / 2.0 - 1.0)
    }

    /// `int_0^t <r>^{-N} dr` by the reduction formula.
    pub fn primitive(&self, t: f64) -> f64 {
        let k = self.exponent;
        let mut j = if k % 2 == 1 { t.asinh() } else { t.atan() };
        let mut cur = if k % 2 == 1 { 1 } else { 2 };
        while cur < k {
            let c = cur as f64;
            j = t / (c * (1.0 + t * t).powf(c / 2.0)) + (c - 1.0) / c * j;
            cur += 2;
        }
        j
    }

    /// `int_0^infinity lambda`.
    pub fn total(&self) -> f64 {
        let k = self.exponent;
        let (mut j, mut cur) = if k % 2 == 0 { (std::f64::consts::FRAC_PI_2, 2) } else { (1.0, 3) };
        // Odd exponents start from J_3 = 1.
        while cur < k {
            let c = cur as f64;
            j *= (c - 1.0) / c;
            cur += 2;
        }
        j
    }
}

/// `<xi>^{-(m-1)} sum_j x_j d_{xi_j} Re a`, scaled.
struct GardingSymbol {
    a: Symbol,
    scale: f64,
}

impl GardingSymbol {
    fn part(&self, j: usize, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> f64 {
        let m = self.a.order;
        let mut acc = 0.0;
        for a1 in sub_indices(alpha) {
            let wb = binom(alpha, a1);
            let b = bracket_deriv(-(m - 1.0), a1, xi);
            if b == 0.0 {
                continue;
            }
            let a_rest = [alpha[0] - a1[0], alpha[1] - a1[1]];
            for b1 in sub_indices(beta) {
                let xj = match order_of(b1) {
                    0 => x[j],
                    1 if b1[j] == 1 => 1.0,
                    _ => continue,
                };
                let mut inner = a_rest;
                inner[j] += 1;
                let d = self.a.deriv(inner, [beta[0] - b1[0], beta[1] - b1[1]], x, xi).re;
                acc += wb * binom(beta, b1) * b * xj * d;
            }
        }
        acc
    }
}

fn binom(a: MultiIndex, g: MultiIndex) -> f64 {
    let f = |n: usize| (1..=n).map(|v| v as f64).product::<f64>();
    f(a[0]) * f(a[1]) / (f(g[0]) * f(g[1]) * f(a[0] - g[0]) * f(a[1] - g[1]))
}

impl SymbolFn for GardingSymbol {
    fn eval(&self, x: &Point, xi: &Point) -> C64 {
        self.deriv(ZERO, ZERO, x, xi).unwrap()
    }

    fn deriv(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> Option<C64> {
        if self.scale == 0.0 {
            return Some(C64::new(0.0, 0.0));
        }
        let v: f64 = (0..self.a.dim).map(|j| self.part(j, alpha, beta, x, xi)).sum();
        Some(C64::new(self.scale * v, 0.0))
    }
}

/// Gårding weight with its constants.
#[derive(Clone, Debug)]
pub struct GardingWeight {
    pub q: Symbol,
    /// Gårding constant `C_1`.
    pub c1: f64,
    /// Ellipticity constant `C`.
    pub c: f64,
}

/// `q = 2 C_1 C^2 <xi>^{-(m-1)} sum_j x_j d_{xi_j} Re a`.
pub fn garding_weight(a: &Symbol, ellipticity: &ConditionReport, c1: f64) -> Result<GardingWeight> {
    if ellipticity.condition != "gradient_ellipticity" || !ellipticity.verdict.passed() {
        return Err(Error::Precondition(format!(
            "symbol `{}` has no passing gradient-ellipticity report",
            a.name
        )));
    }
    if c1 < 0.0 || !c1.is_finite() {
        return Err(Error::InvalidParam(format!("Gårding constant {c1} must be nonnegative")));
    }
    let c = ellipticity.constants["c"];
    let re = a.real_part();
    let q = Symbol::custom(
        &format!("q({})", a.name),
        a.dim,
        1.0,
        Arc::new(GardingSymbol { a: re, scale: 2.0 * c1 * c * c }),
    )
    .real(true);
    Ok(GardingWeight { q, c1, c })
}

/// `max` of the fitted constants in the symbol bounds a Gårding weight satisfies.
pub fn garding_bounds(q: &Symbol, s: &SampleSet, max_order: usize) -> f64 {
    let mut idx = Vec::new();
    for t in 0..=max_order {
        for ao in 0..=t {
            for alpha in crate::symbol::indices_of_order(q.dim, ao) {
                for beta in crate::symbol::indices_of_order(q.dim, t - ao) {
                    idx.push((alpha, beta));
                }
            }
        }
    }
    let (v, _, _) = s.max_over(|x, xi| {
        idx.iter()
            .map(|(al, be)| {
                let growth = if order_of(*be) == 0 { japanese(x) } else { 1.0 };
                q.deriv(*al, *be, x, xi).norm() / (growth * japanese(xi).powf(-(order_of(*al) as f64)))
            })
            .fold(0.0, f64::max)
    });
    v
}

/// `H_a b = grad_xi a . grad_x b - grad_x a . grad_xi b` with `Re a`.
pub fn hamilton_derivative(a: &Symbol, b: &Symbol, x: &Point, xi: &Point) -> f64 {
    let (axi, ax) = (a.grad_xi(x, xi), a.grad_x(x, xi));
    let (bxi, bx) = (b.grad_xi(x, xi), b.grad_x(x, xi));
    (0..a.dim).map(|j| axi[j].re * bx[j].re - ax[j].re * bxi[j].re).sum()
}

/// Fitted lower bound `H_a b >= C w(x) |xi|^{m-1} - C'`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlackReport {
    pub condition: String,
    pub c: f64,
    pub c_prime: f64,
    pub worst_x: Point,
    pub worst_xi: Point,
    pub verdict: Verdict,
}

impl SlackReport {
    pub fn constants(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("c".to_string(), self.c), ("c_prime".to_string(), self.c_prime)])
    }
}

fn fit_slack(
    condition: &str,
    s: &SampleSet,
    h: impl Fn(&Point, &Point) -> f64 + Sync,
    scale: impl Fn(&Point, &Point) -> f64 + Sync,
) -> SlackReport {
    let top = s.radius_quantile(0.75);
    let (c, wx, wxi) = s.min_over(|x, xi| {
        if norm(xi) < top * (1.0 - 1e-12) {
            f64::INFINITY
        } else {
            h(x, xi) / scale(x, xi)
        }
    });
    let (gap, _, _) = s.max_over(|x, xi| c * scale(x, xi) - h(x, xi));
    let ok = c > 1e-12 && c.is_finite();
    SlackReport {
        condition: condition.to_string(),
        c,
        c_prime: gap.max(0.0),
        worst_x: wx,
        worst_xi: wxi,
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
    }
}

/// `H_a q >= C_1 |xi|^{m-1} - C_2`: slope fitted on the outer quarter of shells.
pub fn hamilton_slack(a: &Symbol, q: &Symbol, s: &SampleSet) -> SlackReport {
    let m = a.order;
    fit_slack("hamilton", s, |x, xi| hamilton_derivative(a, q, x, xi), |_, xi| norm(xi).powf(m - 1.0))
}

/// All admissibility conditions of a symbol with the Hamilton slack of its Gårding weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Admissibility {
    pub conditions: Vec<ConditionReport>,
    /// Absent when gradient ellipticity fails and no weight can be built.
    pub hamilton: Option<SlackReport>,
    pub verdict: Verdict,
}

/// Gradient ellipticity, x-decay up to `max_order`, imaginary smallness and the slack of `H_a q`.
pub fn check_admissible(
    a: &Symbol,
    lambda: &WeightFn,
    s: &SampleSet,
    max_order: usize,
    th: &Thresholds,
    c1: f64,
) -> Result<Admissibility> {
    let ellipticity = check_grad_ellipticity(a, s, th);
    let decay = check_x_decay(a, lambda, s, max_order, th);
    let im = match check_im_smallness(a, lambda, s, th) {
        Ok(r) => r,
        Err(Error::MissingSplit) if a.real_valued => ConditionReport {
            condition: "im_smallness".into(),
            samples: s.describe(),
            constants: BTreeMap::from([("c0_hat".to_string(), 0.0), ("threshold".to_string(), th.c0)]),
            worst_x: [0.0; 2],
            worst_xi: [0.0; 2],
            verdict: Verdict::Pass,
        },
        Err(e) => return Err(e),
    };
    let hamilton = if ellipticity.verdict.passed() {
        let q = garding_weight(a, &ellipticity, c1)?;
        Some(hamilton_slack(a, &q.q, s))
    } else {
        None
    };
    let mut verdict = ellipticity.verdict.and(decay.verdict).and(im.verdict);
    verdict = verdict.and(hamilton.as_ref().map_or(Verdict::Fail, |h| h.verdict));
    Ok(Admissibility { conditions: vec![ellipticity, decay, im], hamilton, verdict })
}

/// `phi(t) = g(t-1) / (g(t-1) + g(2-t))`, `g(s) = e^{-1/s}` for `s > 0`.
pub fn cutoff(t: f64) -> f64 {
    let (g1, g2) = (expo(t - 1.0), expo(2.0 - t));
    g1 / (g1 + g2)
}

pub fn cutoff_prime(t: f64) -> f64 {
    let (g1, g2) = (expo(t - 1.0), expo(2.0 - t));
    let (d1, d2) = (expo_prime(t - 1.0), expo_prime(2.0 - t));
    let den = g1 + g2;
    (d1 * g2 + g1 * d2) / (den * den)
}

fn expo(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

fn expo_prime(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp() / (s * s)
    } else {
        0.0
    }
}

/// Construction data of the Doi weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoiParams {
    /// Bound `|q| <= K <x>`.
    pub k: f64,
    pub eps: f64,
    pub lambda: WeightFn,
    /// Final multiplier of `p`.
    pub scale: f64,
}

impl DoiParams {
    /// `lambda~(t) = lambda(t/K - 10)`, with `lambda(r) = lambda(0)` for `r <= 0`.
    pub fn lambda_tilde(&self, t: f64) -> f64 {
        let r = t / self.k - 10.0;
        if r <= 0.0 {
            self.lambda.eval(0.0)
        } else {
            self.lambda.eval(r)
        }
    }

    /// `f(t) = int_0^t lambda~`.
    pub fn f(&self, t: f64) -> f64 {
        let knee = 10.0 * self.k;
        if t <= knee {
            t * self.lambda.eval(0.0)
        } else {
            knee * self.lambda.eval(0.0) + self.k * self.lambda.primitive(t / self.k - 10.0)
        }
    }

    pub fn f_prime(&self, t: f64) -> f64 {
        self.lambda_tilde(t)
    }

    /// Cutoff triple `(psi_0, psi_+, psi_-)` at `r = q/<x>`.
    pub fn psi(&self, r: f64) -> (f64, f64, f64) {
        let p = cutoff(r / self.eps);
        let m = cutoff(-r / self.eps);
        (1.0 - p - m, p, m)
    }
}

struct DoiSymbol {
    q: Symbol,
    params: DoiParams,
}

impl DoiSymbol {
    fn value(&self, x: &Point, xi: &Point) -> f64 {
        let q = self.q.eval(x, xi).re;
        let bx = bracket(x);
        let r = q / bx;
        let (p0, pp, pm) = self.params.psi(r);
        self.params.scale * (r * p0 + (self.params.f(q.abs()) + 2.0 * self.params.eps) * (pp - pm))
    }

    /// First derivative by the chain rule, `dq` and `dr` supplied.
    fn first(&self, q: f64, r: f64, dq: f64, dr: f64) -> f64 {
        let pr = &self.params;
        let e = pr.eps;
        let (p0, pp, pm) = pr.psi(r);
        let dpp = cutoff_prime(r / e) / e;
        let dpm = -cutoff_prime(-r / e) / e;
        let dp0 = -dpp - dpm;
        let fq = pr.f(q.abs()) + 2.0 * e;
        let dfq = pr.f_prime(q.abs()) * q.signum() * dq;
        pr.scale * (dr * p0 + r * dp0 * dr + dfq * (pp - pm) + fq * (dpp - dpm) * dr)
    }
}

impl SymbolFn for DoiSymbol {
    fn eval(&self, x: &Point, xi: &Point) -> C64 {
        C64::new(self.value(x, xi), 0.0)
    }

    fn deriv(&self, alpha: MultiIndex, beta: MultiIndex, x: &Point, xi: &Point) -> Option<C64> {
        if order_of(alpha) + order_of(beta) != 1 {
            return None;
        }
        let q = self.q.eval(x, xi).re;
        let bx = bracket(x);
        let r = q / bx;
        let dq = self.q.deriv(alpha, beta, x, xi).re;
        let dr = if order_of(alpha) == 1 {
            dq / bx
        } else {
            let axis = if beta[0] == 1 { 0 } else { 1 };
            dq / bx - q * x[axis] / (bx * bx * bx)
        };
        Some(C64::new(self.first(q, r, dq, dr), 0.0))
    }
}

/// Bounded order-zero weight `p = (q/<x>) psi_0 + (f(|q|) + 2 eps)(psi_+ - psi_-)`.
#[derive(Clone, Debug)]
pub struct DoiWeight {
    pub p: Symbol,
    pub params: DoiParams,
}

/// Build `p` from a Gårding weight; `K` is fitted on the sample set.
pub fn doi_weight(q: &GardingWeight, lambda: WeightFn, eps: f64, s: &SampleSet) -> Result<DoiWeight> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParam(format!("cutoff scale {eps} not in (0, 1)")));
    }
    let mut xs = s.xs.clone();
    xs.push([0.0; 2]);
    let (fit, wx, wxi) = s.max_over(|x, xi| q.q.eval(x, xi).norm() / bracket(x));
    if !fit.is_finite() || fit > 1e12 {
        return Err(Error::Precondition(format!(
            "|q|/<x> is unbounded on probes (value {fit:.3e} at x = {wx:?}, xi = {wxi:?})"
        )));
    }
    let params = DoiParams { k: fit.max(1.0), eps, lambda, scale: 1.0 };
    Ok(DoiWeight { p: doi_symbol(&q.q, &params), params })
}

fn doi_symbol(q: &Symbol, params: &DoiParams) -> Symbol {
    Symbol::custom(
        &format!("p({})", q.name),
        q.dim,
        0.0,
        Arc::new(DoiSymbol { q: q.clone(), params: params.clone() }),
    )
    .real(true)
}

impl DoiWeight {
    /// Zero weight on dimension `dim`.
    pub fn zero(dim: usize, lambda: WeightFn) -> Self {
        let params = DoiParams { k: 1.0, eps: 0.1, lambda, scale: 0.0 };
        let p = Symbol::multiplication(dim, crate::symbol::CoefFn::constant(0.0)).named("p0");
        Self { p, params }
    }

    /// Multiply `p` by `factor`.
    pub fn rescaled(&self, q: &GardingWeight, factor: f64) -> DoiWeight {
        let mut params = self.params.clone();
        params.scale *= factor;
        DoiWeight { p: doi_symbol(&q.q, &params), params }
    }

    /// Rescale so a fitted constant `fitted` becomes `target`.
    pub fn rescale_to(&self, q: &GardingWeight, fitted: f64, target: f64) -> Result<DoiWeight> {
        if !(fitted > 0.0) {
            return Err(Error::Precondition("cannot rescale a weight with nonpositive constant".into()));
        }
        Ok(self.rescaled(q, target / fitted))
    }

    /// `max |f'(t) - lambda~(t)|` check data: returns the worst `f' - lambda~`
    /// over `nodes` with `f'` from central differences of `f`.
    pub fn f_slack(&self, nodes: &[f64]) -> f64 {
        nodes
            .iter()
            .map(|&t| {
                let h = 1e-5 * (1.0 + t);
                let fd = (self.params.f(t + h) - self.params.f((t - h).max(0.0))) / (t + h - (t - h).max(0.0));
                fd - self.params.lambda_tilde(t)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// One point of the exported slack surface.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlackPoint {
    pub x: Point,
    pub xi: Point,
    pub slack: f64,
}

/// `H_a p >= C lambda(|x|) |xi|^{m-1} - C'` plus the slack surface at the fitted `C`.
pub fn doi_slack(a: &Symbol, p: &DoiWeight, lambda: &WeightFn, s: &SampleSet) -> (SlackReport, Vec<SlackPoint>) {
    let m = a.order;
    let h = |x: &Point, xi: &Point| hamilton_derivative(a, &p.p, x, xi);
    let scale = |x: &Point, xi: &Point| lambda.eval(norm(x)) * norm(xi).powf(m - 1.0);
    let rep = fit_slack("doi", s, h, scale);
    let mut surface = Vec::with_capacity(s.len());
    for x in &s.xs {
        for xi in &s.xis {
            surface.push(SlackPoint { x: *x, xi: *xi, slack: h(x, xi) - rep.c * scale(x, xi) + rep.c_prime });
        }
    }
    (rep, surface)
}

/// `E = Op^w(e^p)`, `E~ = Op^w(e^{-p})` on one grid.
#[derive(Clone, Debug)]
pub struct ExpWeightPair {
    pub e: DenseOperator,
    pub e_tilde: DenseOperator,
}

fn exp_symbol(p: &Symbol, sign: f64) -> Symbol {
    let p2 = p.clone();
    Symbol::from_fn(&format!("exp({sign}{})", p.name), p.dim, 0.0, move |x, xi| {
        C64::new((sign * p2.eval(x, xi).re).exp(), 0.0)
    })
    .real(true)
}

pub fn exp_weight_operators(p: &DoiWeight, g: &Grid) -> Result<ExpWeightPair> {
    if !g.dense_eligible() {
        return Err(Error::DenseIneligible(g.len()));
    }
    if p.params.scale == 0.0 {
        return Ok(ExpWeightPair { e: DenseOperator::identity(g), e_tilde: DenseOperator::identity(g) });
    }
    Ok(ExpWeightPair {
        e: quantize_dense(&exp_symbol(&p.p, 1.0), g, Quantization::Weyl)?,
        e_tilde: quantize_dense(&exp_symbol(&p.p, -1.0), g, Quantization::Weyl)?,
    })
}

impl ExpWeightPair {
    /// `N(u) = (||E Lambda^s u||_0^2 + ||u||_{s-2}^2)^{1/2}`.
    pub fn n_norm(&self, u: &Field, s: f64) -> Result<f64> {
        let eu = self.e.apply(&apply_bessel(u, s))?;
        let a = eu.l2_sq();
        let b = sobolev_norm(u, s - 2.0).powi(2);
        Ok((a + b).sqrt())
    }

    /// `(E~ E - I) u`.
    pub fn residual(&self, u: &Field) -> Result<Field> {
        let v = self.e_tilde.apply(&self.e.apply(u)?)?;
        Ok(v.sub(u))
    }
}

/// Fitted constants of the conjugation pair on a probe family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConjugationFit {
    pub points: usize,
    /// `max ||(E~E - I)u||_s / ||u||_{s-2}`.
    pub c_fit: f64,
    /// Norm-equivalence bounds `c1 ||u||_s <= N(u) <= c2 ||u||_s`.
    pub c1: f64,
    pub c2: f64,
}

pub fn conjugation_fit(pair: &ExpWeightPair, family: &ProbeFamily, s: f64) -> Result<ConjugationFit> {
    let g = &pair.e.grid;
    let mut fit = ConjugationFit { points: g.points(), c_fit: 0.0, c1: f64::INFINITY, c2: 0.0 };
    for u in family.fields(g) {
        let r = pair.residual(&u)?;
        fit.c_fit = fit.c_fit.max(sobolev_norm(&r, s) / sobolev_norm(&u, s - 2.0));
        let ratio = pair.n_norm(&u, s)? / sobolev_norm(&u, s);
        fit.c1 = fit.c1.min(ratio);
        fit.c2 = fit.c2.max(ratio);
    }
    Ok(fit)
}

/// Unit vector helper for callers building gradients.
pub fn axis(i: usize) -> MultiIndex {
    unit(i)
}

//! Linear evolution `u_t = iAu + f` on the torus and the measurement
//! harness for weighted smoothing estimates.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{masked_monomial, multiplier_values, WeylOperator};
use crate::error::{Error, Result};
use crate::grid::{apply_multiplier, norm, sobolev_norm, sobolev_norm_sq, transform, weighted_pairing, Field, Grid, C64};
use crate::symbol::Symbol;
use crate::weights::WeightFn;

/// Stability constant of classical RK4 on the imaginary axis, with margin.
pub const C_STAB: f64 = 2.5;
/// Spectral power below this fraction of the peak is treated as inactive.
pub const ACTIVE_POWER: f64 = 1e-12;
/// Tail mass allowed outside `|x| <= L/2` during guarded runs.
pub const MASS_TAIL: f64 = 1e-6;

const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk4,
    IfRk4,
    /// `if_rk4` whenever the symbol has a nonzero constant-coefficient part.
    Auto,
}

/// Whether runs must stop before group-velocity wrap-around.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrapPolicy {
    Enforce,
    /// Data is genuinely periodic (plane waves); no guard applies.
    Periodic,
}

type SourceFn = dyn Fn(f64, &Grid) -> Field + Send + Sync;

#[derive(Clone)]
pub enum Source {
    Zero,
    Closure(Arc<SourceFn>),
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Zero => f.write_str("Source::Zero"),
            Source::Closure(_) => f.write_str("Source::Closure"),
        }
    }
}

impl Source {
    pub fn closure(f: impl Fn(f64, &Grid) -> Field + Send + Sync + 'static) -> Self {
        Source::Closure(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Source::Zero)
    }

    pub fn eval(&self, t: f64, g: &Grid) -> Field {
        match self {
            Source::Zero => Field::zeros(g),
            Source::Closure(f) => f(t, g),
        }
    }
}

/// `A = Op^w(a)` together with its split into a constant-coefficient
/// multiplier and a variable remainder.
#[derive(Clone, Debug)]
pub struct SplitOperator {
    grid: Grid,
    full: WeylOperator,
    far: Option<Vec<C64>>,
    rest: Option<WeylOperator>,
    bound_full: f64,
    bound_rest: f64,
}

/// `max |a(x, xi_k)|` over all frequencies and a subsample of nodes.
fn symbol_bound(a: &Symbol, g: &Grid) -> f64 {
    if a.x_independent {
        return (0..g.len()).map(|k| a.eval(&[0.0; 2], &g.wavevector(k)).norm()).fold(0.0, f64::max);
    }
    let xs = node_sample(g);
    (0..g.len())
        .into_par_iter()
        .map(|k| {
            let xi = g.wavevector(k);
            xs.iter().map(|x| a.eval(x, &xi).norm()).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

fn node_sample(g: &Grid) -> Vec<[f64; 2]> {
    let per_axis = if g.dim() == 1 { 64 } else { 16 };
    let stride = (g.points() / per_axis).max(1);
    let ax: Vec<f64> = (0..g.points()).step_by(stride).map(|j| g.node(j)).collect();
    if g.dim() == 1 {
        ax.iter().map(|&x| [x, 0.0]).collect()
    } else {
        ax.iter().flat_map(|&x| ax.iter().map(move |&y| [x, y])).collect()
    }
}

impl SplitOperator {
    pub fn new(a: &Symbol, g: &Grid) -> Result<Self> {
        let full = WeylOperator::new(a, g)?;
        let bound_full = symbol_bound(a, g);
        let (far, rest, bound_rest) = if a.x_independent {
            (Some(multiplier_values(a, g)?), None, 0.0)
        } else if let Some((far, rest)) = a.poly().and_then(|p| p.split_far_field()) {
            if far.terms.is_empty() {
                (None, None, bound_full)
            } else {
                let mut m = vec![C64::new(0.0, 0.0); g.len()];
                for t in &far.terms {
                    let c = t.coef.eval(&[0.0; 2]);
                    for (i, v) in m.iter_mut().enumerate() {
                        *v += c * masked_monomial(g, t.power, i);
                    }
                }
                let rest_sym = Symbol::from_poly("rest", a.dim, a.order, rest);
                let bound = symbol_bound(&rest_sym, g);
                (Some(m), Some(WeylOperator::new(&rest_sym, g)?), bound)
            }
        } else {
            (None, None, bound_full)
        };
        Ok(Self { grid: g.clone(), full, far, rest, bound_full, bound_rest })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn has_split(&self) -> bool {
        self.far.is_some()
    }

    /// `A u`.
    pub fn apply(&self, u: &Field) -> Field {
        self.full.apply(u)
    }

    /// Variable part `B u`, zero when there is no split or no remainder.
    pub fn apply_rest(&self, u: &Field) -> Field {
        match (&self.far, &self.rest) {
            (Some(_), Some(r)) => r.apply(u),
            (Some(_), None) => Field::zeros(&self.grid),
            (None, _) => self.full.apply(u),
        }
    }

    /// `exp(i tau a_far(D)) u`.
    pub fn far_phase(&self, u: &Field, tau: f64) -> Field {
        match &self.far {
            Some(m) => apply_multiplier(u, |i| (I * tau * m[i]).exp()),
            None => u.clone(),
        }
    }

    pub fn resolve(&self, scheme: Scheme) -> Scheme {
        match scheme {
            Scheme::Auto if self.has_split() => Scheme::IfRk4,
            Scheme::Auto => Scheme::Rk4,
            s => s,
        }
    }

    /// Largest admissible step for `scheme`.
    pub fn stability_limit(&self, scheme: Scheme) -> f64 {
        let b = match self.resolve(scheme) {
            Scheme::IfRk4 if self.has_split() => self.bound_rest,
            _ => self.bound_full,
        };
        if b == 0.0 {
            f64::INFINITY
        } else {
            C_STAB / b
        }
    }

    /// Largest `|b|` over the frequencies active in `data`, for the operator
    /// stepped explicitly under `scheme`.
    fn active_bound(&self, a: &Symbol, scheme: Scheme, active: &[usize]) -> f64 {
        let explicit_full = !(self.resolve(scheme) == Scheme::IfRk4 && self.has_split());
        if !explicit_full && self.rest.is_none() {
            return 0.0;
        }
        let rest_sym;
        let sym = if explicit_full {
            a
        } else {
            let (_, rest) = a.poly().and_then(|p| p.split_far_field()).expect("split exists");
            rest_sym = Symbol::from_poly("rest", a.dim, a.order, rest);
            &rest_sym
        };
        let xs = node_sample(&self.grid);
        active
            .iter()
            .map(|&k| {
                let xi = self.grid.wavevector(k);
                xs.iter().map(|x| sym.eval(x, &xi).norm()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

fn lin(a: &Field, c: f64, b: &Field) -> Field {
    let mut out = a.clone();
    out.axpy(C64::new(c, 0.0), b);
    out
}

/// One classical RK4 step of `u' = rhs(t, u)`.
pub(crate) fn rk4_step(u: &Field, t: f64, h: f64, rhs: &dyn Fn(f64, &Field) -> Field) -> Field {
    let k1 = rhs(t, u);
    let k2 = rhs(t + h / 2.0, &lin(u, h / 2.0, &k1));
    let k3 = rhs(t + h / 2.0, &lin(u, h / 2.0, &k2));
    let k4 = rhs(t + h, &lin(u, h, &k3));
    let mut out = u.clone();
    out.axpy(C64::new(h / 6.0, 0.0), &k1);
    out.axpy(C64::new(h / 3.0, 0.0), &k2);
    out.axpy(C64::new(h / 3.0, 0.0), &k3);
    out.axpy(C64::new(h / 6.0, 0.0), &k4);
    out
}

/// One Lawson (integrating-factor) RK4 step: the far-field multiplier is
/// propagated exactly, `rhs` covers the remainder and any forcing.
pub(crate) fn lawson_step(op: &SplitOperator, u: &Field, t: f64, h: f64, rhs: &dyn Fn(f64, &Field) -> Field) -> Field {
    let Some(m) = &op.far else {
        return rk4_step(u, t, h, rhs);
    };
    let half_phase: Vec<C64> = m.iter().map(|v| (I * (h / 2.0) * v).exp()).collect();
    let full_phase: Vec<C64> = half_phase.iter().map(|v| v * v).collect();
    let half = |v: &Field| apply_multiplier(v, |i| half_phase[i]);
    let full = |v: &Field| apply_multiplier(v, |i| full_phase[i]);
    let k1 = rhs(t, u);
    let k2 = rhs(t + h / 2.0, &half(&lin(u, h / 2.0, &k1)));
    let eu_half = half(u);
    let k3 = rhs(t + h / 2.0, &lin(&eu_half, h / 2.0, &k2));
    let eu = full(u);
    let k4 = rhs(t + h, &lin(&eu, h, &half(&k3)));
    let mut mid = k2;
    mid.axpy(C64::new(1.0, 0.0), &k3);
    let mut out = eu;
    out.axpy(C64::new(h / 6.0, 0.0), &full(&k1));
    out.axpy(C64::new(h / 3.0, 0.0), &half(&mid));
    out.axpy(C64::new(h / 6.0, 0.0), &k4);
    out
}

/// Horizon before fastest active wave packets reach the seam.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Horizon {
    pub v_max: f64,
    /// Radius holding all but `1e-8` of the data mass.
    pub r_data: f64,
    pub margin: f64,
    /// `(L - r_data - margin) / v_max`.
    pub t_wrap: f64,
    /// `(L/2 - r_mass) / v_max` with `r_mass` at tail `MASS_TAIL`; keeps the
    /// data inside `|x| <= L/2`.
    pub t_mass: f64,
}

impl Horizon {
    pub fn limit(&self) -> f64 {
        self.t_wrap.min(self.t_mass)
    }
}

/// Spectral indices whose power exceeds `ACTIVE_POWER` times the peak.
pub fn active_frequencies(data: &[&Field]) -> Vec<usize> {
    let g = &data[0].grid;
    let mut power = vec![0.0; g.len()];
    for u in data {
        for (p, c) in power.iter_mut().zip(transform(u).coeffs) {
            *p += c.norm_sqr();
        }
    }
    let peak = power.iter().cloned().fold(0.0, f64::max);
    (0..g.len()).filter(|&k| peak > 0.0 && power[k] >= ACTIVE_POWER * peak).collect()
}

pub fn wrap_horizon(a: &Symbol, data: &[&Field]) -> Horizon {
    let g = &data[0].grid;
    let active = active_frequencies(data);
    let xs = if a.x_independent { vec![[0.0; 2]] } else { node_sample(g) };
    let v_max = active
        .par_iter()
        .map(|&k| {
            let xi = g.wavevector(k);
            xs.iter()
                .map(|x| {
                    let v = a.grad_xi(x, &xi);
                    (v[0].norm_sqr() + v[1].norm_sqr()).sqrt()
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    let l = g.half_width();
    let radius = |tail: f64| data.iter().map(|u| u.support_radius(tail)).fold(0.0, f64::max);
    let r_data = radius(1e-8);
    let r_mass = radius(MASS_TAIL);
    let margin = 0.1 * l;
    let over = |d: f64| if v_max > 0.0 { d / v_max } else { f64::INFINITY };
    Horizon { v_max, r_data, margin, t_wrap: over(l - r_data - margin), t_mass: over(0.5 * l - r_mass) }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveOptions {
    pub scheme: Scheme,
    /// Store every `stride`-th step (the final step is always stored).
    pub stride: usize,
    pub wrap: WrapPolicy,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { scheme: Scheme::Auto, stride: 1, wrap: WrapPolicy::Enforce }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
    pub scheme: Scheme,
    pub dt: f64,
    pub stride: usize,
    pub source: Source,
    /// Guard used for the run, absent for periodic data.
    pub horizon: Option<Horizon>,
}

impl Solution {
    pub fn last(&self) -> &Field {
        self.fields.last().expect("solution stores u0")
    }

    /// `max_i | ||u(t_i)|| - ||u0|| | / ||u0||`.
    pub fn l2_drift(&self) -> f64 {
        let n0 = self.fields[0].l2();
        self.fields.iter().map(|u| (u.l2() - n0).abs()).fold(0.0, f64::max) / n0.max(f64::MIN_POSITIVE)
    }

    /// `(t, ||u(t)||_s)` series.
    pub fn norm_series(&self, s: f64) -> Vec<(f64, f64)> {
        self.times.iter().zip(&self.fields).map(|(t, u)| (*t, sobolev_norm(u, s))).collect()
    }
}

/// Default step: stable, and resolving the active band to keep RK4 phase and
/// amplitude errors small.
pub fn default_dt(a: &Symbol, u0: &Field, t_end: f64, scheme: Scheme) -> Result<f64> {
    let op = SplitOperator::new(a, &u0.grid)?;
    let active = active_frequencies(&[u0]);
    let b = op.active_bound(a, scheme, &active);
    let accuracy = if b > 0.0 { 0.05 / b } else { f64::INFINITY };
    Ok(op.stability_limit(scheme).min(accuracy).min(t_end / 100.0))
}

/// Solve `u_t = i Op^w(a) u + f`, `u(0) = u0` on `[0, t_end]`.
pub fn solve_linear(a: &Symbol, u0: &Field, f: &Source, t_end: f64, dt: f64, opts: SolveOptions) -> Result<Solution> {
    let g = u0.grid.clone();
    let op = SplitOperator::new(a, &g)?;
    solve_with(&op, a, u0, f, t_end, dt, opts)
}

pub(crate) fn check_horizon(a: &Symbol, data: &[&Field], t_end: f64, wrap: WrapPolicy) -> Result<Option<Horizon>> {
    match wrap {
        WrapPolicy::Periodic => Ok(None),
        WrapPolicy::Enforce => {
            let h = wrap_horizon(a, data);
            if t_end > h.t_wrap {
                return Err(Error::WrapGuard { requested: t_end, limit: h.t_wrap });
            }
            Ok(Some(h))
        }
    }
}

pub(crate) fn check_mass(u: &Field, t: f64) -> Result<()> {
    let tail = u.tail_fraction(0.5 * u.grid.half_width());
    if tail > MASS_TAIL {
        return Err(Error::Decay(format!("mass fraction {tail:.3e} outside |x| <= L/2 at t = {t}")));
    }
    Ok(())
}

pub(crate) fn step_count(t_end: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidParam(format!("step {dt} and horizon {t_end} must be positive")));
    }
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    Ok((steps, if steps == 0 { dt } else { t_end / steps as f64 }))
}

fn solve_with(op: &SplitOperator, a: &Symbol, u0: &Field, f: &Source, t_end: f64, dt: f64, opts: SolveOptions) -> Result<Solution> {
    let g = op.grid().clone();
    if u0.grid != g {
        return Err(Error::GridMismatch);
    }
    let scheme = op.resolve(opts.scheme);
    let limit = op.stability_limit(scheme);
    if dt > limit {
        return Err(Error::Stability { dt, limit });
    }
    let f0 = f.eval(0.0, &g);
    let data: Vec<&Field> = if f.is_zero() || f0.max_abs() == 0.0 { vec![u0] } else { vec![u0, &f0] };
    let horizon = if data.iter().all(|u| u.max_abs() == 0.0) {
        None
    } else {
        check_horizon(a, &data, t_end, opts.wrap)?
    };
    let (steps, h) = step_count(t_end, dt)?;
    let stride = opts.stride.max(1);
    let guarded = opts.wrap == WrapPolicy::Enforce && u0.max_abs() > 0.0;
    if guarded {
        check_mass(u0, 0.0)?;
    }

    let rhs: Box<dyn Fn(f64, &Field) -> Field + '_> = match scheme {
        Scheme::IfRk4 => Box::new(|t, u: &Field| forced(op.apply_rest(u), f, t, &g)),
        _ => Box::new(|t, u: &Field| forced(op.apply(u), f, t, &g)),
    };
    let mut times = vec![0.0];
    let mut fields = vec![u0.clone()];
    let mut u = u0.clone();
    for i in 0..steps {
        let t = i as f64 * h;
        u = match scheme {
            Scheme::IfRk4 => lawson_step(op, &u, t, h, &*rhs),
            _ => rk4_step(&u, t, h, &*rhs),
        };
        let k = i + 1;
        if k % stride == 0 || k == steps {
            let tk = k as f64 * h;
            if guarded {
                check_mass(&u, tk)?;
            }
            times.push(tk);
            fields.push(u.clone());
        }
    }
    drop(rhs);
    Ok(Solution { grid: g, times, fields, scheme, dt: h, stride, source: f.clone(), horizon })
}

fn forced(au: Field, f: &Source, t: f64, g: &Grid) -> Field {
    let mut out = au.scale(I);
    if !f.is_zero() {
        out.axpy(C64::new(1.0, 0.0), &f.eval(t, g));
    }
    out
}

/// Composite trapezoid over possibly uneven nodes.
pub fn trapezoid(t: &[f64], y: &[f64]) -> f64 {
    t.windows(2).zip(y.windows(2)).map(|(tt, yy)| 0.5 * (tt[1] - tt[0]) * (yy[0] + yy[1])).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimate {
    #[serde(rename = "i")]
    Energy,
    #[serde(rename = "ii")]
    Smoothing,
    #[serde(rename = "iii")]
    DualSmoothing,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub estimate: Estimate,
    pub lhs: f64,
    /// Right-hand side without the exponential constant.
    pub rhs: f64,
    pub ratio: f64,
    pub s: f64,
    pub lambda_exponent: u32,
    pub order: f64,
    pub t_end: f64,
    pub samples: usize,
    /// `int_0^T ||Lambda^{s+(m-1)/2} u||^2 dt` without the weight.
    pub unweighted: f64,
}

/// Assemble both sides of the energy (i), smoothing (ii) or dual smoothing
/// (iii) estimate from stored snapshots.
pub fn smoothing_report(
    sol: &Solution,
    estimate: Estimate,
    s: f64,
    lambda: &WeightFn,
    order: f64,
    f: Option<&Source>,
) -> Result<SmoothingReport> {
    if f.is_none() && estimate != Estimate::Smoothing {
        return Err(Error::InvalidParam("estimates (i) and (iii) need the forcing term".into()));
    }
    let gain = (order - 1.0) / 2.0;
    let g = &sol.grid;
    let t = &sol.times;
    let forcing: Vec<Field> = match f {
        Some(src) if !src.is_zero() => t.iter().map(|&ti| src.eval(ti, g)).collect(),
        _ => Vec::new(),
    };
    let integrate = |vals: Vec<f64>| trapezoid(t, &vals);
    let lam = |r: f64| lambda.eval(r);
    let sup_sq = sol.fields.iter().map(|u| sobolev_norm_sq(u, s)).fold(0.0, f64::max);
    let weighted = integrate(sol.fields.par_iter().map(|u| weighted_pairing(u, lam, s + gain)).collect());
    let unweighted = integrate(sol.fields.par_iter().map(|u| sobolev_norm_sq(u, s + gain)).collect());
    let u0 = &sol.fields[0];
    let (lhs, rhs) = match estimate {
        Estimate::Energy => {
            let fi = if forcing.is_empty() { 0.0 } else { integrate(forcing.iter().map(|v| sobolev_norm(v, s)).collect()) };
            (sup_sq.sqrt(), sobolev_norm(u0, s) + fi)
        }
        Estimate::Smoothing => {
            let fi = if forcing.is_empty() { 0.0 } else { integrate(forcing.iter().map(|v| sobolev_norm_sq(v, s)).collect()) };
            (sup_sq + weighted, sobolev_norm_sq(u0, s) + fi)
        }
        Estimate::DualSmoothing => {
            let fi = if forcing.is_empty() {
                0.0
            } else {
                integrate(forcing.par_iter().map(|v| weighted_pairing(v, |r| 1.0 / lam(r), s - gain)).collect())
            };
            (sup_sq + weighted, sobolev_norm_sq(u0, s) + fi)
        }
    };
    let ratio = if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(SmoothingReport {
        estimate,
        lhs,
        rhs,
        ratio,
        s,
        lambda_exponent: lambda.exponent,
        order,
        t_end: *t.last().unwrap(),
        samples: t.len(),
        unweighted,
    })
}

/// `exp(i k x_1) exp(-|x|^2 / (2 sigma^2))`.
pub fn wavepacket(g: &Grid, k: f64, sigma: f64) -> Field {
    Field::from_fn(g, |x| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        (I * k * x[0]).exp() * (-r2 / (2.0 * sigma * sigma)).exp()
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyRun {
    pub k: f64,
    pub dt: f64,
    pub reports: Vec<SmoothingReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilySummary {
    /// Common horizon, inside every member's guard.
    pub t_end: f64,
    pub runs: Vec<FamilyRun>,
    /// `max/min` of the ratio per requested estimate, in request order.
    pub spread: Vec<(Estimate, f64)>,
    /// Unweighted integral of the last member over the first.
    pub growth: f64,
}

/// Free evolution of `wavepacket(k, sigma)` for each `k` up to a common
/// horizon, reporting each estimate with zero forcing.
pub fn smoothing_family(
    a: &Symbol,
    g: &Grid,
    ks: &[f64],
    sigma: f64,
    s: f64,
    lambda: &WeightFn,
    estimates: &[Estimate],
    scheme: Scheme,
) -> Result<FamilySummary> {
    if ks.is_empty() {
        return Err(Error::InvalidParam("empty frequency family".into()));
    }
    let data: Vec<Field> = ks.iter().map(|&k| wavepacket(g, k, sigma)).collect();
    let t_end = 0.9
        * data
            .iter()
            .map(|u| wrap_horizon(a, &[u]).limit())
            .fold(f64::INFINITY, f64::min);
    if !(t_end > 0.0) {
        return Err(Error::Decay("wave packets do not fit inside |x| <= L/2".into()));
    }
    let op = SplitOperator::new(a, g)?;
    let runs = ks
        .par_iter()
        .zip(&data)
        .map(|(&k, u0)| -> Result<FamilyRun> {
            let dt = default_dt(a, u0, t_end, scheme)?;
            let sol = solve_with(&op, a, u0, &Source::Zero, t_end, dt, SolveOptions { scheme, ..Default::default() })?;
            let reports = estimates
                .iter()
                .map(|&e| smoothing_report(&sol, e, s, lambda, a.order, Some(&Source::Zero)))
                .collect::<Result<Vec<_>>>()?;
            Ok(FamilyRun { k, dt: sol.dt, reports })
        })
        .collect::<Result<Vec<_>>>()?;
    let spread = estimates
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let r: Vec<f64> = runs.iter().map(|run| run.reports[i].ratio).collect();
            let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
            (e, hi / lo)
        })
        .collect();
    let growth = runs.last().unwrap().reports[0].unweighted / runs[0].reports[0].unweighted;
    Ok(FamilySummary { t_end, runs, spread, growth })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropagatorPoint {
    pub t: f64,
    /// `sup_{t' <= t} ||<x>^{2N} W(t') u0||_s^2`.
    pub lhs: f64,
    /// `||<x>^{2N} u0||_{s+2N}^2`.
    pub rhs: f64,
    /// `lhs / ((1 + t^{2N}) rhs)`.
    pub c: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropagatorProbe {
    pub n_w: u32,
    pub s: f64,
    pub points: Vec<PropagatorPoint>,
    pub c_fit: f64,
    /// `max c / min c` over the sweep.
    pub spread: f64,
}

fn polynomial_weight(u: &Field, n_w: u32) -> Field {
    let g = &u.grid;
    let mut v = u.clone();
    for (i, val) in v.values.iter_mut().enumerate() {
        let r = norm(&g.point(i));
        *val *= (1.0 + r * r).powi(n_w as i32);
    }
    v
}

/// Growth of `<x>^{2N}`-weighted norms under the free propagator.
pub fn weighted_propagator_probe(a: &Symbol, u0: &Field, ts: &[f64], s: f64, n_w: u32) -> Result<PropagatorProbe> {
    let v0 = polynomial_weight(u0, n_w);
    let tail = v0.tail_fraction(0.5 * u0.grid.half_width());
    if !(tail < 1e-8) {
        return Err(Error::Decay(format!("weighted datum keeps tail mass {tail:.3e} outside |x| <= L/2")));
    }
    let t_max = ts.iter().cloned().fold(0.0, f64::max);
    if !(t_max > 0.0) {
        return Err(Error::InvalidParam("time sweep needs a positive horizon".into()));
    }
    let dt = default_dt(a, u0, t_max, Scheme::Auto)?;
    let opts = SolveOptions { wrap: WrapPolicy::Enforce, ..Default::default() };
    let sol = solve_with(&SplitOperator::new(a, &u0.grid)?, a, u0, &Source::Zero, t_max, dt, SolveOptions { wrap: WrapPolicy::Periodic, ..opts })?;
    // Mass may leave |x| <= L/2 here; only the seam guard applies.
    check_horizon(a, &[u0], t_max, WrapPolicy::Enforce)?;
    let weighted: Vec<f64> = sol.fields.par_iter().map(|u| sobolev_norm_sq(&polynomial_weight(u, n_w), s)).collect();
    let rhs = sobolev_norm_sq(&v0, s + 2.0 * n_w as f64);
    let points: Vec<PropagatorPoint> = ts
        .iter()
        .map(|&t| {
            let lhs = sol
                .times
                .iter()
                .zip(&weighted)
                .filter(|(ti, _)| **ti <= t + 1e-12)
                .map(|(_, w)| *w)
                .fold(0.0, f64::max);
            PropagatorPoint { t, lhs, rhs, c: lhs / ((1.0 + t.powi(2 * n_w as i32)) * rhs) }
        })
        .collect();
    let c_fit = points.iter().map(|p| p.c).fold(0.0, f64::max);
    let c_min = points.iter().map(|p| p.c).fold(f64::INFINITY, f64::min);
    Ok(PropagatorProbe { n_w, s, points, c_fit, spread: c_fit / c_min })
}

//! Monomial nonlinearities `c u^p conj(u)^q D^alpha u`, the four-term
//! solution norm, and Picard iteration on the Duhamel formulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::masked_monomial;
use crate::error::{Error, Result};
use crate::evolve::{check_horizon, lawson_step, step_count, SplitOperator, Solution, WrapPolicy, C_STAB};
use crate::grid::{apply_multiplier, norm, sobolev_norm, sobolev_norm_sq, weighted_pairing, Field, Grid, C64};
use crate::symbol::{order_of, MultiIndex, Symbol, ZERO};
use crate::weights::WeightFn;

const I: C64 = C64::new(0.0, 1.0);

fn one() -> C64 {
    C64::new(1.0, 0.0)
}

/// `coef * u^p * conj(u)^q * D^alpha u` with `D = -i d/dx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearitySpec {
    pub p: u32,
    pub q: u32,
    #[serde(default)]
    pub alpha: MultiIndex,
    #[serde(default = "one")]
    pub coef: C64,
}

impl NonlinearitySpec {
    /// `u d_x u`.
    pub fn burgers() -> Self {
        Self { p: 1, q: 0, alpha: [1, 0], coef: I }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.p == 0 && self.q == 0 {
            return Err(Error::InvalidParam("nonlinearity needs p + q > 0".into()));
        }
        if order_of(self.alpha) > 2 {
            return Err(Error::InvalidParam(format!("|alpha| = {} exceeds 2", order_of(self.alpha))));
        }
        if dim == 1 && self.alpha[1] != 0 {
            return Err(Error::InvalidParam("alpha has a second component in one dimension".into()));
        }
        Ok(())
    }

    /// `coef * u^p conj(u)^q` pointwise.
    fn prefactor(&self, u: C64) -> C64 {
        self.coef * u.powu(self.p) * u.conj().powu(self.q)
    }
}

fn derivative(u: &Field, alpha: MultiIndex) -> Field {
    if alpha == ZERO {
        return u.clone();
    }
    let g = u.grid.clone();
    apply_multiplier(u, |i| C64::new(masked_monomial(&g, alpha, i), 0.0))
}

/// `N(u)`.
pub fn nonlinearity_eval(u: &Field, spec: &NonlinearitySpec) -> Result<Field> {
    spec.validate(u.grid.dim())?;
    let mut out = derivative(u, spec.alpha);
    for (o, v) in out.values.iter_mut().zip(&u.values) {
        *o *= spec.prefactor(*v);
    }
    Ok(out)
}

/// `N~(u) = N(u) - coef u0^p conj(u0)^q D^alpha u`.
pub fn nonlinearity_tilde(u: &Field, u0: &Field, spec: &NonlinearitySpec) -> Result<Field> {
    spec.validate(u.grid.dim())?;
    if u.grid != u0.grid {
        return Err(Error::GridMismatch);
    }
    let mut out = derivative(u, spec.alpha);
    for ((o, v), w) in out.values.iter_mut().zip(&u.values).zip(&u0.values) {
        *o *= spec.prefactor(*v) - spec.prefactor(*w);
    }
    Ok(out)
}

/// Squared terms of the solution norm.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct XtsNorm {
    /// `sup ||u||_s^2`.
    pub sup_hs: f64,
    /// `int int lambda |Lambda^{s+1} u|^2`.
    pub weighted: f64,
    /// `sup ||lambda^{-1} u||^2_{s-2N-2}`.
    pub low: f64,
    /// Same term at index `s-2N-5`.
    pub low_alt: f64,
    /// `sup ||lambda^{-1} u_t||^2_{s-2N-5}`.
    pub time_derivative: f64,
}

impl XtsNorm {
    /// Squared norm using the `s-2N-2` index.
    pub fn total(&self) -> f64 {
        self.sup_hs + self.weighted + self.low + self.time_derivative
    }

    pub fn value(&self) -> f64 {
        self.total().sqrt()
    }
}

fn inverse_weight(u: &Field, n_w: u32) -> Field {
    let g = &u.grid;
    let mut v = u.clone();
    for (i, val) in v.values.iter_mut().enumerate() {
        let r = norm(&g.point(i));
        *val *= (1.0 + r * r).powf(n_w as f64 / 2.0);
    }
    v
}

fn decay_gate(u: &Field, n_w: u32) -> Result<()> {
    if u.max_abs() == 0.0 {
        return Ok(());
    }
    let tail = inverse_weight(u, n_w).tail_fraction(0.5 * u.grid.half_width());
    if tail >= 1e-8 {
        return Err(Error::Decay(format!("weighted field keeps tail mass {tail:.3e} outside |x| <= L/2")));
    }
    Ok(())
}

fn check_index(s: f64, n_w: u32) -> Result<()> {
    if s < 2.0 * n_w as f64 + 5.0 {
        return Err(Error::InvalidParam(format!("s = {s} below 2N + 5 = {}", 2 * n_w + 5)));
    }
    Ok(())
}

/// Norm terms from snapshots `u` and their time derivatives `dtu` at `times`.
/// The decay gate is skipped for differences of nearby solutions, which
/// sit at round-off level everywhere.
pub fn xts_terms(times: &[f64], u: &[Field], dtu: &[Field], s: f64, n_w: u32, gate: bool) -> Result<XtsNorm> {
    check_index(s, n_w)?;
    let lambda = WeightFn::new(n_w)?;
    let low_idx = s - 2.0 * n_w as f64 - 2.0;
    let alt_idx = s - 2.0 * n_w as f64 - 5.0;
    let per: Vec<Result<[f64; 5]>> = u
        .par_iter()
        .zip(dtu)
        .map(|(v, dv)| {
            if gate {
                decay_gate(v, n_w)?;
                decay_gate(dv, n_w)?;
            }
            let wv = inverse_weight(v, n_w);
            Ok([
                sobolev_norm_sq(v, s),
                weighted_pairing(v, |r| lambda.eval(r), s + 1.0),
                sobolev_norm_sq(&wv, low_idx),
                sobolev_norm_sq(&wv, alt_idx),
                sobolev_norm_sq(&inverse_weight(dv, n_w), alt_idx),
            ])
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let sup = |k: usize| per.iter().map(|p| p[k]).fold(0.0, f64::max);
    let weighted_series: Vec<f64> = per.iter().map(|p| p[1]).collect();
    Ok(XtsNorm {
        sup_hs: sup(0),
        weighted: crate::evolve::trapezoid(times, &weighted_series),
        low: sup(2),
        low_alt: sup(3),
        time_derivative: sup(4),
    })
}

/// Solution norm with `u_t` taken from the equation `u_t = iAu + N(u)`.
pub fn xts_norm(sol: &Solution, a: &Symbol, spec: Option<&NonlinearitySpec>, s: f64, n_w: u32) -> Result<XtsNorm> {
    let op = SplitOperator::new(a, &sol.grid)?;
    let dtu = sol
        .fields
        .iter()
        .map(|u| {
            let mut d = op.apply(u).scale(I);
            if let Some(sp) = spec {
                d.axpy(one(), &nonlinearity_eval(u, sp)?);
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    xts_terms(&sol.times, &sol.fields, &dtu, s, n_w, true)
}

/// `iA` plus, in frozen form, `coef u0^p conj(u0)^q D^alpha`.
struct LinearPart {
    split: SplitOperator,
    frozen: Option<(Vec<C64>, MultiIndex)>,
}

impl LinearPart {
    fn new(a: &Symbol, g: &Grid, frozen: Option<(&Field, &NonlinearitySpec)>) -> Result<Self> {
        let split = SplitOperator::new(a, g)?;
        let frozen = frozen.map(|(u0, spec)| (u0.values.iter().map(|v| spec.prefactor(*v)).collect(), spec.alpha));
        Ok(Self { split, frozen })
    }

    fn frozen_term(&self, u: &Field) -> Option<Field> {
        self.frozen.as_ref().map(|(c, alpha)| {
            let mut d = derivative(u, *alpha);
            for (o, cv) in d.values.iter_mut().zip(c) {
                *o *= cv;
            }
            d
        })
    }

    /// Part of the generator not propagated exactly.
    fn explicit(&self, u: &Field) -> Field {
        let mut out = self.split.apply_rest(u).scale(I);
        if let Some(f) = self.frozen_term(u) {
            out.axpy(one(), &f);
        }
        out
    }

    fn full(&self, u: &Field) -> Field {
        let mut out = self.split.apply(u).scale(I);
        if let Some(f) = self.frozen_term(u) {
            out.axpy(one(), &f);
        }
        out
    }

    fn stability_limit(&self) -> f64 {
        let g = self.split.grid();
        let base = self.split.stability_limit(crate::evolve::Scheme::Auto);
        match &self.frozen {
            None => base,
            Some((c, alpha)) => {
                let cmax = c.iter().map(|v| v.norm()).fold(0.0, f64::max);
                let b = cmax * g.xi_max().powi(order_of(*alpha) as i32) * (g.dim() as f64).sqrt();
                if b == 0.0 {
                    base
                } else {
                    let rest = if base.is_finite() { C_STAB / base } else { 0.0 };
                    C_STAB / (rest + b)
                }
            }
        }
    }

    /// `W(h) u`.
    fn propagate(&self, u: &Field, h: f64) -> Field {
        lawson_step(&self.split, u, 0.0, h, &|_, v: &Field| self.explicit(v))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PicardOptions {
    /// Step of the Duhamel quadrature; defaults to `T/200` capped by stability.
    pub dt: Option<f64>,
    /// Relative tolerance on `||u_{j+1} - u_j||_X / ||u_{j+1}||_X`.
    pub tol: f64,
    pub max_iter: usize,
    /// Weight exponent `N` in `lambda = <x>^{-N}`.
    pub n_w: u32,
    /// Move `coef u0^p conj(u0)^q D^alpha u` into the linear part.
    pub frozen: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { dt: None, tol: 1e-6, max_iter: 30, n_w: 2, frozen: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardIterate {
    pub iteration: usize,
    /// `||u_j||_X`.
    pub norm: f64,
    /// `||u_j - u_{j-1}||_X`.
    pub step: f64,
    /// `step_j / step_{j-1}`, absent for the first step.
    pub rho: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PicardRun {
    pub times: Vec<f64>,
    pub solution: Vec<Field>,
    pub history: Vec<PicardIterate>,
    pub converged: bool,
    pub dt: f64,
    /// `max_t ||u_t - iAu - N(u)||_{s-3}`.
    pub residual: f64,
    /// Residual over `max_t ||N(u)||_{s-3}`.
    pub relative_residual: f64,
    pub norm: XtsNorm,
    pub warnings: Vec<String>,
}

impl PicardRun {
    pub fn max_rho(&self) -> f64 {
        self.history.iter().filter_map(|h| h.rho).fold(0.0, f64::max)
    }
}

fn regularity_warnings(s: f64, dim: usize, n_w: u32) -> Vec<String> {
    let mut w = Vec::new();
    if s.fract() != 0.0 || (s as i64) % 2 != 1 {
        w.push(format!("s = {s} is not an odd integer"));
    }
    let floor = (dim as u32 + 4 * n_w + 5) as f64;
    if s < floor {
        w.push(format!("s = {s} below regularity floor n + 4N + 5 = {floor}"));
    }
    w
}

/// One Duhamel sweep `u0 -> W(t)u0 + int_0^t W(t - t') f(t') dt'` by the
/// composite trapezoid rule on the step grid.
fn duhamel(lin: &LinearPart, u0: &Field, forcing: Option<&[Field]>, steps: usize, h: f64) -> Vec<Field> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(u0.clone());
    for i in 0..steps {
        let mut v = out[i].clone();
        if let Some(f) = forcing {
            v.axpy(C64::new(h / 2.0, 0.0), &f[i]);
        }
        let mut next = lin.propagate(&v, h);
        if let Some(f) = forcing {
            next.axpy(C64::new(h / 2.0, 0.0), &f[i + 1]);
        }
        out.push(next);
    }
    out
}

/// Fourth-order central differences, second-order one-sided at the ends.
fn time_derivative(series: &[Field], h: f64) -> Vec<Field> {
    let n = series.len();
    let comb = |coefs: &[(usize, f64)], scale: f64| {
        let mut out = Field::zeros(&series[0].grid);
        for &(k, c) in coefs {
            out.axpy(C64::new(c * scale, 0.0), &series[k]);
        }
        out
    };
    (0..n)
        .map(|i| {
            if n < 3 {
                comb(&[(n - 1, 1.0), (0, -1.0)], 1.0 / (h * (n as f64 - 1.0).max(1.0)))
            } else if i == 0 {
                comb(&[(0, -3.0), (1, 4.0), (2, -1.0)], 0.5 / h)
            } else if i == n - 1 {
                comb(&[(n - 1, 3.0), (n - 2, -4.0), (n - 3, 1.0)], 0.5 / h)
            } else if i == 1 || i == n - 2 || n < 5 {
                comb(&[(i + 1, 1.0), (i - 1, -1.0)], 0.5 / h)
            } else {
                comb(&[(i - 2, 1.0), (i - 1, -8.0), (i + 1, 8.0), (i + 2, -1.0)], 1.0 / (12.0 * h))
            }
        })
        .collect()
}

/// PDE residual with the constant-coefficient flow removed before
/// differencing in time, so only slow dynamics are differenced.
fn residual(split: &SplitOperator, times: &[f64], u: &[Field], spec: &NonlinearitySpec, s: f64, h: f64) -> Result<(f64, f64)> {
    let v: Vec<Field> = times.iter().zip(u).map(|(t, ui)| split.far_phase(ui, -t)).collect();
    let dv = time_derivative(&v, h);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for ((t, ui), dvi) in times.iter().zip(u).zip(&dv) {
        let n = nonlinearity_eval(ui, spec)?;
        let mut r = split.far_phase(dvi, *t);
        r.axpy(-I, &split.apply_rest(ui));
        r.axpy(C64::new(-1.0, 0.0), &n);
        worst = worst.max(sobolev_norm(&r, s - 3.0));
        scale = scale.max(sobolev_norm(&n, s - 3.0));
    }
    Ok((worst, if scale > 0.0 { worst / scale } else { 0.0 }))
}

fn precheck(a: &Symbol, u0: &Field, spec: &NonlinearitySpec, t_end: f64) -> Result<()> {
    spec.validate(u0.grid.dim())?;
    if a.dim != u0.grid.dim() {
        return Err(Error::GridMismatch);
    }
    if u0.max_abs() > 0.0 {
        let tail = u0.tail_fraction(0.5 * u0.grid.half_width());
        if tail >= 1e-8 {
            return Err(Error::Decay(format!("datum keeps tail mass {tail:.3e} outside |x| <= L/2")));
        }
        check_horizon(a, &[u0], t_end, WrapPolicy::Enforce)?;
    }
    Ok(())
}

/// Smallest iterate difference the X norm can resolve: machine epsilon in
/// the top Fourier mode, amplified by the `s + 1` derivatives of the
/// smoothing term.
fn roundoff_floor(g: &Grid, s: f64, u: &[Field]) -> f64 {
    let top = (g.dim() as f64).sqrt() * g.xi_max();
    let size = u.iter().map(Field::l2).fold(0.0, f64::max);
    f64::EPSILON * (1.0 + top * top).powf((s + 1.0) / 2.0) * size
}

/// Picard iteration on `u = W(t)u0 + int_0^t W(t - t') N(u) dt'`.
pub fn picard_solve(a: &Symbol, u0: &Field, spec: &NonlinearitySpec, s: f64, t_end: f64, opts: PicardOptions) -> Result<PicardRun> {
    precheck(a, u0, spec, t_end)?;
    check_index(s, opts.n_w)?;
    let g = &u0.grid;
    let lin = LinearPart::new(a, g, opts.frozen.then_some((u0, spec)))?;
    let limit = lin.stability_limit();
    let dt = opts.dt.unwrap_or((t_end / 200.0).min(limit));
    if dt > limit {
        return Err(Error::Stability { dt, limit });
    }
    let (steps, h) = step_count(t_end, dt)?;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * h).collect();
    let forcing = |u: &[Field]| -> Result<Vec<Field>> {
        u.par_iter()
            .map(|v| if opts.frozen { nonlinearity_tilde(v, u0, spec) } else { nonlinearity_eval(v, spec) })
            .collect()
    };
    let norm_of = |u: &[Field], f: &[Field], gate: bool| -> Result<XtsNorm> {
        let dtu: Vec<Field> = u
            .iter()
            .zip(f)
            .map(|(v, fv)| {
                let mut d = lin.full(v);
                d.axpy(one(), fv);
                d
            })
            .collect();
        xts_terms(&times, u, &dtu, s, opts.n_w, gate)
    };

    let mut current = duhamel(&lin, u0, None, steps, h);
    let mut cur_forcing = forcing(&current)?;
    let mut history = vec![PicardIterate { iteration: 0, norm: norm_of(&current, &cur_forcing, true)?.value(), step: f64::NAN, rho: None }];
    let floor = roundoff_floor(g, s, &current);
    let mut warnings = regularity_warnings(s, g.dim(), opts.n_w);
    let mut converged = false;
    let mut prev_step: Option<f64> = None;
    let mut prev_forcing: Option<Vec<Field>> = None;
    let mut growth_run = 0;
    for j in 1..=opts.max_iter {
        let next = duhamel(&lin, u0, Some(&cur_forcing), steps, h);
        let diff: Vec<Field> = next.iter().zip(&current).map(|(a, b)| a.sub(b)).collect();
        // d_t of the difference: full linear part plus the change in forcing.
        let diff_forcing: Vec<Field> = match &prev_forcing {
            Some(pf) => cur_forcing.iter().zip(pf).map(|(a, b)| a.sub(b)).collect(),
            None => cur_forcing.clone(),
        };
        let step = norm_of(&diff, &diff_forcing, false)?.value();
        let next_forcing = forcing(&next)?;
        let nrm = norm_of(&next, &next_forcing, false)?.value();
        let rho = prev_step.map(|p| if p > 0.0 { step / p } else { 0.0 });
        history.push(PicardIterate { iteration: j, norm: nrm, step, rho });
        if !step.is_finite() || !nrm.is_finite() {
            return Err(Error::Divergence { iterations: j, last_ratio: rho.unwrap_or(f64::INFINITY) });
        }
        growth_run = if rho.is_some_and(|r| r >= 1.0) { growth_run + 1 } else { 0 };
        if growth_run >= 3 {
            return Err(Error::Divergence { iterations: j, last_ratio: rho.unwrap() });
        }
        prev_step = Some(step);
        prev_forcing = Some(std::mem::replace(&mut cur_forcing, next_forcing));
        current = next;
        if step <= opts.tol * nrm {
            converged = true;
            break;
        }
        if step <= floor {
            warnings.push(format!("stopped at the round-off floor {floor:.1e} of the X norm above tolerance {:.1e}", opts.tol * nrm));
            converged = true;
            break;
        }
    }
    let (residual, relative_residual) = residual(&lin.split, &times, &current, spec, s, h)?;
    let full_forcing: Vec<Field> = current.par_iter().map(|v| nonlinearity_eval(v, spec)).collect::<Result<_>>()?;
    let plain = LinearPart::new(a, g, None)?;
    let dtu: Vec<Field> = current
        .iter()
        .zip(&full_forcing)
        .map(|(v, f)| {
            let mut d = plain.full(v);
            d.axpy(one(), f);
            d
        })
        .collect();
    let norm = xts_terms(&times, &current, &dtu, s, opts.n_w, true)?;
    Ok(PicardRun {
        times,
        solution: current,
        history,
        converged,
        dt: h,
        residual,
        relative_residual,
        norm,
        warnings,
    })
}

/// Method-of-lines integration of `u_t = iAu + N(u)` with the
/// integrating-factor RK4 step; returns every step.
pub fn direct_solve(a: &Symbol, u0: &Field, spec: &NonlinearitySpec, t_end: f64, dt: f64) -> Result<Vec<Field>> {
    precheck(a, u0, spec, t_end)?;
    let lin = LinearPart::new(a, &u0.grid, None)?;
    let limit = lin.stability_limit();
    if dt > limit {
        return Err(Error::Stability { dt, limit });
    }
    let (steps, h) = step_count(t_end, dt)?;
    let rhs = |_: f64, v: &Field| {
        let mut out = lin.explicit(v);
        out.axpy(one(), &nonlinearity_eval(v, spec).expect("validated"));
        out
    };
    let mut out = vec![u0.clone()];
    for i in 0..steps {
        let next = lawson_step(&lin.split, &out[i], i as f64 * h, h, &rhs);
        out.push(next);
    }
    Ok(out)
}

/// `max_t ||u(t) - v(t)||_0`.
pub fn sup_l2_distance(u: &[Field], v: &[Field]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a.sub(b).l2()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderPoint {
    pub delta: f64,
    /// `||v - u||_X` for the datum perturbed by `delta`.
    pub distance: f64,
    pub ratio: f64,
}

/// Solution-map continuity: distances for datum perturbations
/// `u0 + delta * direction`, with the direction scaled to unit `H^s` norm.
pub fn continuity_ladder(
    a: &Symbol,
    u0: &Field,
    direction: &Field,
    deltas: &[f64],
    spec: &NonlinearitySpec,
    s: f64,
    t_end: f64,
    opts: PicardOptions,
) -> Result<Vec<LadderPoint>> {
    let unit = direction.scale(C64::new(1.0 / sobolev_norm(direction, s), 0.0));
    let base = picard_solve(a, u0, spec, s, t_end, opts)?;
    let lin = LinearPart::new(a, &u0.grid, None)?;
    deltas
        .par_iter()
        .map(|&delta| {
            let mut v0 = u0.clone();
            v0.axpy(C64::new(delta, 0.0), &unit);
            let run = picard_solve(a, &v0, spec, s, t_end, opts)?;
            let diff: Vec<Field> = run.solution.iter().zip(&base.solution).map(|(x, y)| x.sub(y)).collect();
            let dtu = diff
                .iter()
                .zip(run.solution.iter().zip(&base.solution))
                .map(|(d, (x, y))| {
                    let mut out = lin.full(d);
                    out.axpy(one(), &nonlinearity_eval(x, spec)?.sub(&nonlinearity_eval(y, spec)?));
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?;
            let distance = xts_terms(&base.times, &diff, &dtu, s, opts.n_w, false)?.value();
            Ok(LadderPoint { delta, distance, ratio: distance / delta })
        })
        .collect()
}

/// Largest contraction factor for each horizon.
pub fn contraction_ladder(
    a: &Symbol,
    u0: &Field,
    spec: &NonlinearitySpec,
    s: f64,
    horizons: &[f64],
    opts: PicardOptions,
) -> Result<Vec<(f64, f64)>> {
    horizons
        .par_iter()
        .map(|&t| {
            let o = PicardOptions { dt: opts.dt.map(|d| d.min(t / 50.0)), ..opts };
            Ok((t, picard_solve(a, u0, spec, s, t, o)?.max_rho()))
        })
        .collect()
}

//! Quantization of symbols on a grid, the asymptotic Weyl product, change of
//! quantization and positivity diagnostics.
//!
//! Dense matrices follow
//! `A[j, l] = N^{-n} sum_k e^{i (x_j - x_l) xi_k} a(m_jl, xi_k)`
//! with `m_jl = (x_j + x_l)/2` (Weyl) or `x_j` (Kohn-Nirenberg), midpoints
//! taken in box coordinates without wrapping. Polynomial symbols are
//! assembled from per-axis moment tables, which also fixes the Nyquist
//! convention: a factor `xi_i^p` with odd `p` vanishes on the Nyquist mode
//! of axis `i`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{apply_bessel, apply_multiplier, inner, Field, Grid, Point, C64};
use crate::symbol::{
    index_factorial, monomial_deriv, order_of, sub_indices, CoefFn, MultiIndex, PolySymbol, SampleSet, Symbol, ZERO,
};

/// Largest truncation order accepted by the expansions.
pub const MAX_ORDER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantization {
    Weyl,
    Kn,
}

/// Grid matrix of a quantized symbol.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub grid: Grid,
    pub matrix: DMatrix<C64>,
    pub quantization: Quantization,
    pub source: String,
}

impl DenseOperator {
    pub fn identity(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            matrix: DMatrix::identity(grid.len(), grid.len()),
            quantization: Quantization::Weyl,
            source: "identity".into(),
        }
    }

    pub fn apply(&self, u: &Field) -> Result<Field> {
        if u.grid != self.grid {
            return Err(Error::GridMismatch);
        }
        let v = &self.matrix * DVector::from_column_slice(&u.values);
        Field::from_values(&self.grid, v.as_slice().to_vec())
    }

    /// `self * other`.
    pub fn compose(&self, other: &DenseOperator) -> Result<DenseOperator> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(DenseOperator {
            grid: self.grid.clone(),
            matrix: &self.matrix * &other.matrix,
            quantization: self.quantization,
            source: format!("({})({})", self.source, other.source),
        })
    }

    /// `||M - M^*||_F / ||M||_F`.
    pub fn adjoint_residual(&self) -> f64 {
        let norm = self.matrix.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (&self.matrix - self.matrix.adjoint()).norm() / norm
    }
}

fn signed(g: &Grid, i: usize) -> i64 {
    g.wavenumber(i)
}

/// `xi^p` on the spectral slot with Nyquist masking per odd factor.
pub fn masked_monomial(g: &Grid, power: MultiIndex, idx: usize) -> f64 {
    let ax = g.split(idx);
    let xi = g.wavevector(idx);
    let mut v = 1.0;
    for a in 0..g.dim() {
        if power[a] % 2 == 1 && g.is_nyquist(ax[a]) {
            return 0.0;
        }
        v *= xi[a].powi(power[a] as i32);
    }
    v
}

fn odd_integer(order: f64) -> bool {
    order.fract() == 0.0 && order.is_finite() && (order as i64).rem_euclid(2) == 1
}

/// Multiplier values `a(xi_k)` in FFT order for an `x`-independent symbol.
pub fn multiplier_values(a: &Symbol, g: &Grid) -> Result<Vec<C64>> {
    if a.dim != g.dim() {
        return Err(Error::GridMismatch);
    }
    if let Some(p) = a.poly() {
        if p.is_x_independent() {
            let coefs: Vec<(MultiIndex, C64)> = p.terms.iter().map(|t| (t.power, t.coef.eval(&[0.0; 2]))).collect();
            return Ok((0..g.len())
                .map(|i| coefs.iter().map(|(pw, c)| c * masked_monomial(g, *pw, i)).sum())
                .collect());
        }
    }
    if !a.x_independent {
        return Err(Error::InvalidParam(format!("symbol `{}` depends on x", a.name)));
    }
    let mask = odd_integer(a.order);
    Ok((0..g.len())
        .map(|i| if mask && g.touches_nyquist(i) { C64::new(0.0, 0.0) } else { a.eval(&[0.0; 2], &g.wavevector(i)) })
        .collect())
}

/// `e^{2 pi i d k / N}` for `d, k` in `0..N`, indexed `d * N + k` with `k` in FFT order.
fn phase_table(g: &Grid) -> Vec<C64> {
    let n = g.points();
    let mut t = vec![C64::new(0.0, 0.0); n * n];
    for d in 0..n {
        for k in 0..n {
            // Reduce the product mod n so the angle stays in [0, 2 pi).
            let r = (d as i64 * signed(g, k) as i64).rem_euclid(n as i64);
            t[d * n + k] = C64::from_polar(1.0, 2.0 * PI * r as f64 / n as f64);
        }
    }
    t
}

/// Per-axis moments `N^{-1} sum_k e^{2 pi i d k/N} xi_k^p`, masked for odd `p`.
fn moment_table(g: &Grid, p: usize, phases: &[C64]) -> Vec<C64> {
    let n = g.points();
    (0..n)
        .map(|d| {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..n {
                if p % 2 == 1 && g.is_nyquist(k) {
                    continue;
                }
                acc += phases[d * n + k] * g.freq(k).powi(p as i32);
            }
            acc / n as f64
        })
        .collect()
}

/// Coordinate of half-integer node `s/2` along one axis.
fn half_node(g: &Grid, s: usize) -> f64 {
    -g.half_width() + g.half_width() * s as f64 / g.points() as f64
}

/// Sum index per axis: `j + l` for Weyl, `2j` for KN.
fn sum_index(q: Quantization, j: usize, l: usize) -> usize {
    match q {
        Quantization::Weyl => j + l,
        Quantization::Kn => 2 * j,
    }
}

fn mid_point(g: &Grid, s: [usize; 2]) -> Point {
    if g.dim() == 1 {
        [half_node(g, s[0]), 0.0]
    } else {
        [half_node(g, s[0]), half_node(g, s[1])]
    }
}

/// Dense matrix of `Op^w(a)` or `Op_kn(a)`.
pub fn quantize_dense(a: &Symbol, g: &Grid, q: Quantization) -> Result<DenseOperator> {
    if !g.dense_eligible() {
        return Err(Error::DenseIneligible(g.len()));
    }
    if a.dim != g.dim() {
        return Err(Error::GridMismatch);
    }
    let n = g.points();
    let len = g.len();
    let dim = g.dim();
    let phases = phase_table(g);
    let ns = 2 * n - 1;
    let s_count = if dim == 1 { ns } else { ns * ns };
    let s_of = |j: usize, l: usize| -> usize {
        let (jj, ll) = (g.split(j), g.split(l));
        if dim == 1 {
            sum_index(q, jj[0], ll[0])
        } else {
            sum_index(q, jj[0], ll[0]) * ns + sum_index(q, jj[1], ll[1])
        }
    };
    let s_point = |s: usize| if dim == 1 { mid_point(g, [s, 0]) } else { mid_point(g, [s / ns, s % ns]) };
    let d_of = |j: usize, l: usize| -> [usize; 2] {
        let (jj, ll) = (g.split(j), g.split(l));
        [(jj[0] + n - ll[0]) % n, (jj[1] + n - ll[1]) % n]
    };

    let rows: Vec<Vec<C64>> = if let Some(p) = a.poly() {
        // Moment tables per axis and power, coefficient tables per midpoint.
        let max_p = p.terms.iter().map(|t| t.power[0].max(t.power[1])).max().unwrap_or(0);
        let moments: Vec<Vec<C64>> = (0..=max_p).map(|k| moment_table(g, k, &phases)).collect();
        let coef_tabs: Vec<Vec<C64>> = p
            .terms
            .iter()
            .map(|t| {
                if t.coef.is_const() {
                    vec![t.coef.eval(&[0.0; 2])]
                } else {
                    (0..s_count).into_par_iter().map(|s| t.coef.eval(&s_point(s))).collect()
                }
            })
            .collect();
        (0..len)
            .into_par_iter()
            .map(|j| {
                (0..len)
                    .map(|l| {
                        let s = s_of(j, l);
                        let d = d_of(j, l);
                        let mut acc = C64::new(0.0, 0.0);
                        for (t, tab) in p.terms.iter().zip(&coef_tabs) {
                            let c = if tab.len() == 1 { tab[0] } else { tab[s] };
                            let mut m = moments[t.power[0]][d[0]];
                            if dim == 2 {
                                m *= moments[t.power[1]][d[1]];
                            }
                            acc += c * m;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    } else {
        let mask = odd_integer(a.order);
        let weight = |k: usize| if mask && g.touches_nyquist(k) { 0.0 } else { 1.0 };
        let phase = |d: [usize; 2], k: usize| -> C64 {
            let kk = g.split(k);
            let mut v = phases[d[0] * n + kk[0]];
            if dim == 2 {
                v *= phases[d[1] * n + kk[1]];
            }
            v
        };
        let scale = 1.0 / len as f64;
        if a.x_independent {
            let vals: Vec<C64> = (0..len).map(|k| a.eval(&[0.0; 2], &g.wavevector(k)) * weight(k)).collect();
            let kernel: Vec<C64> = (0..len)
                .into_par_iter()
                .map(|dflat| {
                    let d = g.split(dflat);
                    (0..len).map(|k| phase(d, k) * vals[k]).sum::<C64>() * scale
                })
                .collect();
            (0..len)
                .into_par_iter()
                .map(|j| {
                    (0..len)
                        .map(|l| {
                            let d = d_of(j, l);
                            kernel[if dim == 1 { d[0] } else { d[0] * n + d[1] }]
                        })
                        .collect()
                })
                .collect()
        } else {
            let table: Vec<Vec<C64>> = (0..s_count)
                .into_par_iter()
                .map(|s| {
                    let x = s_point(s);
                    (0..len).map(|k| a.eval(&x, &g.wavevector(k)) * weight(k)).collect()
                })
                .collect();
            (0..len)
                .into_par_iter()
                .map(|j| {
                    (0..len)
                        .map(|l| {
                            let row = &table[s_of(j, l)];
                            let d = d_of(j, l);
                            (0..len).map(|k| phase(d, k) * row[k]).sum::<C64>() * scale
                        })
                        .collect()
                })
                .collect()
        }
    };
    let flat: Vec<C64> = rows.into_iter().flatten().collect();
    Ok(DenseOperator {
        grid: g.clone(),
        matrix: DMatrix::from_row_slice(len, len, &flat),
        quantization: q,
        source: a.name.clone(),
    })
}

/// Kohn-Nirenberg application `(2L)^{-n} sum_k a(x_j, xi_k) u_hat(xi_k) e^{i x_j xi_k}`
/// without a matrix. Polynomial symbols use one inverse transform per power.
pub fn apply_fast(a: &Symbol, u: &Field, q: Quantization) -> Result<Field> {
    let g = &u.grid;
    if a.dim != g.dim() {
        return Err(Error::GridMismatch);
    }
    if a.xi_independent {
        let values = (0..g.len()).map(|j| a.eval(&g.point(j), &[0.0; 2]) * u.values[j]).collect();
        return Field::from_values(g, values);
    }
    if a.x_independent || a.poly().is_some_and(|p| p.is_x_independent()) {
        let m = multiplier_values(a, g)?;
        return Ok(apply_multiplier(u, |i| m[i]));
    }
    if q != Quantization::Kn {
        return Err(Error::InvalidParam(format!(
            "fast application of `{}` is only available in Kohn-Nirenberg form",
            a.name
        )));
    }
    if let Some(p) = a.poly() {
        let mut out = Field::zeros(g);
        let cache = derivative_cache(p.terms.iter().map(|t| t.power), u);
        for t in &p.terms {
            let du = &cache[&t.power];
            for (j, v) in out.values.iter_mut().enumerate() {
                *v += t.coef.eval(&g.point(j)) * du.values[j];
            }
        }
        return Ok(out);
    }
    let uh = crate::grid::transform(u);
    let mask = odd_integer(a.order);
    let vol = (2.0 * g.half_width()).powi(g.dim() as i32);
    let values = (0..g.len())
        .into_par_iter()
        .map(|j| {
            let x = g.point(j);
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..g.len() {
                if mask && g.touches_nyquist(k) {
                    continue;
                }
                let xi = g.wavevector(k);
                let ph = C64::from_polar(1.0, x[0] * xi[0] + x[1] * xi[1]);
                acc += a.eval(&x, &xi) * uh.coeffs[k] * ph;
            }
            acc / vol
        })
        .collect();
    Field::from_values(g, values)
}

/// `D^p u` for each requested power, sharing one forward transform.
fn derivative_cache(powers: impl Iterator<Item = MultiIndex>, u: &Field) -> BTreeMap<MultiIndex, Field> {
    let g = &u.grid;
    let mut spec = u.values.clone();
    g.fft_forward(&mut spec);
    let mut out = BTreeMap::new();
    for p in powers {
        out.entry(p).or_insert_with(|| {
            if p == ZERO {
                return u.clone();
            }
            let mut d: Vec<C64> = spec.iter().enumerate().map(|(i, v)| v * masked_monomial(g, p, i)).collect();
            g.fft_inverse(&mut d);
            Field { grid: g.clone(), values: d }
        });
    }
    out
}

fn binom_index(a: MultiIndex, g: MultiIndex) -> f64 {
    index_factorial(a) / (index_factorial(g) * index_factorial([a[0] - g[0], a[1] - g[1]]))
}

/// Matrix-free `Op^w(a)` for symbols with a fast path.
#[derive(Clone, Debug)]
pub struct WeylOperator {
    grid: Grid,
    path: WeylPath,
}

#[derive(Clone, Debug)]
enum WeylPath {
    Multiplier(Vec<C64>),
    /// `x`-independent multiplier plus variable terms in symmetric ordering.
    Poly { constant: Vec<C64>, variable: Vec<(MultiIndex, Vec<C64>)> },
    Dense(Arc<DenseOperator>),
}

impl WeylOperator {
    pub fn new(a: &Symbol, g: &Grid) -> Result<Self> {
        if a.dim != g.dim() {
            return Err(Error::GridMismatch);
        }
        let path = if let Some(p) = a.poly() {
            let mut constant = vec![C64::new(0.0, 0.0); g.len()];
            let mut variable = Vec::new();
            for t in &p.terms {
                if t.coef.is_const() {
                    let c = t.coef.eval(&[0.0; 2]);
                    for (i, v) in constant.iter_mut().enumerate() {
                        *v += c * masked_monomial(g, t.power, i);
                    }
                } else {
                    variable.push((t.power, (0..g.len()).map(|j| t.coef.eval(&g.point(j))).collect()));
                }
            }
            if variable.is_empty() {
                WeylPath::Multiplier(constant)
            } else {
                WeylPath::Poly { constant, variable }
            }
        } else if a.x_independent {
            WeylPath::Multiplier(multiplier_values(a, g)?)
        } else if a.xi_independent {
            let vals: Vec<C64> = (0..g.len()).map(|j| a.eval(&g.point(j), &[0.0; 2])).collect();
            WeylPath::Poly { constant: vec![C64::new(0.0, 0.0); g.len()], variable: vec![(ZERO, vals)] }
        } else {
            WeylPath::Dense(Arc::new(quantize_dense(a, g, Quantization::Weyl)?))
        };
        Ok(Self { grid: g.clone(), path })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_multiplier(&self) -> bool {
        matches!(self.path, WeylPath::Multiplier(_))
    }

    pub fn apply(&self, u: &Field) -> Field {
        match &self.path {
            WeylPath::Multiplier(m) => apply_multiplier(u, |i| m[i]),
            WeylPath::Dense(op) => op.apply(u).expect("grid checked at construction"),
            WeylPath::Poly { constant, variable } => {
                let g = &self.grid;
                let mut out = apply_multiplier(u, |i| constant[i]);
                // Op^w(c xi^a) = 2^{-|a|} sum_{g <= a} binom(a, g) D^g c D^{a-g}
                let inner_powers = variable.iter().flat_map(|(a, _)| sub_indices(*a).map(move |gm| [a[0] - gm[0], a[1] - gm[1]]));
                let cache = derivative_cache(inner_powers, u);
                let mut buckets: BTreeMap<MultiIndex, Vec<C64>> = BTreeMap::new();
                for (alpha, coef) in variable {
                    let w = 0.5f64.powi(order_of(*alpha) as i32);
                    for gm in sub_indices(*alpha) {
                        let rest = [alpha[0] - gm[0], alpha[1] - gm[1]];
                        let du = &cache[&rest];
                        let b = buckets.entry(gm).or_insert_with(|| vec![C64::new(0.0, 0.0); g.len()]);
                        let f = w * binom_index(*alpha, gm);
                        for j in 0..g.len() {
                            b[j] += f * coef[j] * du.values[j];
                        }
                    }
                }
                for (gm, vals) in buckets {
                    let mut d = vals;
                    if gm != ZERO {
                        g.fft_forward(&mut d);
                        for (i, v) in d.iter_mut().enumerate() {
                            *v *= masked_monomial(g, gm, i);
                        }
                        g.fft_inverse(&mut d);
                    }
                    for (o, v) in out.values.iter_mut().zip(d) {
                        *o += v;
                    }
                }
                out
            }
        }
    }
}

/// Terms of the Weyl product expansion of total order `k`:
/// `(-i/2)^k (-1)^{|b|} / (a! b!)` paired with `(alpha, beta)`.
pub fn product_terms(dim: usize, k: usize) -> Vec<(C64, MultiIndex, MultiIndex)> {
    let mut out = Vec::new();
    let base = C64::new(0.0, -0.5).powu(k as u32);
    for ao in 0..=k {
        for alpha in crate::symbol::indices_of_order(dim, ao) {
            for beta in crate::symbol::indices_of_order(dim, k - ao) {
                let sign = if order_of(beta) % 2 == 1 { -1.0 } else { 1.0 };
                out.push((base * sign / (index_factorial(alpha) * index_factorial(beta)), alpha, beta));
            }
        }
    }
    out
}

/// Exact truncated product of polynomial symbols.
pub fn compose_poly(a: &PolySymbol, b: &PolySymbol, order: usize) -> PolySymbol {
    let dim = a.dim.max(b.dim);
    let mut out = PolySymbol::new(dim);
    for k in 0..=order {
        for (w, alpha, beta) in product_terms(dim, k) {
            for s in &a.terms {
                // d_xi^alpha d_x^beta of s, times d_x^alpha d_xi^beta of t
                let ms = monomial_deriv(s.power, alpha, &[1.0, 1.0]);
                if ms == 0.0 {
                    continue;
                }
                let ds = s.coef.derivative(beta);
                if ds.is_zero() {
                    continue;
                }
                for t in &b.terms {
                    let mt = monomial_deriv(t.power, beta, &[1.0, 1.0]);
                    if mt == 0.0 {
                        continue;
                    }
                    let dt = t.coef.derivative(alpha);
                    if dt.is_zero() {
                        continue;
                    }
                    let power = [
                        s.power[0] - alpha[0] + t.power[0] - beta[0],
                        s.power[1] - alpha[1] + t.power[1] - beta[1],
                    ];
                    let coef = CoefFn::Prod(vec![CoefFn::Const(w * ms * mt), ds.clone(), dt]);
                    out.push(power, coef, k == 0 && s.principal && t.principal);
                }
            }
        }
    }
    out
}

/// Truncated Weyl product `a #_K b`.
pub fn compose_symbols(a: &Symbol, b: &Symbol, order: usize) -> Result<Symbol> {
    if order > MAX_ORDER {
        return Err(Error::MissingDerivative(format!("truncation order {order} exceeds {MAX_ORDER}")));
    }
    if a.dim != b.dim {
        return Err(Error::InvalidParam("composed symbols must share a dimension".into()));
    }
    let name = format!("{}#{}", a.name, b.name);
    if let (Some(p), Some(q)) = (a.poly(), b.poly()) {
        let prod = compose_poly(p, q, order);
        let mut s = Symbol::from_poly(&name, a.dim, a.order + b.order, prod);
        s.real_valued = s.real_valued && s.poly().is_some_and(|p| p.is_real());
        return Ok(s);
    }
    let terms: Vec<_> = (0..=order).flat_map(|k| product_terms(a.dim, k)).collect();
    let (a2, b2) = (a.clone(), b.clone());
    let mut s = Symbol::from_fn(&name, a.dim, a.order + b.order, move |x, xi| {
        terms
            .iter()
            .map(|(w, al, be)| w * a2.deriv(*al, *be, x, xi) * b2.deriv(*be, *al, x, xi))
            .sum()
    });
    s.x_independent = a.x_independent && b.x_independent;
    s.xi_independent = a.xi_independent && b.xi_independent;
    Ok(s)
}

/// Weyl symbol of `Op_kn(a)`: `sum_{|g| <= K} (i/2)^{|g|} / g! d_x^g d_xi^g a`.
pub fn change_quantization(a: &Symbol, order: usize) -> Result<Symbol> {
    if order > MAX_ORDER {
        return Err(Error::MissingDerivative(format!("truncation order {order} exceeds {MAX_ORDER}")));
    }
    if a.x_independent || a.xi_independent {
        return Ok(a.clone());
    }
    let name = format!("weyl({})", a.name);
    let gammas: Vec<(C64, MultiIndex)> = (0..=order)
        .flat_map(|k| {
            crate::symbol::indices_of_order(a.dim, k)
                .into_iter()
                .map(move |gm| (C64::new(0.0, 0.5).powu(k as u32) / index_factorial(gm), gm))
        })
        .collect();
    if let Some(p) = a.poly() {
        let mut out = PolySymbol::new(a.dim);
        for (w, gm) in &gammas {
            for t in &p.terms {
                let m = monomial_deriv(t.power, *gm, &[1.0, 1.0]);
                if m == 0.0 {
                    continue;
                }
                let c = t.coef.derivative(*gm);
                if c.is_zero() {
                    continue;
                }
                let power = [t.power[0] - gm[0], t.power[1] - gm[1]];
                out.push(power, c.scaled(w * m), t.principal && order_of(*gm) == 0);
            }
        }
        return Ok(Symbol::from_poly(&name, a.dim, a.order, out));
    }
    let a2 = a.clone();
    Ok(Symbol::from_fn(&name, a.dim, a.order, move |x, xi| {
        gammas.iter().map(|(w, gm)| w * a2.deriv(*gm, *gm, x, xi)).sum()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    SharpGarding,
    FeffermanPhong,
}

impl Flavor {
    /// Sobolev index `(m-1)/2` or `(m-2)/2` of the lower bound.
    pub fn index(self, order: f64) -> f64 {
        match self {
            Flavor::SharpGarding => (order - 1.0) / 2.0,
            Flavor::FeffermanPhong => (order - 2.0) / 2.0,
        }
    }
}

/// Localized band-limited wavepackets `H_h((x-c)/w) e^{-(x-c)^2/(2w^2)} e^{i k x}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFamily {
    pub centers: Vec<f64>,
    pub width: f64,
    pub freqs: Vec<f64>,
    pub hermite_orders: usize,
}

impl ProbeFamily {
    /// Packets inside `|x| <= L/2` with spectra below `xi_max/2`.
    pub fn for_grid(g: &Grid) -> Self {
        let l = g.half_width();
        let width = l / 12.0;
        let centers = (0..5).map(|i| 0.4 * l * (i as f64 - 2.0) / 2.0).collect();
        let band = g.xi_max() / 2.0 - 6.0 / width;
        let step = g.xi_max() / 8.0;
        let freqs = [-2.0, -1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|m| m * step)
            .filter(|k: &f64| k.abs() <= band.max(0.0))
            .collect();
        Self { centers, width, freqs, hermite_orders: 3 }
    }

    fn profile(&self, h: usize, y: f64) -> f64 {
        let (mut a, mut b) = (1.0, 2.0 * y);
        let hv = match h {
            0 => 1.0,
            1 => b,
            _ => {
                for j in 1..h {
                    let c = 2.0 * y * b - 2.0 * j as f64 * a;
                    a = b;
                    b = c;
                }
                b
            }
        };
        hv * (-y * y / 2.0).exp()
    }

    pub fn fields(&self, g: &Grid) -> Vec<Field> {
        let mut out = Vec::new();
        let axes: Vec<[f64; 2]> = if g.dim() == 1 {
            self.centers.iter().map(|&c| [c, 0.0]).collect()
        } else {
            self.centers.iter().flat_map(|&a| self.centers.iter().map(move |&b| [a, b])).collect()
        };
        let ks: Vec<[f64; 2]> = if g.dim() == 1 {
            self.freqs.iter().map(|&k| [k, 0.0]).collect()
        } else {
            self.freqs.iter().flat_map(|&a| self.freqs.iter().map(move |&b| [a, b])).collect()
        };
        let hs: Vec<[usize; 2]> = if g.dim() == 1 {
            (0..self.hermite_orders).map(|h| [h, 0]).collect()
        } else {
            (0..self.hermite_orders).flat_map(|a| (0..self.hermite_orders).map(move |b| [a, b])).collect()
        };
        for c in &axes {
            for k in &ks {
                for h in &hs {
                    out.push(Field::from_fn(g, |x| {
                        let mut amp = 1.0;
                        for ax in 0..g.dim() {
                            amp *= self.profile(h[ax], (x[ax] - c[ax]) / self.width);
                        }
                        C64::from_polar(amp, x[0] * k[0] + x[1] * k[1])
                    }));
                }
            }
        }
        out
    }
}

/// Gram-Schmidt in `H^sigma`; near-dependent vectors are dropped.
pub fn orthonormalize(fields: &[Field], sigma: f64) -> Vec<Field> {
    let mut basis: Vec<(Field, Field)> = Vec::new();
    for f in fields {
        let mut v = f.clone();
        let mut lv = apply_bessel(&v, sigma);
        let start = inner(&lv, &lv).expect("same grid").re.sqrt();
        if start == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for (q, lq) in &basis {
                let c = inner(&lv, lq).expect("same grid");
                v.axpy(-c, q);
                lv.axpy(-c, lq);
            }
        }
        let nrm = inner(&lv, &lv).expect("same grid").re.sqrt();
        if nrm > 1e-8 * start {
            let s = C64::new(1.0 / nrm, 0.0);
            basis.push((v.scale(s), lv.scale(s)));
        }
    }
    basis.into_iter().map(|(q, _)| q).collect()
}

/// Fitted lower-bound constant at one resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PositivityFit {
    pub points: usize,
    /// Worst single-probe Rayleigh quotient, negated.
    pub c_probe: f64,
    /// Minimum eigenvalue of the compression to the probe span, negated.
    pub c_eig: f64,
    /// Larger of the two; negative when the form is coercive on the probe span.
    pub c: f64,
    pub basis_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PositivityReport {
    pub flavor: Flavor,
    pub sigma: f64,
    pub band_limit: f64,
    pub fits: Vec<PositivityFit>,
    /// `C(2N)/C(N)`; 1 when `C(N)` vanishes.
    pub stability_ratio: f64,
    pub c: f64,
}

fn positivity_fit(a: &Symbol, g: &Grid, family: &ProbeFamily, sigma: f64) -> Result<PositivityFit> {
    let op = quantize_dense(a, g, Quantization::Weyl)?;
    let probes = family.fields(g);
    let mut c_probe = f64::NEG_INFINITY;
    for u in &probes {
        let au = op.apply(u)?;
        let q = inner(&au, u)?.re;
        let n2 = crate::grid::sobolev_norm_sq(u, sigma);
        c_probe = c_probe.max(-q / n2);
    }
    let basis = orthonormalize(&probes, sigma);
    let images: Vec<Field> = basis.iter().map(|q| op.apply(q)).collect::<Result<_>>()?;
    let m = basis.len();
    let mut h = DMatrix::<C64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            h[(i, j)] = inner(&images[j], &basis[i])?;
        }
    }
    let herm = (&h + h.adjoint()) * C64::new(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(herm);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let c_eig = -min;
    Ok(PositivityFit {
        points: g.points(),
        c_probe,
        c_eig,
        c: c_probe.max(c_eig),
        basis_size: m,
    })
}

/// Lower-bound constant of `Re(Op^w(a) u, u) >= -C ||u||_sigma^2` fitted at `N` and `2N`.
pub fn positivity_diagnostic(a: &Symbol, g: &Grid, flavor: Flavor) -> Result<PositivityReport> {
    let samples = SampleSet::new(g.dim(), g.half_width(), 1e-3, g.xi_max(), 24, 32, 33);
    let (worst, wx, wxi) = samples.min_over(|x, xi| {
        let v = a.eval(x, xi);
        if flavor == Flavor::FeffermanPhong && v.im.abs() > 1e-12 * (1.0 + v.re.abs()) {
            return -1.0;
        }
        v.re
    });
    let at_zero = samples.xs.iter().map(|x| a.eval(x, &[0.0; 2]).re).fold(f64::INFINITY, f64::min);
    if worst < -1e-12 || at_zero < -1e-12 {
        return Err(Error::Precondition(format!(
            "symbol `{}` is not nonnegative (value {worst:.3e} at x = {wx:?}, xi = {wxi:?})",
            a.name
        )));
    }
    let sigma = flavor.index(a.order);
    let family = ProbeFamily::for_grid(g);
    let fine = Grid::new(g.dim(), g.half_width(), 2 * g.points())?;
    let fits = vec![positivity_fit(a, g, &family, sigma)?, positivity_fit(a, &fine, &family, sigma)?];
    let (c0, c1) = (fits[0].c, fits[1].c);
    let stability_ratio = if c0.abs() <= 1e-12 { 1.0 } else { c1 / c0 };
    let band = family.freqs.iter().fold(0.0f64, |m, k| m.max(k.abs())) + 6.0 / family.width;
    Ok(PositivityReport { flavor, sigma, band_limit: band, c: c0.max(c1), fits, stability_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{apply_bessel, transform};
    use crate::symbol::{catalog, CoefSpec, PolyTerm, SymbolParams};

    fn rel(a: &Field, b: &Field) -> f64 {
        a.sub(b).l2() / b.l2().max(1e-300)
    }

    fn gaussian(g: &Grid, k: f64, w: f64, c: f64) -> Field {
        Field::from_fn(g, |x| C64::from_polar((-((x[0] - c) / w).powi(2) / 2.0).exp(), k * x[0]))
    }

    fn xi_symbol() -> Symbol {
        let mut p = PolySymbol::new(1);
        p.push([1, 0], CoefFn::constant(1.0), true);
        Symbol::from_poly("xi", 1, 1.0, p)
    }

    fn x_symbol() -> Symbol {
        let mut p = PolySymbol::new(1);
        p.push(ZERO, CoefFn::Coord(0), true);
        Symbol::from_poly("x", 1, 0.0, p)
    }

    #[test]
    fn bessel_symbol_matches_multiplier() {
        let g = Grid::new(1, 4.0, 64).unwrap();
        let u = gaussian(&g, 2.0, 0.7, 0.3);
        let op = quantize_dense(&Symbol::xi_bracket(1, 1.5, 1.0), &g, Quantization::Weyl).unwrap();
        assert!(rel(&op.apply(&u).unwrap(), &apply_bessel(&u, 1.5)) < 1e-10);
    }

    #[test]
    fn multiplication_symbol_is_diagonal() {
        let g = Grid::new(1, 4.0, 32).unwrap();
        let a = Symbol::multiplication(1, CoefFn::Bracket { amp: C64::new(1.0, 0.0), power: 2.0 });
        let op = quantize_dense(&a, &g, Quantization::Weyl).unwrap();
        for j in 0..32 {
            for l in 0..32 {
                let want = if j == l { 1.0 + g.node(j).powi(2) } else { 0.0 };
                assert!((op.matrix[(j, l)] - C64::new(want, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn weyl_x_xi_on_gaussian_matches_quadrature() {
        // Oracle: Op^w(x xi) = (x D + D x)/2 = -i (x u' + u/2), evaluated from the
        // closed form of a centred Gaussian and cross-checked on a 4x refined grid.
        let g = Grid::new(1, 8.0, 128).unwrap();
        let mut p = PolySymbol::new(1);
        p.push([1, 0], CoefFn::Coord(0), true);
        let a = Symbol::from_poly("x_xi", 1, 1.0, p);
        let u = gaussian(&g, 0.0, 1.0, 0.0);
        let got = quantize_dense(&a, &g, Quantization::Weyl).unwrap().apply(&u).unwrap();
        let want = Field::from_fn(&g, |x| {
            let e = (-x[0] * x[0] / 2.0).exp();
            C64::new(0.0, -1.0) * (x[0] * (-x[0] * e) + 0.5 * e)
        });
        assert!(rel(&got, &want) < 1e-6, "{}", rel(&got, &want));
        let fine = Grid::new(1, 8.0, 512).unwrap();
        let uf = gaussian(&fine, 0.0, 1.0, 0.0);
        let gf = quantize_dense(&a, &fine, Quantization::Weyl).unwrap().apply(&uf).unwrap();
        for j in (0..128).step_by(8) {
            assert!((gf.values[4 * j] - got.values[j]).norm() < 1e-6);
        }
    }

    #[test]
    fn fast_kn_matches_dense() {
        let g = Grid::new(1, 6.0, 64).unwrap();
        let u = gaussian(&g, 1.5, 0.8, -0.4);
        let gk = catalog("gaussian_kdv", &SymbolParams { eps: Some(0.3), ..Default::default() }).unwrap();
        let dense = quantize_dense(&gk, &g, Quantization::Kn).unwrap().apply(&u).unwrap();
        assert!(rel(&apply_fast(&gk, &u, Quantization::Kn).unwrap(), &dense) < 1e-10);

        let general = Symbol::from_fn("general", 1, 1.0, |x, xi| {
            C64::new((1.0 + 0.5 * (-x[0] * x[0]).exp()) * xi[0] / (1.0 + xi[0] * xi[0]).sqrt(), 0.0)
        });
        let dense = quantize_dense(&general, &g, Quantization::Kn).unwrap().apply(&u).unwrap();
        assert!(rel(&apply_fast(&general, &u, Quantization::Kn).unwrap(), &dense) < 1e-10);

        let airy = catalog("airy", &SymbolParams::default()).unwrap();
        let dense = quantize_dense(&airy, &g, Quantization::Kn).unwrap().apply(&u).unwrap();
        assert!(rel(&apply_fast(&airy, &u, Quantization::Kn).unwrap(), &dense) < 1e-10);
        let pointwise = Symbol::multiplication(1, CoefFn::gauss(2.0, 1.0));
        let v = apply_fast(&pointwise, &u, Quantization::Weyl).unwrap();
        for j in 0..64 {
            let x = g.node(j);
            assert!((v.values[j] - 2.0 * (-x * x).exp() * u.values[j]).norm() < 1e-14);
        }
        assert!(apply_fast(&general, &u, Quantization::Weyl).is_err());
    }

    #[test]
    fn fast_weyl_matches_dense_on_localized_fields() {
        let g = Grid::new(1, 8.0, 128).unwrap();
        let gk = catalog("gaussian_kdv", &SymbolParams { eps: Some(0.5), ..Default::default() }).unwrap();
        let u = gaussian(&g, 3.0, 0.8, 0.5);
        let dense = quantize_dense(&gk, &g, Quantization::Weyl).unwrap().apply(&u).unwrap();
        let fast = WeylOperator::new(&gk, &g).unwrap().apply(&u);
        assert!(rel(&fast, &dense) < 1e-9, "{}", rel(&fast, &dense));

        let g2 = Grid::new(2, 6.0, 32).unwrap();
        let uh = catalog("ultrahyperbolic", &SymbolParams { eps: Some(0.2), ..Default::default() }).unwrap();
        let u2 = Field::from_fn(&g2, |x| C64::from_polar((-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp(), x[0]));
        let dense = quantize_dense(&uh, &g2, Quantization::Weyl).unwrap().apply(&u2).unwrap();
        let fast = WeylOperator::new(&uh, &g2).unwrap().apply(&u2);
        // dx = 0.375 leaves the coefficient products only partly resolved in 2D.
        assert!(rel(&fast, &dense) < 5e-4, "{}", rel(&fast, &dense));
    }

    #[test]
    fn canonical_commutation() {
        let c = compose_symbols(&xi_symbol(), &x_symbol(), 1).unwrap();
        for (x, xi) in [(0.3, 1.2), (-2.0, 0.5)] {
            let v = c.eval(&[x, 0.0], &[xi, 0.0]);
            assert!((v - C64::new(x * xi, -0.5)).norm() < 1e-15);
        }
        // Dense algebra: Op(xi) Op(x) - Op(x xi) = -i/2 on localized fields.
        let g = Grid::new(1, 10.0, 128).unwrap();
        let u = gaussian(&g, 1.0, 1.0, 0.0);
        let lhs = quantize_dense(&xi_symbol(), &g, Quantization::Weyl)
            .unwrap()
            .compose(&quantize_dense(&x_symbol(), &g, Quantization::Weyl).unwrap())
            .unwrap()
            .apply(&u)
            .unwrap();
        let rhs = quantize_dense(&c, &g, Quantization::Weyl).unwrap().apply(&u).unwrap();
        assert!(rel(&lhs, &rhs) < 1e-8, "{}", rel(&lhs, &rhs));
    }

    #[test]
    fn products_of_multipliers_are_pointwise() {
        let a = Symbol::xi_bracket(1, 2.0, 1.0);
        let b = Symbol::xi_bracket(1, -1.0, 3.0);
        for k in 0..4 {
            let c = compose_symbols(&a, &b, k).unwrap();
            let xi = [1.7, 0.0];
            let want = a.eval(&[0.0; 2], &xi) * b.eval(&[0.0; 2], &xi);
            assert!((c.eval(&[0.4, 0.0], &xi) - want).norm() < 1e-12);
        }
    }

    #[test]
    fn truncation_residual_decays_with_order() {
        let g = Grid::new(1, 12.0, 256).unwrap();
        let mut p = PolySymbol::new(1);
        p.push([2, 0], CoefFn::constant(1.0), true);
        let a = Symbol::from_poly("xi2", 1, 2.0, p);
        let b = Symbol::multiplication(1, CoefFn::Bracket { amp: C64::new(1.0, 0.0), power: -2.0 });
        let exact = quantize_dense(&a, &g, Quantization::Weyl)
            .unwrap()
            .compose(&quantize_dense(&b, &g, Quantization::Weyl).unwrap())
            .unwrap();
        let u = gaussian(&g, 6.0, 1.5, 0.0);
        let target = exact.apply(&u).unwrap();
        let res: Vec<f64> = (0..3)
            .map(|k| {
                let c = compose_symbols(&a, &b, k).unwrap();
                let v = quantize_dense(&c, &g, Quantization::Weyl).unwrap().apply(&u).unwrap();
                v.sub(&target).l2() / target.l2()
            })
            .collect();
        assert!(res[0] > res[1] && res[1] > res[2], "{res:?}");
        assert!(res[2] < 1e-8, "{res:?}");
    }

    #[test]
    fn composition_is_associative_for_polynomials() {
        let sys_a = catalog("gaussian_kdv", &SymbolParams { eps: Some(0.3), ..Default::default() }).unwrap();
        let b = xi_symbol();
        let c = Symbol::multiplication(1, CoefFn::gauss(1.0, 2.0));
        let left = compose_symbols(&compose_symbols(&sys_a, &b, 8).unwrap(), &c, 8).unwrap();
        let right = compose_symbols(&sys_a, &compose_symbols(&b, &c, 8).unwrap(), 8).unwrap();
        for (x, xi) in [(0.2, 1.0), (-0.9, 2.5)] {
            let (l, r) = (left.eval(&[x, 0.0], &[xi, 0.0]), right.eval(&[x, 0.0], &[xi, 0.0]));
            assert!((l - r).norm() < 1e-10 * (1.0 + l.norm()), "{l} {r}");
        }
    }

    #[test]
    fn kn_to_weyl_for_vector_fields() {
        // KN symbol a(x) xi is a o D; its Weyl symbol is a xi + (i/2) a' = a xi - (1/2) D a.
        let coef = CoefSpec::bump(1.0, 0.4).to_coef().unwrap();
        let mut p = PolySymbol::new(1);
        p.push([1, 0], coef.clone(), true);
        let kn = Symbol::from_poly("a_xi", 1, 1.0, p);
        let w = change_quantization(&kn, 1).unwrap();
        let x = 0.7f64;
        let ap = coef.d([1, 0], &[x, 0.0]);
        let want = coef.eval(&[x, 0.0]) * 2.0 + C64::new(0.0, 0.5) * ap;
        assert!((w.eval(&[x, 0.0], &[2.0, 0.0]) - want).norm() < 1e-14);

        // The operator D o a has KN symbol a xi + D a; its Weyl symbol is X + (1/2) D a.
        let mut q = PolySymbol::new(1);
        q.push([1, 0], coef.clone(), true);
        q.push(ZERO, coef.derivative([1, 0]).scaled(C64::new(0.0, -1.0)), false);
        let dkn = Symbol::from_poly("d_a", 1, 1.0, q);
        let dw = change_quantization(&dkn, 1).unwrap();
        let want = coef.eval(&[x, 0.0]) * 2.0 + C64::new(0.0, -0.5) * ap;
        assert!((dw.eval(&[x, 0.0], &[2.0, 0.0]) - want).norm() < 1e-14);

        // Dense confirmation: Op_kn(a xi) = Op^w(weyl symbol).
        let g = Grid::new(1, 8.0, 128).unwrap();
        let u = gaussian(&g, 2.0, 1.0, 0.2);
        let lhs = quantize_dense(&kn, &g, Quantization::Kn).unwrap().apply(&u).unwrap();
        let rhs = quantize_dense(&w, &g, Quantization::Weyl).unwrap().apply(&u).unwrap();
        assert!(rel(&lhs, &rhs) < 1e-9, "{}", rel(&lhs, &rhs));
    }

    #[test]
    fn kn_to_weyl_cubic_cross_check() {
        let mut p = PolySymbol::new(1);
        p.push([2, 0], CoefFn::Coord(0), true);
        let kn = Symbol::from_poly("x_xi2", 1, 2.0, p);
        let w = change_quantization(&kn, 3).unwrap();
        let g = Grid::new(1, 10.0, 128).unwrap();
        let u = gaussian(&g, 1.0, 1.0, 0.0);
        let lhs = quantize_dense(&kn, &g, Quantization::Kn).unwrap().apply(&u).unwrap();
        let rhs = quantize_dense(&w, &g, Quantization::Weyl).unwrap().apply(&u).unwrap();
        assert!(rel(&lhs, &rhs) < 1e-9, "{}", rel(&lhs, &rhs));
        let airy = catalog("airy", &SymbolParams::default()).unwrap();
        let same = change_quantization(&airy, 3).unwrap();
        assert_eq!(same.eval(&[1.0, 0.0], &[2.0, 0.0]), airy.eval(&[1.0, 0.0], &[2.0, 0.0]));
    }

    #[test]
    fn real_symbols_are_self_adjoint() {
        let g = Grid::new(1, 8.0, 64).unwrap();
        for a in [
            catalog("airy", &SymbolParams::default()).unwrap(),
            catalog("gaussian_kdv", &SymbolParams { eps: Some(0.05), ..Default::default() }).unwrap(),
            Symbol::from_fn("smooth", 1, 0.0, |x, xi| C64::new((-x[0] * x[0]).exp() / (1.0 + xi[0] * xi[0]), 0.0)),
        ] {
            let r = quantize_dense(&a, &g, Quantization::Weyl).unwrap().adjoint_residual();
            assert!(r <= 1e-10, "{}: {r}", a.name);
        }
    }

    #[test]
    fn dense_refused_when_ineligible() {
        let g = Grid::new(2, 1.0, 128).unwrap();
        let a = catalog("zk", &SymbolParams::default()).unwrap();
        assert!(matches!(quantize_dense(&a, &g, Quantization::Weyl), Err(Error::DenseIneligible(_))));
    }

    #[test]
    fn positivity_examples() {
        let g = Grid::new(1, 8.0, 64).unwrap();
        let mut p = PolySymbol::new(1);
        p.push([2, 0], CoefFn::constant(1.0), true);
        let xi2 = Symbol::from_poly("xi2", 1, 2.0, p);
        let r = positivity_diagnostic(&xi2, &g, Flavor::FeffermanPhong).unwrap();
        assert!(r.c <= 1e-10, "{r:?}");

        let br = Symbol::multiplication(1, CoefFn::Bracket { amp: C64::new(1.0, 0.0), power: -2.0 });
        let r = positivity_diagnostic(&br, &g, Flavor::SharpGarding).unwrap();
        assert!(r.c <= 1e-10, "{r:?}");

        let neg = Symbol::multiplication(1, CoefFn::constant(-1.0));
        assert!(matches!(positivity_diagnostic(&neg, &g, Flavor::SharpGarding), Err(Error::Precondition(_))));
    }

    #[test]
    fn positivity_variable_coefficient() {
        // Op^w((1 + e^{-x^2}) xi^2) = D b D - b''/4: the -b''/4 well is too shallow to beat the
        // kinetic term on the probes, so C stays below the well depth max(b'')/4 < 0.25.
        let g = Grid::new(1, 8.0, 64).unwrap();
        let mut p = PolySymbol::new(1);
        p.push([2, 0], CoefSpec::bump(1.0, 1.0).to_coef().unwrap(), true);
        let a = Symbol::from_poly("bump_xi2", 1, 2.0, p);
        let r = positivity_diagnostic(&a, &g, Flavor::FeffermanPhong).unwrap();
        assert!(r.c.is_finite() && r.c < 0.25, "{r:?}");
        assert!((0.5..=2.0).contains(&r.stability_ratio), "{r:?}");
    }

    #[test]
    fn product_terms_first_order() {
        let t = product_terms(1, 1);
        assert_eq!(t.len(), 2);
        let _ = PolyTerm { power: ZERO, coef: CoefFn::constant(0.0), principal: false };
        let _ = transform(&Field::zeros(&Grid::new(1, 1.0, 8).unwrap()));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::symbol::{catalog, SymbolParams};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn weyl_of_real_symbol_is_hermitian(eps in -0.5f64..0.5, c in -2.0f64..2.0) {
            let g = Grid::new(1, 6.0, 32).unwrap();
            let a = catalog("gaussian_kdv", &SymbolParams { eps: Some(eps), ..Default::default() }).unwrap();
            prop_assert!(quantize_dense(&a, &g, Quantization::Weyl).unwrap().adjoint_residual() <= 1e-10);
            let b = Symbol::multiplication(1, CoefFn::Gauss { amp: C64::new(1.0, 0.0), width: 1.0, center: [c, 0.0] });
            prop_assert!(quantize_dense(&b, &g, Quantization::Weyl).unwrap().adjoint_residual() <= 1e-10);
        }

        #[test]
        fn weyl_of_multiplier_matches_fft_path(s in -2.0f64..2.0) {
            let g = Grid::new(1, 5.0, 32).unwrap();
            let a = Symbol::xi_bracket(1, s, 1.0);
            let u = Field::from_fn(&g, |x| C64::new((-x[0] * x[0]).exp(), x[0].sin()));
            let d = quantize_dense(&a, &g, Quantization::Weyl).unwrap().apply(&u).unwrap();
            let m = WeylOperator::new(&a, &g).unwrap().apply(&u);
            prop_assert!(d.sub(&m).l2() <= 1e-10 * m.l2());
        }
    }
}

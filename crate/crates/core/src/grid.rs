//! Periodic box discretization with the spectral transform pair and the
//! Sobolev norms every other module measures with.
//!
//! Nodes are `x_j = -L + 2Lj/N` per axis and frequencies `xi_k = (pi/L)k`
//! with `k` in `[-N/2, N/2)`. Spectra are stored in FFT order: slot `i`
//! holds `k = i` for `i < N/2` and `k = i - N` otherwise.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;
/// A point in physical or frequency space; the second slot is unused in 1D.
pub type Point = [f64; 2];

/// Dense operators hold `N^{2n}` entries; beyond this they are refused.
pub const DENSE_LIMIT: usize = 1 << 26;

#[derive(Clone)]
pub struct Grid {
    dim: usize,
    half_width: f64,
    points: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("half_width", &self.half_width)
            .field("points", &self.points)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.points == other.points && self.half_width == other.half_width
    }
}

impl Grid {
    /// Build the lattice `[-L, L)^n` with `N` samples per axis.
    pub fn new(dim: usize, half_width: f64, points: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in {{1, 2}}")));
        }
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::InvalidGrid(format!("half-width {half_width} must be positive")));
        }
        if points % 2 != 0 {
            return Err(Error::InvalidGrid(format!("odd sample count {points}")));
        }
        if points < 8 {
            return Err(Error::InvalidGrid(format!("sample count {points} below 8")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            dim,
            half_width,
            points,
            fwd: planner.plan_fft_forward(points),
            inv: planner.plan_fft_inverse(points),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Samples per axis.
    pub fn points(&self) -> usize {
        self.points
    }

    /// Total number of unknowns, `N^n`.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    /// Cell volume `dx^n`.
    pub fn cell(&self) -> f64 {
        self.dx().powi(self.dim as i32)
    }

    pub fn dense_eligible(&self) -> bool {
        self.len().saturating_mul(self.len()) <= DENSE_LIMIT
    }

    /// Largest resolved frequency magnitude, `N pi / (2L)`.
    pub fn xi_max(&self) -> f64 {
        self.points as f64 * std::f64::consts::PI / (2.0 * self.half_width)
    }

    pub fn node(&self, j: usize) -> f64 {
        -self.half_width + self.dx() * j as f64
    }

    /// Signed integer frequency stored in FFT slot `i`.
    pub fn wavenumber(&self, i: usize) -> i64 {
        let n = self.points as i64;
        let i = i as i64;
        if i < n / 2 {
            i
        } else {
            i - n
        }
    }

    pub fn freq(&self, i: usize) -> f64 {
        self.wavenumber(i) as f64 * std::f64::consts::PI / self.half_width
    }

    pub fn is_nyquist(&self, i: usize) -> bool {
        i == self.points / 2
    }

    /// Per-axis indices of a flat index (axis 0 varies slowest).
    pub fn split(&self, idx: usize) -> [usize; 2] {
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx / self.points, idx % self.points]
        }
    }

    pub fn point(&self, idx: usize) -> Point {
        let [a, b] = self.split(idx);
        if self.dim == 1 {
            [self.node(a), 0.0]
        } else {
            [self.node(a), self.node(b)]
        }
    }

    pub fn wavevector(&self, idx: usize) -> Point {
        let [a, b] = self.split(idx);
        if self.dim == 1 {
            [self.freq(a), 0.0]
        } else {
            [self.freq(a), self.freq(b)]
        }
    }

    /// True when any axis of the flat spectral index sits on the Nyquist mode.
    pub fn touches_nyquist(&self, idx: usize) -> bool {
        let [a, b] = self.split(idx);
        self.is_nyquist(a) || (self.dim == 2 && self.is_nyquist(b))
    }

    pub fn points_iter(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    fn fft(&self, data: &mut [C64], forward: bool) {
        let plan = if forward { &self.fwd } else { &self.inv };
        let n = self.points;
        if self.dim == 1 {
            plan.process(data);
            return;
        }
        for row in data.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![C64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            plan.process(&mut col);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
    }

    /// Unnormalized forward FFT in place.
    pub fn fft_forward(&self, data: &mut [C64]) {
        self.fft(data, true);
    }

    /// Inverse FFT in place, normalized so that it undoes [`Grid::fft_forward`].
    pub fn fft_inverse(&self, data: &mut [C64]) {
        self.fft(data, false);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// `(-1)^k` factor linking FFT output to the box-centred transform.
    fn parity(&self, idx: usize) -> f64 {
        let [a, b] = self.split(idx);
        let k = self.wavenumber(a) + if self.dim == 2 { self.wavenumber(b) } else { 0 };
        if k.rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        }
    }

    fn check(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Complex samples on the nodes.
#[derive(Clone, Debug)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<C64>,
}

/// Coefficients in FFT order under the box-centred normalization.
#[derive(Clone, Debug)]
pub struct SpectralField {
    pub grid: Grid,
    pub coeffs: Vec<C64>,
}

impl Field {
    pub fn zeros(grid: &Grid) -> Self {
        Self { grid: grid.clone(), values: vec![C64::new(0.0, 0.0); grid.len()] }
    }

    pub fn from_values(grid: &Grid, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> C64) -> Self {
        let values = grid.points_iter().map(f).collect();
        Self { grid: grid.clone(), values }
    }

    /// `dx^n sum |u|^2`.
    pub fn l2_sq(&self) -> f64 {
        self.grid.cell() * self.values.iter().map(|v| v.norm_sqr()).sum::<f64>()
    }

    pub fn l2(&self) -> f64 {
        self.l2_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn axpy(&mut self, a: C64, other: &Field) {
        for (u, v) in self.values.iter_mut().zip(&other.values) {
            *u += a * v;
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Field { grid: self.grid.clone(), values }
    }

    pub fn scale(&self, a: C64) -> Field {
        Field { grid: self.grid.clone(), values: self.values.iter().map(|v| v * a).collect() }
    }

    /// Fraction of the L2 mass outside the ball `|x| <= r`.
    pub fn tail_fraction(&self, r: f64) -> f64 {
        let total: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let outside: f64 = self
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| norm(&self.grid.point(*i)) > r)
            .map(|(_, v)| v.norm_sqr())
            .sum();
        outside / total
    }

    /// Smallest radius holding all but `tail` of the mass.
    pub fn support_radius(&self, tail: f64) -> f64 {
        let mut pts: Vec<(f64, f64)> = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (norm(&self.grid.point(i)), v.norm_sqr()))
            .collect();
        let total: f64 = pts.iter().map(|p| p.1).sum();
        if total == 0.0 {
            return 0.0;
        }
        pts.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut acc = 0.0;
        for (r, m) in pts {
            acc += m;
            if acc > tail * total {
                return r;
            }
        }
        0.0
    }
}

pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).sqrt()
}

/// Japanese bracket `(1 + |p|^2)^{1/2}`.
pub fn bracket(p: &Point) -> f64 {
    (1.0 + p[0] * p[0] + p[1] * p[1]).sqrt()
}

/// `u_hat(xi_k) = (2L/N)^n sum_j u(x_j) e^{-i x_j xi_k}`.
pub fn transform(u: &Field) -> SpectralField {
    let g = &u.grid;
    let mut data = u.values.clone();
    g.fft_forward(&mut data);
    let scale = g.cell();
    for (i, v) in data.iter_mut().enumerate() {
        *v *= scale * g.parity(i);
    }
    SpectralField { grid: g.clone(), coeffs: data }
}

/// `u(x_j) = (2L)^{-n} sum_k u_hat(xi_k) e^{i x_j xi_k}`.
pub fn inverse(uh: &SpectralField) -> Field {
    let g = &uh.grid;
    let mut data: Vec<C64> =
        uh.coeffs.iter().enumerate().map(|(i, v)| v * g.parity(i)).collect();
    g.fft_inverse(&mut data);
    let scale = 1.0 / g.cell();
    for v in data.iter_mut() {
        *v *= scale;
    }
    Field { grid: g.clone(), values: data }
}

impl SpectralField {
    pub fn sobolev_norm_sq(&self, s: f64) -> f64 {
        let g = &self.grid;
        let vol = (2.0 * g.half_width()).powi(g.dim() as i32);
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| bracket(&g.wavevector(i)).powf(2.0 * s) * c.norm_sqr())
            .sum::<f64>()
            / vol
    }
}

/// Apply a Fourier multiplier given per flat spectral index.
pub fn apply_multiplier(u: &Field, m: impl Fn(usize) -> C64) -> Field {
    let g = &u.grid;
    let mut data = u.values.clone();
    g.fft_forward(&mut data);
    for (i, v) in data.iter_mut().enumerate() {
        *v *= m(i);
    }
    g.fft_inverse(&mut data);
    Field { grid: g.clone(), values: data }
}

/// `Lambda^s u` with multiplier `<xi>^s` (even order, so no Nyquist masking).
pub fn apply_bessel(u: &Field, s: f64) -> Field {
    if s == 0.0 {
        return u.clone();
    }
    let g = u.grid.clone();
    apply_multiplier(u, |i| C64::new(bracket(&g.wavevector(i)).powf(s), 0.0))
}

/// `||u||_s`.
pub fn sobolev_norm(u: &Field, s: f64) -> f64 {
    sobolev_norm_sq(u, s).sqrt()
}

pub fn sobolev_norm_sq(u: &Field, s: f64) -> f64 {
    transform(u).sobolev_norm_sq(s)
}

/// `dx^n sum_j lambda(|x_j|) |Lambda^s u(x_j)|^2`.
pub fn weighted_pairing(u: &Field, lambda: impl Fn(f64) -> f64, s: f64) -> f64 {
    let v = apply_bessel(u, s);
    let g = &u.grid;
    g.cell()
        * v.values
            .iter()
            .enumerate()
            .map(|(i, w)| lambda(norm(&g.point(i))) * w.norm_sqr())
            .sum::<f64>()
}

/// Inner product `dx^n sum u conj(v)`.
pub fn inner(u: &Field, v: &Field) -> Result<C64> {
    u.grid.check(&v.grid)?;
    Ok(u.values.iter().zip(&v.values).map(|(a, b)| a * b.conj()).sum::<C64>() * u.grid.cell())
}

//! Bicharacteristic flows of principal symbols: integration, escape probes
//! and the growth of `q_delta` along strongly elliptic curves.
//!
//! Integration runs in unbounded phase space, independent of any grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{norm, Point};
use crate::symbol::{unit, Symbol, ZERO};

/// Integration halts once `|xi|` drops below this.
pub const XI_FLOOR: f64 = 1e-6;
/// Time resolution of escape detection.
pub const ESCAPE_TOL: f64 = 1e-8;

/// `(dx/dt, dxi/dt) = (grad_xi a, -grad_x a)` for `Re a`.
pub fn hamiltonian_field(a: &Symbol, x: &Point, xi: &Point) -> (Point, Point) {
    let gx = a.grad_xi(x, xi);
    let gp = a.grad_x(x, xi);
    ([gx[0].re, gx[1].re], [-gp[0].re, -gp[1].re])
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhasePoint {
    pub t: f64,
    pub x: Point,
    pub xi: Point,
    /// `a_m(x, xi)`.
    pub am: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    /// Samples ordered by time, covering `[-T, T]` unless truncated.
    pub samples: Vec<PhasePoint>,
    pub h: f64,
    pub integrator: String,
    /// `max |a_m(t) - a_m(0)|`.
    pub drift: f64,
    pub xi_min: f64,
    pub xi_max: f64,
    /// Set when `|xi|` fell below the floor in either direction.
    pub truncated: bool,
}

impl Trajectory {
    pub fn start(&self) -> &PhasePoint {
        self.samples.iter().find(|p| p.t == 0.0).expect("trajectory contains t = 0")
    }

    /// Samples with `t >= 0`.
    pub fn forward(&self) -> impl Iterator<Item = &PhasePoint> {
        self.samples.iter().filter(|p| p.t >= 0.0)
    }

    pub fn end(&self) -> &PhasePoint {
        self.samples.last().expect("nonempty trajectory")
    }
}

type State = [f64; 4];

fn pack(x: &Point, xi: &Point) -> State {
    [x[0], x[1], xi[0], xi[1]]
}

fn field(a: &Symbol, s: &State, dir: f64) -> State {
    let (dx, dxi) = hamiltonian_field(a, &[s[0], s[1]], &[s[2], s[3]]);
    [dir * dx[0], dir * dx[1], dir * dxi[0], dir * dxi[1]]
}

fn rk4(a: &Symbol, s: &State, h: f64, dir: f64) -> State {
    let add = |u: &State, k: &State, c: f64| -> State { [u[0] + c * k[0], u[1] + c * k[1], u[2] + c * k[2], u[3] + c * k[3]] };
    let k1 = field(a, s, dir);
    let k2 = field(a, &add(s, &k1, h / 2.0), dir);
    let k3 = field(a, &add(s, &k2, h / 2.0), dir);
    let k4 = field(a, &add(s, &k3, h), dir);
    let mut out = *s;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn xnorm(s: &State) -> f64 {
    (s[0] * s[0] + s[1] * s[1]).sqrt()
}

fn xinorm(s: &State) -> f64 {
    (s[2] * s[2] + s[3] * s[3]).sqrt()
}

fn check_start(xi0: &Point, h: f64, t: f64) -> Result<()> {
    if norm(xi0) <= 0.0 {
        return Err(Error::Precondition("initial frequency must be nonzero".into()));
    }
    if !(h > 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidParam(format!("step {h} and horizon {t} must be positive")));
    }
    Ok(())
}

/// One direction of the flow; returns samples (excluding `t = 0`) and a truncation flag.
fn sweep(a: &Symbol, start: State, horizon: f64, h: f64, dir: f64) -> (Vec<(f64, State)>, bool) {
    let steps = (horizon / h).ceil() as usize;
    if steps == 0 {
        return (Vec::new(), false);
    }
    let dt = horizon / steps as f64;
    let mut s = start;
    let mut out = Vec::with_capacity(steps);
    for i in 1..=steps {
        s = rk4(a, &s, dt, dir);
        if xinorm(&s) < XI_FLOOR || s.iter().any(|v| !v.is_finite()) {
            return (out, true);
        }
        out.push((dir * dt * i as f64, s));
    }
    (out, false)
}

/// Classical RK4 on `[-T, T]` with step close to `h` dividing `T`.
pub fn integrate_bicharacteristic(a_m: &Symbol, x0: &Point, xi0: &Point, horizon: f64, h: f64) -> Result<Trajectory> {
    check_start(xi0, h, horizon)?;
    let start = pack(x0, xi0);
    let (back, tb) = sweep(a_m, start, horizon, h, -1.0);
    let (fwd, tf) = sweep(a_m, start, horizon, h, 1.0);
    let am0 = a_m.eval(x0, xi0).re;
    let mk = |t: f64, s: &State| PhasePoint {
        t,
        x: [s[0], s[1]],
        xi: [s[2], s[3]],
        am: a_m.eval(&[s[0], s[1]], &[s[2], s[3]]).re,
    };
    let mut samples: Vec<PhasePoint> = back.iter().rev().map(|(t, s)| mk(*t, s)).collect();
    samples.push(mk(0.0, &start));
    samples.extend(fwd.iter().map(|(t, s)| mk(*t, s)));
    let drift = samples.iter().map(|p| (p.am - am0).abs()).fold(0.0, f64::max);
    let xin: Vec<f64> = samples.iter().map(|p| norm(&p.xi)).collect();
    Ok(Trajectory {
        h: if horizon > 0.0 { horizon / (horizon / h).ceil() } else { h },
        integrator: "rk4".into(),
        drift,
        xi_min: xin.iter().cloned().fold(f64::INFINITY, f64::min),
        xi_max: xin.iter().cloned().fold(0.0, f64::max),
        truncated: tb || tf,
        samples,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrongEllipticity {
    pub strongly_elliptic: bool,
    /// Smallest `C` with `|xi|^m / C <= |a_m| <= C |xi|^m` along the samples.
    pub c: f64,
}

/// Strong ellipticity along a trajectory starting on the co-sphere `a_m = 1`.
pub fn classify_strong_ellipticity(a_m: &Symbol, traj: &Trajectory) -> Result<StrongEllipticity> {
    let s0 = traj.start();
    if (s0.am - 1.0).abs() > 1e-6 {
        return Err(Error::Precondition(format!(
            "start ({:?}, {:?}) is off the elliptic co-sphere: a_m = {}",
            s0.x, s0.xi, s0.am
        )));
    }
    let m = a_m.order;
    let c = traj
        .samples
        .iter()
        .map(|p| {
            let r = norm(&p.xi).powf(m);
            let v = p.am.abs();
            if v == 0.0 {
                f64::INFINITY
            } else {
                (r / v).max(v / r)
            }
        })
        .fold(1.0, f64::max);
    Ok(StrongEllipticity { strongly_elliptic: c.is_finite(), c })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrappingClass {
    ForwardNontrapped,
    BackwardNontrapped,
    NontrappedBoth,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrappingVerdict {
    pub forward_escape_time: Option<f64>,
    /// Negative time of the first backward exit.
    pub backward_escape_time: Option<f64>,
    pub radius: f64,
    pub horizon: f64,
    /// Set when the flow reached the `|xi|` floor before escaping.
    pub truncated: bool,
    pub verdict: TrappingClass,
}

/// First exit time of `|x| >= R` within `[0, T]`, refined by bisection on a partial step.
fn escape(a: &Symbol, start: State, radius: f64, horizon: f64, h: f64, dir: f64) -> (Option<f64>, bool) {
    if xnorm(&start) >= radius {
        return (Some(0.0), false);
    }
    let steps = (horizon / h).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let mut s = start;
    for i in 0..steps {
        let next = rk4(a, &s, dt, dir);
        if xinorm(&next) < XI_FLOOR || next.iter().any(|v| !v.is_finite()) {
            return (None, true);
        }
        if xnorm(&next) >= radius {
            let (r0, r1) = (xnorm(&s), xnorm(&next));
            let guess = dt * (radius - r0) / (r1 - r0);
            let (mut lo, mut hi) = (0.0, dt);
            let mut tau = guess.clamp(0.0, dt);
            while hi - lo > ESCAPE_TOL {
                if xnorm(&rk4(a, &s, tau, dir)) >= radius {
                    hi = tau;
                } else {
                    lo = tau;
                }
                tau = 0.5 * (lo + hi);
            }
            return (Some(dt * i as f64 + 0.5 * (lo + hi)), false);
        }
        s = next;
    }
    (None, false)
}

/// Escape certificates in both time directions; never asserts trapping.
pub fn trapping_probe(a_m: &Symbol, x0: &Point, xi0: &Point, radius: f64, horizon: f64, h: f64) -> Result<TrappingVerdict> {
    check_start(xi0, h, horizon)?;
    if !(radius > 0.0) {
        return Err(Error::InvalidParam(format!("radius {radius} must be positive")));
    }
    let start = pack(x0, xi0);
    let (f, tf) = escape(a_m, start, radius, horizon, h, 1.0);
    let (b, tb) = escape(a_m, start, radius, horizon, h, -1.0);
    let verdict = match (f, b) {
        (Some(_), Some(_)) => TrappingClass::NontrappedBoth,
        (Some(_), None) => TrappingClass::ForwardNontrapped,
        (None, Some(_)) => TrappingClass::BackwardNontrapped,
        (None, None) => TrappingClass::Inconclusive,
    };
    Ok(TrappingVerdict {
        forward_escape_time: f,
        backward_escape_time: b.map(|t| -t),
        radius,
        horizon,
        truncated: tf || tb,
        verdict,
    })
}

/// `q_delta = <xi>_delta^{-(m-1)} sum_j x_j d_{xi_j} a_m`, `<xi>_delta = (delta + |xi|^2)^{1/2}`.
pub fn q_delta(a_m: &Symbol, delta: f64, x: &Point, xi: &Point) -> f64 {
    let w = (delta + xi[0] * xi[0] + xi[1] * xi[1]).powf(-(a_m.order - 1.0) / 2.0);
    let g = a_m.grad_xi(x, xi);
    w * (0..a_m.dim).map(|j| x[j] * g[j].re).sum::<f64>()
}

/// `H_{a_m} q_delta` from first and second derivatives of `a_m`.
pub fn hamilton_q_delta(a_m: &Symbol, delta: f64, x: &Point, xi: &Point) -> f64 {
    let n = a_m.dim;
    let m = a_m.order;
    let b2 = delta + xi[0] * xi[0] + xi[1] * xi[1];
    let w = b2.powf(-(m - 1.0) / 2.0);
    let dw = |k: usize| -(m - 1.0) * xi[k] * b2.powf(-(m + 1.0) / 2.0);
    let ga = a_m.grad_xi(x, xi);
    let gx = a_m.grad_x(x, xi);
    let s: f64 = (0..n).map(|j| x[j] * ga[j].re).sum();
    let mut h = 0.0;
    for k in 0..n {
        // d_{x_k} q = w (d_{xi_k} a + sum_j x_j d_{x_k} d_{xi_j} a)
        let mut dqx = ga[k].re;
        let mut dqxi = dw(k) * s;
        for j in 0..n {
            let mut al = unit(j);
            dqx += x[j] * a_m.deriv(al, unit(k), x, xi).re;
            al[k] += 1;
            dqxi += w * x[j] * a_m.deriv(al, ZERO, x, xi).re;
        }
        h += ga[k].re * w * dqx - gx[k].re * dqxi;
    }
    h
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QDeltaReport {
    pub delta: f64,
    pub q_start: f64,
    pub q_end: f64,
    /// Simpson quadrature of `H q_delta` over the forward samples.
    pub integral: f64,
    /// `|q_end - q_start - integral| / |q_end - q_start|`.
    pub identity_error: f64,
    /// Largest `mu` with `q(t) >= q(0) + mu t` on the forward samples.
    pub mu: f64,
}

fn simpson(h: f64, f: &[f64]) -> f64 {
    let n = f.len() - 1;
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return 0.5 * h * (f[0] + f[1]);
    }
    let even = if n % 2 == 0 { n } else { n - 3 };
    let mut acc = 0.0;
    for i in (0..even).step_by(2) {
        acc += h / 3.0 * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
    }
    if even < n {
        let i = even;
        acc += 3.0 * h / 8.0 * (f[i] + 3.0 * f[i + 1] + 3.0 * f[i + 2] + f[i + 3]);
    }
    acc
}

pub fn qdelta_monotonicity(a_m: &Symbol, traj: &Trajectory, delta: f64) -> Result<QDeltaReport> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParam(format!("delta {delta} not in (0, 1]")));
    }
    let fwd: Vec<&PhasePoint> = traj.forward().collect();
    let q: Vec<f64> = fwd.iter().map(|p| q_delta(a_m, delta, &p.x, &p.xi)).collect();
    let hq: Vec<f64> = fwd.iter().map(|p| hamilton_q_delta(a_m, delta, &p.x, &p.xi)).collect();
    let integral = simpson(traj.h, &hq);
    let (q0, q1) = (q[0], *q.last().unwrap());
    let diff = q1 - q0;
    let identity_error = (diff - integral).abs() / diff.abs().max(f64::MIN_POSITIVE);
    let mu = fwd.iter().zip(&q).skip(1).map(|(p, v)| (v - q0) / p.t).fold(f64::INFINITY, f64::min);
    Ok(QDeltaReport { delta, q_start: q0, q_end: q1, integral, identity_error, mu })
}

/// Start on the co-sphere of `(1 + eps e^{-x^2}) xi^3` at `x0`.
pub fn cosphere_start_1d(a_m: &Symbol, x0: f64) -> Point {
    let c = a_m.eval(&[x0, 0.0], &[1.0, 0.0]).re;
    [c.powf(-1.0 / a_m.order), 0.0]
}

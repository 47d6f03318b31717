//! One runner per experiment kind. Runners return verdicts, a JSON result and
//! optional CSV series; errors surface as runtime failures.

use std::collections::BTreeMap;

use anyhow::{anyhow, Context, Result};
use psido::appendix_checks::{lemmatec1_residual, poly_symbol, standard_scan};
use psido::calculus::positivity_diagnostic;
use psido::evolve::{default_dt, smoothing_family, solve_linear, wavepacket, SolveOptions, Source};
use psido::hamilton::{classify_strong_ellipticity, integrate_bicharacteristic, qdelta_monotonicity, trapping_probe, TrappingClass};
use psido::nonlinear::{picard_solve, PicardOptions};
use psido::symbol::{build_kdv_type, catalog, CoefFn, SampleSet, VectorFieldSystem, ZERO};
use psido::weights::{check_admissible, doi_slack, doi_weight, garding_weight, WeightFn};
use psido::{Error, Grid, Point, Symbol, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Kind};

/// Tabular output written next to the report.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Series {
    fn new(name: &str, headers: &[&str]) -> Self {
        Self { name: name.into(), headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug)]
pub struct Outcome {
    pub verdicts: BTreeMap<String, Verdict>,
    pub result: Value,
    pub series: Vec<Series>,
}

impl Outcome {
    pub fn verdict(&self) -> Verdict {
        self.verdicts.values().fold(Verdict::Pass, |acc, v| acc.and(*v))
    }
}

fn pass_if(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn grid(cfg: &ExperimentConfig) -> Result<Grid> {
    let g = cfg.grid.ok_or_else(|| anyhow!("missing grid"))?;
    Ok(Grid::new(g.dim, g.half_width, g.points)?)
}

fn symbol(cfg: &ExperimentConfig) -> Result<Symbol> {
    let spec = cfg.symbol.as_ref().ok_or_else(|| anyhow!("missing symbol"))?;
    Ok(catalog(&spec.name, &spec.params)?)
}

fn lambda(cfg: &ExperimentConfig) -> Result<WeightFn> {
    Ok(WeightFn::new(cfg.weight.n_w)?)
}

fn point(v: &[f64], what: &str) -> Result<Point> {
    match v {
        [a] => Ok([*a, 0.0]),
        [a, b] => Ok([*a, *b]),
        _ => Err(anyhow!("`{what}` needs one or two coordinates")),
    }
}

/// Standard lattice plus `random_points` seeded positions in the box.
fn samples(cfg: &ExperimentConfig, g: &Grid, seed: u64) -> SampleSet {
    let mut s = SampleSet::standard(g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.run.random_points {
        let mut x = [0.0; 2];
        for c in x.iter_mut().take(g.dim()) {
            *c = rng.random_range(-s.x_half..=s.x_half);
        }
        s.xs.push(x);
    }
    s
}

fn describe(a: &Symbol) -> Value {
    json!({ "name": a.name, "dim": a.dim, "order": a.order, "real_valued": a.real_valued })
}

pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    match cfg.kind {
        Kind::CheckAdmissible => check_admissible_run(cfg, seed),
        Kind::DoiWeight => doi_run(cfg, seed),
        Kind::TraceBichar => trace_run(cfg),
        Kind::SolveLinear => linear_run(cfg),
        Kind::SmoothingReport => smoothing_run(cfg),
        Kind::SolveNlivp => nlivp_run(cfg),
        Kind::Positivity => positivity_run(cfg),
        Kind::Appendix => appendix_run(cfg),
        Kind::KdvTypeBuild => kdv_run(cfg, seed),
    }
}

fn check_admissible_run(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let (a, g) = (symbol(cfg)?, grid(cfg)?);
    let s = samples(cfg, &g, seed);
    let rep = check_admissible(&a, &lambda(cfg)?, &s, cfg.run.max_order, &cfg.thresholds, cfg.weight.c1)?;
    let mut verdicts: BTreeMap<String, Verdict> =
        rep.conditions.iter().map(|c| (c.condition.clone(), c.verdict)).collect();
    verdicts.insert("hamilton".into(), rep.hamilton.as_ref().map_or(Verdict::Fail, |h| h.verdict));
    let ellipticity = &rep.conditions[0].constants;
    Ok(Outcome {
        verdicts,
        result: json!({
            "symbol": describe(&a),
            "c_lower": ellipticity["c_lower"],
            "c_upper": ellipticity["c_upper"],
            "conditions": rep.conditions,
            "hamilton": rep.hamilton,
            "verdict": rep.verdict,
        }),
        series: Vec::new(),
    })
}

fn doi_run(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let (a, g) = (symbol(cfg)?, grid(cfg)?);
    let s = samples(cfg, &g, seed);
    let lam = lambda(cfg)?;
    let ell = psido::symbol::check_grad_ellipticity(&a, &s, &cfg.thresholds);
    let q = garding_weight(&a, &ell, cfg.weight.c1)?;
    let p = doi_weight(&q, lam, cfg.weight.eps, &s)?;
    let (rep, surface) = doi_slack(&a, &p, &lam, &s);
    let nodes: Vec<f64> = (0..400).map(|i| i as f64 * p.params.k * 0.1).collect();
    let f_slack = p.f_slack(&nodes);
    let mut series = Series::new("slack", &["x1", "x2", "xi1", "xi2", "slack"]);
    for pt in &surface {
        series.push(vec![num(pt.x[0]), num(pt.x[1]), num(pt.xi[0]), num(pt.xi[1]), num(pt.slack)]);
    }
    let verdicts = BTreeMap::from([("doi_slack".to_string(), rep.verdict), ("f_prime".to_string(), pass_if(f_slack > -1e-6))]);
    Ok(Outcome {
        verdicts,
        result: json!({ "symbol": describe(&a), "slack": rep, "k": p.params.k, "eps": p.params.eps, "f_slack": f_slack }),
        series: vec![series],
    })
}

fn trace_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let a = symbol(cfg)?;
    let am = a.parts().map(|(p, _)| p.clone()).unwrap_or(a);
    let r = &cfg.run;
    let (x0, xi0) = (point(&r.x0, "x0")?, point(&r.xi0, "xi0")?);
    let traj = integrate_bicharacteristic(&am, &x0, &xi0, r.horizon, r.h)?;
    let trap = trapping_probe(&am, &x0, &xi0, r.radius, r.horizon, r.h)?;
    let mut verdicts = BTreeMap::new();
    verdicts.insert(
        "nontrapping".to_string(),
        if trap.verdict == TrappingClass::NontrappedBoth { Verdict::Pass } else { Verdict::Inconclusive },
    );
    let mut growth = Value::Null;
    if (am.eval(&x0, &xi0).re - 1.0).abs() <= 1e-6 {
        let ell = classify_strong_ellipticity(&am, &traj)?;
        let q = qdelta_monotonicity(&am, &traj, r.delta)?;
        verdicts.insert("qdelta_growth".to_string(), pass_if(q.mu > 0.0 && q.identity_error <= 1e-6));
        growth = json!({ "strong_ellipticity": ell, "qdelta": q });
    }
    let mut series = Series::new("trajectory", &["t", "x1", "x2", "xi1", "xi2", "am"]);
    for p in &traj.samples {
        series.push(vec![num(p.t), num(p.x[0]), num(p.x[1]), num(p.xi[0]), num(p.xi[1]), num(p.am)]);
    }
    Ok(Outcome {
        verdicts,
        result: json!({
            "symbol": describe(&am),
            "drift": traj.drift,
            "xi_min": traj.xi_min,
            "xi_max": traj.xi_max,
            "truncated": traj.truncated,
            "trapping": trap,
            "growth": growth,
        }),
        series: vec![series],
    })
}

fn t_end(cfg: &ExperimentConfig) -> Result<f64> {
    cfg.run.t_end.ok_or_else(|| anyhow!("`run.t_end` is required for kind `{}`", cfg.kind.name()))
}

fn datum(cfg: &ExperimentConfig, g: &Grid) -> psido::Field {
    wavepacket(g, cfg.run.k, cfg.run.sigma).scale(psido::C64::new(cfg.run.amplitude, 0.0))
}

fn linear_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (a, g) = (symbol(cfg)?, grid(cfg)?);
    let u0 = datum(cfg, &g);
    let t = t_end(cfg)?;
    let dt = match cfg.run.dt {
        Some(dt) => dt,
        None => default_dt(&a, &u0, t, cfg.run.scheme)?,
    };
    let opts = SolveOptions { scheme: cfg.run.scheme, ..Default::default() };
    let sol = solve_linear(&a, &u0, &Source::Zero, t, dt, opts)?;
    let drift = sol.l2_drift();
    let mut series = Series::new("norms", &["t", "l2", "hs"]);
    for ((t, l2), (_, hs)) in sol.norm_series(0.0).into_iter().zip(sol.norm_series(cfg.run.s)) {
        series.push(vec![num(t), num(l2), num(hs)]);
    }
    let verdict = if a.real_valued { pass_if(drift <= cfg.run.tol) } else { Verdict::Pass };
    Ok(Outcome {
        verdicts: BTreeMap::from([("l2_conservation".to_string(), verdict)]),
        result: json!({
            "symbol": describe(&a),
            "scheme": sol.scheme,
            "dt": sol.dt,
            "steps": sol.times.len() - 1,
            "l2_drift": drift,
            "horizon": sol.horizon,
        }),
        series: vec![series],
    })
}

fn smoothing_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (a, g) = (symbol(cfg)?, grid(cfg)?);
    let r = &cfg.run;
    let summary = smoothing_family(&a, &g, &r.ks, r.sigma, r.s, &lambda(cfg)?, &r.estimates, r.scheme)?;
    let mut verdicts = BTreeMap::new();
    for (est, spread) in &summary.spread {
        let key = format!("spread_{}", serde_json::to_value(est)?.as_str().unwrap_or("?"));
        verdicts.insert(key, pass_if(spread.is_finite() && *spread <= r.spread_bound));
    }
    let mut series = Series::new("family", &["k", "estimate", "lhs", "rhs", "ratio", "unweighted"]);
    for run in &summary.runs {
        for rep in &run.reports {
            let est = serde_json::to_value(rep.estimate)?.as_str().unwrap_or("?").to_string();
            series.push(vec![num(run.k), est, num(rep.lhs), num(rep.rhs), num(rep.ratio), num(rep.unweighted)]);
        }
    }
    Ok(Outcome { verdicts, result: json!({ "symbol": describe(&a), "family": summary }), series: vec![series] })
}

fn nlivp_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (a, g) = (symbol(cfg)?, grid(cfg)?);
    let r = &cfg.run;
    let u0 = datum(cfg, &g);
    let opts = PicardOptions { dt: r.dt, tol: r.tol, max_iter: r.max_iter, n_w: cfg.weight.n_w, frozen: r.frozen };
    match picard_solve(&a, &u0, &r.nonlinearity, r.s, t_end(cfg)?, opts) {
        Ok(run) => {
            let mut series = Series::new("picard", &["iteration", "norm", "step", "rho"]);
            for it in &run.history {
                series.push(vec![it.iteration.to_string(), num(it.norm), num(it.step), it.rho.map(num).unwrap_or_default()]);
            }
            let verdicts = BTreeMap::from([
                ("converged".to_string(), pass_if(run.converged)),
                ("contraction".to_string(), pass_if(run.max_rho() < 0.5)),
            ]);
            Ok(Outcome {
                verdicts,
                result: json!({
                    "symbol": describe(&a),
                    "converged": run.converged,
                    "iterations": run.history.len(),
                    "max_rho": run.max_rho(),
                    "dt": run.dt,
                    "residual": run.residual,
                    "relative_residual": run.relative_residual,
                    "xts_norm": run.norm,
                    "warnings": run.warnings,
                }),
                series: vec![series],
            })
        }
        Err(Error::Divergence { iterations, last_ratio }) => Ok(Outcome {
            verdicts: BTreeMap::from([("converged".to_string(), Verdict::Fail)]),
            result: json!({
                "symbol": describe(&a),
                "diverged": { "iterations": iterations, "last_ratio": last_ratio },
                "hint": "shorten the horizon or reduce the datum",
            }),
            series: Vec::new(),
        }),
        Err(e) => Err(e.into()),
    }
}

fn positivity_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (a, g) = (symbol(cfg)?, grid(cfg)?);
    let rep = positivity_diagnostic(&a, &g, cfg.run.flavor)?;
    let stable = rep.c <= 1e-10 || (0.5..=2.0).contains(&rep.stability_ratio);
    let verdicts = BTreeMap::from([(
        "refinement_stable".to_string(),
        if !rep.c.is_finite() { Verdict::Fail } else if stable { Verdict::Pass } else { Verdict::Inconclusive },
    )]);
    Ok(Outcome { verdicts, result: json!({ "symbol": describe(&a), "report": rep }), series: Vec::new() })
}

fn appendix_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let g = grid(cfg)?;
    let dim = g.dim();
    let mut xi = ZERO;
    xi[0] = 1;
    let symbols = match &cfg.symbol {
        Some(_) => vec![symbol(cfg)?],
        None => {
            let (mut sq, mut cube) = (ZERO, ZERO);
            sq[0] = 2;
            cube[0] = 3;
            vec![
                poly_symbol(dim, &[(xi, CoefFn::constant(1.0))]).named("xi"),
                poly_symbol(dim, &[(sq, CoefFn::constant(1.0))]).named("xi^2"),
                poly_symbol(
                    dim,
                    &[(cube, CoefFn::gauss(0.3, 1.0)), (cube, CoefFn::constant(1.0)), (xi, CoefFn::constant(-2.0)), (ZERO, CoefFn::constant(0.5))],
                )
                .named("cubic"),
            ]
        }
    };
    let mut residuals = Vec::new();
    let mut worst = 0.0f64;
    for p in &symbols {
        for &n_w in &cfg.run.n_ws {
            let r = lemmatec1_residual(p, n_w, &g).with_context(|| format!("commutator check for `{}`", p.name))?;
            worst = worst.max(r.residual);
            residuals.push(json!({ "symbol": p.name, "n_w": n_w, "residual": r.residual, "tail": r.tail }));
        }
    }
    let scan = standard_scan(&cfg.run.orders)?;
    let verdicts = BTreeMap::from([
        ("commutator_residual".to_string(), pass_if(worst <= 1e-10)),
        ("delta_bracket_scan".to_string(), pass_if(scan.passed)),
    ]);
    Ok(Outcome { verdicts, result: json!({ "residuals": residuals, "worst_residual": worst, "scan": scan }), series: Vec::new() })
}

fn kdv_run(cfg: &ExperimentConfig, seed: u64) -> Result<Outcome> {
    let g = grid(cfg)?;
    let specs = cfg.system.as_ref().ok_or_else(|| anyhow!("missing system"))?;
    let sys = VectorFieldSystem::from_specs(specs)?;
    if sys.dim != g.dim() {
        return Err(anyhow!("system dimension {} does not match grid dimension {}", sys.dim, g.dim()));
    }
    let s = samples(cfg, &g, seed);
    let built = build_kdv_type(&sys, &s)?;
    let adm = check_admissible(&built.full, &lambda(cfg)?, &s, cfg.run.max_order, &cfg.thresholds, cfg.weight.c1)?;
    let verdicts = BTreeMap::from([
        ("k_qualifies".to_string(), pass_if(built.qualifying.iter().any(|q| q.qualifies))),
        ("admissible".to_string(), adm.verdict),
    ]);
    Ok(Outcome {
        verdicts,
        result: json!({
            "symbol": describe(&built.full),
            "qualifying": built.qualifying,
            "admissibility": adm,
        }),
        series: Vec::new(),
    })
}

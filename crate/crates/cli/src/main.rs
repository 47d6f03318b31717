//! `psido` batch driver: runs experiment configs and writes JSON reports plus
//! CSV series. Exit status 0 means every verdict passed, 2 means some verdict
//! failed or was inconclusive, 1 means a runtime or configuration error.

mod config;
mod experiments;
mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use psido::symbol::{catalog_description, CATALOG};
use psido::Verdict;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use config::{BatchConfig, ExperimentConfig, Kind};

const DEFAULT_OUT_DIR: &str = "psido-out";

#[derive(Parser, Debug)]
#[command(name = "psido", version, about = "Batch experiments for pseudo-differential dispersive models")]
struct Cli {
    /// Directory for reports and series.
    #[arg(long, global = true, env = "PSIDO_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for independent experiments and parallel scans.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized probes; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every experiment in a config file.
    Run { config: PathBuf },
    /// List catalog symbols, experiment kinds and config keys.
    List,
}

const CONFIG_KEYS: [(&str, &str); 12] = [
    ("seed", "top level: integer seed for randomized probes"),
    ("out_dir", "top level: report directory (flag and env var take precedence)"),
    ("experiments[].name", "file stem for the report and series"),
    ("experiments[].kind", "one of the experiment kinds"),
    ("experiments[].symbol", "{name, params: {n, eps, matrix, terms}}"),
    ("experiments[].system", "vector-field coefficients [[{base, amp, imag_amp, width}]] for kdv-type-build"),
    ("experiments[].grid", "{dim, half_width, points}"),
    ("experiments[].weight", "{n_w = 2, eps = 0.1, c1 = 1}"),
    ("experiments[].thresholds", "{eps = 1, c0 = 1, c_cap = 1e6}"),
    ("experiments[].run", "max_order, random_points, s, t_end, dt, scheme, tol, max_iter, ks, sigma, k, amplitude"),
    ("experiments[].run (cont.)", "estimates, spread_bound, x0, xi0, radius, horizon, h, delta, nonlinearity, frozen"),
    ("experiments[].run (cont.)", "flavor, orders, n_ws"),
];

fn catalog_listing(as_json: bool) -> String {
    if as_json {
        let symbols: Vec<Value> = CATALOG.iter().map(|n| json!({ "name": n, "description": catalog_description(n) })).collect();
        let kinds: Vec<Value> = Kind::ALL.iter().map(|k| json!({ "name": k.name(), "description": k.description() })).collect();
        let keys: Vec<Value> = CONFIG_KEYS.iter().map(|(k, d)| json!({ "key": k, "description": d })).collect();
        let v = json!({ "symbols": symbols, "experiments": kinds, "config_keys": keys });
        return serde_json::to_string_pretty(&v).expect("static json") + "\n";
    }
    let mut out = String::from("symbols:\n");
    for n in CATALOG {
        out += &format!("  {n:<16} {}\n", catalog_description(n));
    }
    out += "experiments:\n";
    for k in Kind::ALL {
        out += &format!("  {:<18} {}\n", k.name(), k.description());
    }
    out += "config keys:\n";
    for (k, d) in CONFIG_KEYS {
        out += &format!("  {k:<28} {d}\n");
    }
    out
}

/// Result of one experiment, ready for the summary.
struct Done {
    name: String,
    verdict: Option<Verdict>,
    report: PathBuf,
    error: Option<String>,
}

fn run_one(exp: &ExperimentConfig, seed: u64, out: &Path) -> Done {
    let mut body = Map::new();
    body.insert("name".into(), json!(exp.name));
    body.insert("kind".into(), json!(exp.kind));
    body.insert("seed".into(), json!(seed));
    body.insert("config".into(), serde_json::to_value(exp).expect("config serializes"));
    let (verdict, error) = match experiments::run(exp, seed) {
        Ok(outcome) => {
            let verdict = outcome.verdict();
            let mut files = Vec::new();
            for s in &outcome.series {
                match report::write_series(out, &exp.name, s) {
                    Ok(p) => files.push(json!(p.file_name().and_then(|n| n.to_str()).unwrap_or_default())),
                    Err(e) => return failed(exp, out, body, format!("{e:#}")),
                }
            }
            body.insert("verdict".into(), json!(verdict));
            body.insert("verdicts".into(), json!(outcome.verdicts));
            body.insert("result".into(), outcome.result);
            body.insert("series".into(), json!(files));
            (Some(verdict), None)
        }
        Err(e) => return failed(exp, out, body, format!("{e:#}")),
    };
    let report = report::finalize(body);
    match report::write_report(out, &exp.name, &report) {
        Ok(path) => Done { name: exp.name.clone(), verdict, report: path, error },
        Err(e) => Done { name: exp.name.clone(), verdict: None, report: PathBuf::new(), error: Some(format!("{e:#}")) },
    }
}

fn failed(exp: &ExperimentConfig, out: &Path, mut body: Map<String, Value>, msg: String) -> Done {
    body.insert("error".into(), json!(msg));
    let report = report::finalize(body);
    let path = report::write_report(out, &exp.name, &report).unwrap_or_default();
    Done { name: exp.name.clone(), verdict: None, report: path, error: Some(msg) }
}

fn run_batch(cfg: &BatchConfig, cli: &Cli) -> Result<u8> {
    let out = cli
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let done: Vec<Done> = cfg.experiments.par_iter().map(|e| run_one(e, seed, &out)).collect();

    // A runtime error outranks a failed verdict.
    let code = if done.iter().any(|d| d.error.is_some() || d.verdict.is_none()) {
        1
    } else if done.iter().all(|d| d.verdict == Some(Verdict::Pass)) {
        0
    } else {
        2
    };
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    if cli.json {
        let items: Vec<Value> = done
            .iter()
            .map(|d| json!({ "name": d.name, "verdict": d.verdict, "report": d.report, "error": d.error }))
            .collect();
        writeln!(w, "{}", serde_json::to_string_pretty(&json!({ "exit_code": code, "experiments": items }))?)?;
    } else {
        for d in &done {
            match (&d.error, d.verdict) {
                (Some(e), _) => writeln!(w, "{:<24} ERROR  {e}", d.name)?,
                (None, Some(v)) => writeln!(w, "{:<24} {:<6} {}", d.name, format!("{v:?}").to_uppercase(), d.report.display())?,
                (None, None) => writeln!(w, "{:<24} ERROR", d.name)?,
            }
        }
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::List => {
            print!("{}", catalog_listing(cli.json));
            Ok(0)
        }
        Command::Run { config } => config::load(config).and_then(|cfg| run_batch(&cfg, &cli)),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

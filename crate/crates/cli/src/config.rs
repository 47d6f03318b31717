//! Batch configuration schema. Every struct rejects unknown keys; defaults are
//! materialized on load so a serialized config is the resolved config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use psido::calculus::Flavor;
use psido::evolve::{Estimate, Scheme};
use psido::nonlinear::NonlinearitySpec;
use psido::symbol::{CoefSpec, SymbolParams, Thresholds};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    CheckAdmissible,
    DoiWeight,
    TraceBichar,
    SolveLinear,
    SmoothingReport,
    SolveNlivp,
    Positivity,
    Appendix,
    KdvTypeBuild,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::CheckAdmissible,
        Kind::DoiWeight,
        Kind::TraceBichar,
        Kind::SolveLinear,
        Kind::SmoothingReport,
        Kind::SolveNlivp,
        Kind::Positivity,
        Kind::Appendix,
        Kind::KdvTypeBuild,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
    }

    pub fn description(self) -> &'static str {
        match self {
            Kind::CheckAdmissible => "gradient ellipticity, x-decay, imaginary smallness and Hamilton slack",
            Kind::DoiWeight => "bounded escape weight and its slack H_a p >= C lambda |xi|^{m-1} - C'",
            Kind::TraceBichar => "bicharacteristic trace, escape times and q_delta growth",
            Kind::SolveLinear => "linear evolution of a wavepacket datum with norm history",
            Kind::SmoothingReport => "weighted smoothing ratios over a wavepacket frequency family",
            Kind::SolveNlivp => "Picard iteration for the nonlinear problem",
            Kind::Positivity => "lower-bound constant of Re(Op^w(a)u, u) at N and 2N",
            Kind::Appendix => "weight commutator expansion residuals and the delta-bracket scan",
            Kind::KdvTypeBuild => "third-order symbol assembled from a vector-field system",
        }
    }

    /// Sections of the experiment table this kind reads.
    pub fn needs(self) -> (bool, bool) {
        // (symbol, grid)
        match self {
            Kind::CheckAdmissible | Kind::DoiWeight => (true, true),
            Kind::TraceBichar => (true, false),
            Kind::SolveLinear | Kind::SmoothingReport | Kind::SolveNlivp | Kind::Positivity => (true, true),
            Kind::Appendix => (false, true),
            Kind::KdvTypeBuild => (false, true),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub experiments: Vec<ExperimentConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Stem of the report and series files.
    pub name: String,
    pub kind: Kind,
    #[serde(default)]
    pub symbol: Option<SymbolSpec>,
    /// Vector-field coefficient matrix for `kdv-type-build`.
    #[serde(default)]
    pub system: Option<Vec<Vec<CoefSpec>>>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub weight: WeightSpec,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub run: RunParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolSpec {
    pub name: String,
    #[serde(default)]
    pub params: SymbolParams,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub points: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    /// Exponent in `lambda = <x>^{-n_w}`.
    #[serde(default = "two")]
    pub n_w: u32,
    /// Cutoff scale of the escape weight.
    #[serde(default = "tenth")]
    pub eps: f64,
    /// Gårding constant.
    #[serde(default = "one_f")]
    pub c1: f64,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self { n_w: 2, eps: 0.1, c1: 1.0 }
    }
}

/// Run parameters shared by all kinds; each kind reads the keys it needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    #[serde(default = "two_usize")]
    pub max_order: usize,
    /// Seeded random x positions added to the sample lattice.
    #[serde(default)]
    pub random_points: usize,
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "auto")]
    pub scheme: Scheme,
    #[serde(default = "tol")]
    pub tol: f64,
    #[serde(default = "max_iter")]
    pub max_iter: usize,
    #[serde(default = "ks")]
    pub ks: Vec<f64>,
    #[serde(default = "two_f")]
    pub sigma: f64,
    /// Datum frequency and amplitude for single runs.
    #[serde(default)]
    pub k: f64,
    #[serde(default = "one_f")]
    pub amplitude: f64,
    #[serde(default = "estimates")]
    pub estimates: Vec<Estimate>,
    /// Largest accepted max/min ratio over a family.
    #[serde(default = "eight")]
    pub spread_bound: f64,
    #[serde(default = "origin")]
    pub x0: Vec<f64>,
    #[serde(default = "unit_xi")]
    pub xi0: Vec<f64>,
    #[serde(default = "ten")]
    pub radius: f64,
    #[serde(default = "ten")]
    pub horizon: f64,
    #[serde(default = "step")]
    pub h: f64,
    #[serde(default = "half")]
    pub delta: f64,
    #[serde(default = "NonlinearitySpec::burgers")]
    pub nonlinearity: NonlinearitySpec,
    #[serde(default)]
    pub frozen: bool,
    #[serde(default = "sharp")]
    pub flavor: Flavor,
    #[serde(default = "orders")]
    pub orders: Vec<u32>,
    #[serde(default = "n_ws")]
    pub n_ws: Vec<u32>,
}

impl Default for RunParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all run parameters have defaults")
    }
}

fn one_f() -> f64 {
    1.0
}
fn two_f() -> f64 {
    2.0
}
fn two() -> u32 {
    2
}
fn two_usize() -> usize {
    2
}
fn tenth() -> f64 {
    0.1
}
fn half() -> f64 {
    0.5
}
fn ten() -> f64 {
    10.0
}
fn eight() -> f64 {
    8.0
}
fn step() -> f64 {
    1e-3
}
fn tol() -> f64 {
    1e-6
}
fn max_iter() -> usize {
    30
}
fn auto() -> Scheme {
    Scheme::Auto
}
fn sharp() -> Flavor {
    Flavor::SharpGarding
}
fn ks() -> Vec<f64> {
    vec![4.0, 8.0, 16.0, 32.0]
}
fn estimates() -> Vec<Estimate> {
    vec![Estimate::Smoothing]
}
fn origin() -> Vec<f64> {
    vec![0.0]
}
fn unit_xi() -> Vec<f64> {
    vec![1.0]
}
fn orders() -> Vec<u32> {
    vec![2, 3]
}
fn n_ws() -> Vec<u32> {
    vec![1, 2]
}

/// Parse and validate; messages carry the field path and the line/column.
pub fn parse(text: &str) -> Result<BatchConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: BatchConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        anyhow::anyhow!("schema violation at `{path}` (line {}, column {}): {inner}", inner.line(), inner.column())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<BatchConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

impl BatchConfig {
    fn validate(&self) -> Result<()> {
        if self.experiments.is_empty() {
            bail!("schema violation at `experiments`: at least one experiment is required");
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, e) in self.experiments.iter().enumerate() {
            let at = format!("experiments[{i}]");
            if e.name.is_empty() || !e.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                bail!("schema violation at `{at}.name`: use letters, digits, `-`, `_` or `.`");
            }
            if !names.insert(e.name.clone()) {
                bail!("schema violation at `{at}.name`: duplicate name `{}`", e.name);
            }
            let (symbol, grid) = e.kind.needs();
            if symbol && e.symbol.is_none() {
                bail!("schema violation at `{at}.symbol`: required for kind `{}`", e.kind.name());
            }
            if grid && e.grid.is_none() {
                bail!("schema violation at `{at}.grid`: required for kind `{}`", e.kind.name());
            }
            if e.kind == Kind::KdvTypeBuild && e.system.is_none() {
                bail!("schema violation at `{at}.system`: required for kind `kdv-type-build`");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = parse(
            r#"{"experiments": [{"name": "a", "kind": "check-admissible",
                "symbol": {"name": "airy"}, "grid": {"dim": 1, "half_width": 10, "points": 128}}]}"#,
        )
        .unwrap();
        let e = &cfg.experiments[0];
        assert_eq!(e.weight.n_w, 2);
        assert_eq!(e.run.ks, vec![4.0, 8.0, 16.0, 32.0]);
        assert_eq!(e.thresholds.eps, 1.0);
    }

    #[test]
    fn unknown_keys_name_the_path() {
        let err = parse(r#"{"experiments": [{"name": "a", "kind": "appendix", "grid": {"dim": 1, "half_width": 10, "points": 64}, "run": {"bogus": 1}}]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("experiments[0].run"), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn missing_sections_rejected() {
        assert!(parse(r#"{"experiments": [{"name": "a", "kind": "positivity", "symbol": {"name": "airy"}}]}"#).is_err());
        assert!(parse(r#"{"experiments": []}"#).is_err());
        let dup = r#"{"experiments": [{"name": "a", "kind": "appendix", "grid": {"dim": 1, "half_width": 10, "points": 64}},
                                      {"name": "a", "kind": "appendix", "grid": {"dim": 1, "half_width": 10, "points": 64}}]}"#;
        assert!(parse(dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn kind_names_are_kebab_case() {
        assert_eq!(Kind::SolveNlivp.name(), "solve-nlivp");
        assert_eq!(Kind::ALL.len(), 9);
    }
}

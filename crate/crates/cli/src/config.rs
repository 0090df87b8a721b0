//! Run configuration: one JSON document, with command-line overrides merged
//! on top.

use std::path::{Path, PathBuf};

use hamcheck_core::builtins::Params;
use hamcheck_core::perturb::PerturbationKind;
use hamcheck_core::verify::Thresholds;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("bad --param token '{0}': expected key=value[,value...]")]
    BadParam(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

/// How α is chosen. `builtin` takes the problem's own default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaConfig {
    Builtin,
    FromC0,
    Quadratic(f64),
    /// Scan `k` over {0.5, 1, 2, 4} for the latest fold.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub per_axis: usize,
    pub time_samples: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            per_axis: 9,
            time_samples: 121,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceConfig {
    pub integrator_abs: f64,
    pub integrator_rel: f64,
    #[serde(flatten)]
    pub checks: Thresholds,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            integrator_abs: 1e-10,
            integrator_rel: 1e-10,
            checks: Thresholds::default(),
        }
    }
}

/// Sampling for the cost comparison. `kind` defaults to path-based when the
/// problem is fully actuated and needle otherwise; `tube_radius` defaults to
/// the chart radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub kind: Option<PerturbationKind>,
    pub amplitude: f64,
    pub count: usize,
    pub seed: u64,
    pub tube_radius: Option<f64>,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            kind: None,
            amplitude: 0.1,
            count: 200,
            seed: 42,
            tube_radius: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompetitorConfig {
    pub amplitude: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for CompetitorConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.05,
            count: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plots: bool,
    pub sheet_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("hamcheck-out"),
            plots: true,
            sheet_csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub alpha: AlphaConfig,
    /// Chart half-width; the problem's default when absent.
    pub chart_radius: Option<f64>,
    pub horizon_factor: f64,
    /// Explicit sheet horizon, overriding `horizon_factor`.
    pub horizon: Option<f64>,
    /// Constant added to `F_max`; a positive value builds a super-Hamiltonian
    /// that cannot agree with the reference Hamiltonian.
    pub hamiltonian_offset: Option<f64>,
    pub grids: GridConfig,
    pub tolerances: ToleranceConfig,
    pub perturbation: PerturbationConfig,
    pub competitors: CompetitorConfig,
    pub outputs: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig {
                name: "lq1d".into(),
                params: Params::default(),
            },
            alpha: AlphaConfig::Builtin,
            chart_radius: None,
            horizon_factor: 1.1,
            horizon: None,
            hamiltonian_offset: None,
            grids: GridConfig::default(),
            tolerances: ToleranceConfig::default(),
            perturbation: PerturbationConfig::default(),
            competitors: CompetitorConfig::default(),
            outputs: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let tol = &self.tolerances;
        for (name, v) in [("integrator_abs", tol.integrator_abs), ("integrator_rel", tol.integrator_rel)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("tolerance '{name}' must be positive and finite, got {v}"));
            }
        }
        tol.checks.validate().map_err(ConfigError::Invalid)?;
        if let Some(r) = self.chart_radius {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("chart_radius must be positive, got {r}"));
            }
        }
        if !(self.horizon_factor > 1.0 && self.horizon_factor.is_finite()) {
            return bad(format!("horizon_factor must exceed 1, got {}", self.horizon_factor));
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("horizon must be positive, got {h}"));
            }
        }
        if self.grids.per_axis < 4 || self.grids.time_samples < 2 {
            return bad("grids need per_axis ≥ 4 and time_samples ≥ 2".into());
        }
        let p = &self.perturbation;
        if !(p.amplitude > 0.0) || p.count == 0 || p.tube_radius.is_some_and(|r| !(r > 0.0)) {
            return bad("perturbation needs amplitude > 0, count ≥ 1 and a positive tube radius".into());
        }
        let c = &self.competitors;
        if !(c.amplitude > 0.0) || c.count == 0 {
            return bad("competitors need amplitude > 0 and count ≥ 1".into());
        }
        if let AlphaConfig::Quadratic(k) = self.alpha {
            if !k.is_finite() {
                return bad(format!("alpha quadratic weight must be finite, got {k}"));
            }
        }
        Ok(())
    }

    /// Merge `--param` tokens into the problem parameters. `h_offset` is
    /// routed to [`RunConfig::hamiltonian_offset`].
    pub fn merge_params(&mut self, tokens: &[String]) -> Result<(), ConfigError> {
        for (key, values) in parse_params(tokens)? {
            if key == "h_offset" {
                match values.as_slice() {
                    [v] => self.hamiltonian_offset = Some(*v),
                    _ => return Err(ConfigError::BadParam(format!("h_offset={values:?}"))),
                }
            } else {
                self.problem.params.set(&key, values);
            }
        }
        Ok(())
    }
}

/// Parse `k=v[,v...]` tokens. After splitting on commas, a piece without
/// `=` extends the previous key, so `x0=-1,0` is the vector `[-1, 0]` and
/// `T=2,h_offset=0.1` sets two keys.
pub fn parse_params(tokens: &[String]) -> Result<Vec<(String, Vec<f64>)>, ConfigError> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for token in tokens {
        for piece in token.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let value = match piece.split_once('=') {
                Some((k, v)) => {
                    let k = k.trim();
                    if k.is_empty() {
                        return Err(ConfigError::BadParam(token.clone()));
                    }
                    out.push((k.to_owned(), Vec::new()));
                    v.trim()
                }
                None if !out.is_empty() => piece,
                None => return Err(ConfigError::BadParam(token.clone())),
            };
            let v: f64 = value.parse().map_err(|_| ConfigError::BadParam(token.clone()))?;
            out.last_mut().expect("key pushed").1.push(v);
        }
    }
    Ok(out)
}

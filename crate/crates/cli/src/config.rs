//! Run configuration. The file format is TOML with a strict schema: unknown
//! keys are rejected and every error carries a line and column.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tdbsde::{DelayMeasure64, GFunction, Generator64, SolverConfig64, TerminalSpec};

use crate::experiment::Experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Solve,
    Classify,
    Reproduce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<TerminalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub solver: SolverSection,
    /// Chosen `Y(0)` when the classification allows several solutions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0_override: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

/// Experiment parameter: a number or a short text such as a terminal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Number(f64),
    Text(String),
}

impl Param {
    /// Numbers parse as numbers, anything else stays text.
    pub fn parse(raw: &str) -> Self {
        match raw.trim().parse::<f64>() {
            Ok(v) => Param::Number(v),
            Err(_) => Param::Text(raw.trim().to_string()),
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Number(v) => write!(f, "{v}"),
            Param::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Zero,
    /// `k Y(t - T)`.
    FixedDelayY { k: f64 },
    DelayedY { k: f64, measure: MeasureConfig },
    /// `k int_0^t Y(s) ds`.
    UniformIntegralY { k: f64 },
    LinearDelayedZ { g: GConfig, measure: MeasureConfig },
    AffineLinearDelayedZ { g: GConfig, measure: MeasureConfig, c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GConfig {
    Constant { value: f64 },
    /// Values at the grid points.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureConfig {
    /// Point mass at delay `lag`.
    Dirac { lag: f64 },
    Uniform,
    Mixture {
        #[serde(default)]
        atoms: Vec<AtomConfig>,
        #[serde(default)]
        uniform_weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub lag: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub degree: usize,
    pub divergence_window: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig64::default();
        Self {
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
            degree: d.degree,
            divergence_window: d.divergence_window,
            beta: d.beta,
        }
    }
}

impl SolverSection {
    pub fn to_core(&self) -> SolverConfig64 {
        SolverConfig64 {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            degree: self.degree,
            divergence_window: self.divergence_window,
            beta: self.beta,
        }
    }
}

/// Parameter varied by `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// `k` or `c` of the generator, or the constant value of `g`.
    K,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Run the Picard solver for every row, not only the classification.
    #[serde(default = "yes")]
    pub solve: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub message: String,
    /// One-based; zero when the error has no position in a file.
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            // raised after parsing, e.g. by a command line override
            f.write_str(&self.message)
        } else {
            write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn at(src: &str, offset: usize, message: impl Into<String>) -> Self {
        let (line, column) = line_col(src, offset);
        Self {
            message: message.into(),
            line,
            column,
        }
    }

    /// Error located at the first assignment of `key`, or at the start of the
    /// file when the key is absent.
    fn at_key(src: &str, key: &str, message: impl Into<String>) -> Self {
        Self::at(src, key_offset(src, key).unwrap_or(0), message)
    }
}

/// One-based line and column of a byte offset.
fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(src.len());
    let before = &src[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |p| offset - p - 1) + 1;
    (line, column)
}

fn key_offset(src: &str, key: &str) -> Option<usize> {
    let mut pos = 0;
    for line in src.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return Some(pos + line.len() - trimmed.len());
            }
        }
        pos += line.len();
    }
    None
}

impl RunConfig {
    /// Parses and validates a config file body.
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        if src.trim().is_empty() {
            return Err(ConfigError::at(src, 0, "empty configuration"));
        }
        let cfg: RunConfig = toml::from_str(src).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            ConfigError::at(src, offset, e.message().trim().to_string())
        })?;
        cfg.validate().map_err(|(key, msg)| ConfigError::at_key(src, key, msg))?;
        Ok(cfg)
    }

    /// Checks the semantic rules; the error names the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive = |key: &'static str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err((key, format!("{key} must be positive, got {x}"))),
            _ => Ok(()),
        };
        positive("horizon", self.horizon)?;
        positive("steps", self.steps.map(|s| s as f64))?;
        positive("paths", self.paths.map(|s| s as f64))?;
        if self.seed == Some(0) {
            return Err(("seed", "seed must be positive".into()));
        }
        let s = &self.solver;
        positive("tolerance", Some(s.tolerance))?;
        positive("max_iterations", Some(s.max_iterations as f64))?;
        positive("degree", Some(s.degree as f64))?;
        if s.divergence_window < 2 {
            return Err(("divergence_window", "divergence_window must be at least 2".into()));
        }
        if let Some(b) = s.beta {
            positive("beta", Some(b))?;
        }
        match self.pipeline {
            Pipeline::Solve | Pipeline::Classify => {
                for (key, missing) in [
                    ("horizon", self.horizon.is_none()),
                    ("steps", self.steps.is_none()),
                    ("paths", self.paths.is_none()),
                    ("seed", self.seed.is_none()),
                    ("terminal", self.terminal.is_none()),
                    ("generator", self.generator.is_none()),
                ] {
                    if missing {
                        return Err(("pipeline", format!("pipeline needs `{key}`")));
                    }
                }
                if self.experiment.is_some() || !self.params.is_empty() {
                    return Err(("experiment", "experiment and params belong to the reproduce pipeline".into()));
                }
            }
            Pipeline::Reproduce => {
                let Some(exp) = self.experiment else {
                    return Err(("pipeline", "reproduce needs `experiment`".into()));
                };
                if self.terminal.is_some() || self.generator.is_some() {
                    return Err((
                        "pipeline",
                        "reproduce takes its terminal and generator from `params`".into(),
                    ));
                }
                if self.sweep.is_some() {
                    return Err(("pipeline", "sweeps run the solve or classify pipeline".into()));
                }
                exp.check_params(&self.params).map_err(|m| ("params", m))?;
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(("values", "sweep needs at least one value".into()));
            }
            if sw.values.iter().any(|v| !v.is_finite()) {
                return Err(("values", "sweep values must be finite".into()));
            }
        }
        Ok(())
    }
}

impl MeasureConfig {
    pub fn build(&self, horizon: f64) -> tdbsde::Result<DelayMeasure64> {
        match self {
            MeasureConfig::Dirac { lag } => DelayMeasure64::dirac(horizon, *lag),
            MeasureConfig::Uniform => DelayMeasure64::uniform(horizon),
            MeasureConfig::Mixture { atoms, uniform_weight } => DelayMeasure64::new(
                horizon,
                atoms.iter().map(|a| (-a.lag, a.weight)).collect(),
                *uniform_weight,
            ),
        }
    }
}

impl GConfig {
    pub fn build(&self) -> GFunction<f64> {
        match self {
            GConfig::Constant { value } => GFunction::Constant(*value),
            GConfig::Table { values } => GFunction::Table(values.clone()),
        }
    }
}

impl GeneratorConfig {
    pub fn build(&self, horizon: f64) -> tdbsde::Result<Generator64> {
        match self {
            GeneratorConfig::Zero => Ok(Generator64::zero(horizon)),
            GeneratorConfig::FixedDelayY { k } => Generator64::fixed_delay_y(*k, horizon),
            GeneratorConfig::DelayedY { k, measure } => Generator64::delayed_y(*k, measure.build(horizon)?),
            GeneratorConfig::UniformIntegralY { k } => Generator64::uniform_integral_y(*k, horizon),
            GeneratorConfig::LinearDelayedZ { g, measure } => {
                Generator64::linear_delayed_z(g.build(), measure.build(horizon)?)
            }
            GeneratorConfig::AffineLinearDelayedZ { g, measure, c } => {
                Generator64::affine_linear_delayed_z(g.build(), measure.build(horizon)?, *c)
            }
        }
    }

    /// Copy with the sweep parameter replaced.
    pub fn with_k(&self, value: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            GeneratorConfig::Zero => {}
            GeneratorConfig::FixedDelayY { k }
            | GeneratorConfig::DelayedY { k, .. }
            | GeneratorConfig::UniformIntegralY { k } => *k = value,
            GeneratorConfig::LinearDelayedZ { g, .. } | GeneratorConfig::AffineLinearDelayedZ { g, .. } => {
                *g = GConfig::Constant { value }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVE: &str = r#"
pipeline = "solve"
horizon = 1.0
steps = 20
paths = 1000
seed = 7

[terminal]
kind = "brownian"
scale = 1
shift = 1.0

[generator]
kind = "fixed_delay_y"
k = 0.5
"#;

    #[test]
    fn parses_solve_config() {
        let c = RunConfig::parse(SOLVE).unwrap();
        assert_eq!(c.terminal, Some(TerminalSpec::Brownian { scale: 1.0, shift: 1.0 }));
        assert_eq!(c.generator, Some(GeneratorConfig::FixedDelayY { k: 0.5 }));
        assert_eq!(c.solver, SolverSection::default());
    }

    #[test]
    fn unknown_key_has_position() {
        let bad = SOLVE.replace("k = 0.5", "k = 0.5\nlag = 3");
        let e = RunConfig::parse(&bad).unwrap_err();
        // errors inside a tagged table point at its header
        assert_eq!(e.line, 13, "{e}");
        let top = format!("colour = 1\n{SOLVE}");
        let e = RunConfig::parse(&top).unwrap_err();
        assert_eq!((e.line, e.column), (1, 1), "{e}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let bad = SOLVE.replace("steps = 20", "steps = 0");
        let e = RunConfig::parse(&bad).unwrap_err();
        assert_eq!((e.line, e.column), (4, 1), "{e}");
        assert!(RunConfig::parse("").is_err());
        assert!(RunConfig::parse("  \n").is_err());
    }

    #[test]
    fn measures_and_params() {
        let src = r#"
pipeline = "reproduce"
experiment = "linear-dirac"
[params]
lag = 0.25
terminal = "brownian:1:0"
"#;
        let c = RunConfig::parse(src).unwrap();
        assert_eq!(c.params["lag"], Param::Number(0.25));
        let m = MeasureConfig::Mixture {
            atoms: vec![AtomConfig { lag: 0.5, weight: 0.5 }],
            uniform_weight: 0.5,
        };
        assert!(m.build(1.0).is_ok());
        assert!(RunConfig::parse(&src.replace("lag", "lagg")).is_err());
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}

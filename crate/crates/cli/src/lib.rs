//! Configuration, pipelines and report writing for the tdbsde command line
//! tool.
//!
//! A run takes a [`RunConfig`], executes one pipeline and produces a
//! [`RunSummary`]. [`write_outputs`] puts `summary.json`, `timings.json` and
//! one CSV per table into the output directory; every file is written to a
//! temporary file first and renamed into place.

pub mod config;
pub mod experiment;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdbsde::experiments::Table;
use tdbsde::{ConvergenceReport, ExistenceClass, ExperimentReport, Verdict};

pub use config::{ConfigError, GeneratorConfig, Param, Pipeline, RunConfig, SweepParameter};
pub use experiment::{Budget, Experiment, Outcome};

use experiment::{closed_form_pipeline, solve_pipeline, ClosedFamily, PicardWhen};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Runtime failure, or an experiment whose checks failed.
    pub const FAILED: i32 = 1;
    pub const NO_SOLUTION: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const INVALID_CONFIG: i32 = 4;
    pub const INCONCLUSIVE: i32 = 5;
}

pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Core(#[from] tdbsde::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use tdbsde::Error as E;
        match self {
            CliError::Config(_) => exit::INVALID_CONFIG,
            CliError::Core(E::InvalidArgument(_) | E::OutOfRange { .. }) => exit::INVALID_CONFIG,
            CliError::Core(E::NoSolution(_)) => exit::NO_SOLUTION,
            CliError::Core(E::Refused(_)) => exit::INCONCLUSIVE,
            _ => exit::FAILED,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Result of one run. Wall-clock times live in `timings.json` so that this
/// file is identical across reruns with the same config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// The config as run, with defaults and overrides filled in.
    pub config: RunConfig,
    pub verdicts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ExistenceClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ExperimentReport>,
    /// Rows of a sweep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunSummary>,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Phase name and seconds, in execution order.
    pub phases: Vec<(String, f64)>,
}

impl RunSummary {
    fn new(config: RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            label: None,
            config,
            verdicts: BTreeMap::new(),
            classification: None,
            convergence: None,
            report: None,
            runs: Vec::new(),
            exit_code: exit::OK,
        }
    }

    fn absorb(&mut self, out: Outcome) {
        if let Some(c) = &out.classification {
            self.verdicts.insert("classification".into(), verdict_name(c.verdict).into());
        }
        if let Some(c) = &out.convergence {
            self.verdicts.insert("picard".into(), enum_name(&c.verdict));
        }
        self.verdicts.insert("experiment".into(), enum_name(&out.report.verdict));
        self.classification = out.classification;
        self.convergence = out.convergence;
        self.report = Some(out.report);
        self.exit_code = out.exit_code;
    }

    /// A number from the report values, if present.
    pub fn value(&self, key: &str) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.values.get(key).copied())
    }

    /// Whether the named check exists and passed.
    pub fn check_passed(&self, name: &str) -> Option<bool> {
        self.report.as_ref().and_then(|r| r.find_check(name)).map(|c| c.passed)
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Unique => "Unique",
        Verdict::NoSolution => "NoSolution",
        Verdict::Multiple => "Multiple",
        Verdict::MultipleOrNone => "MultipleOrNone",
        Verdict::Indeterminate => "Indeterminate",
    }
}

/// Command line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub params: BTreeMap<String, Param>,
}

impl Overrides {
    /// Applies the overrides and validates the result again.
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig, CliError> {
        cfg.seed = self.seed.or(cfg.seed);
        cfg.paths = self.paths.or(cfg.paths);
        cfg.steps = self.steps.or(cfg.steps);
        if self.out.is_some() {
            cfg.output = self.out.clone();
        }
        for (k, v) in &self.params {
            cfg.params.insert(k.clone(), v.clone());
        }
        cfg.validate().map_err(|(key, message)| ConfigError {
            message: format!("{key}: {message}"),
            line: 0,
            column: 0,
        })?;
        Ok(cfg)
    }
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let src = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(RunConfig::parse(&src)?)
}

/// Config for `reproduce <experiment>` without a file.
pub fn reproduce_config(exp: Experiment) -> RunConfig {
    RunConfig {
        pipeline: Pipeline::Reproduce,
        experiment: Some(exp),
        horizon: None,
        steps: None,
        paths: None,
        seed: None,
        terminal: None,
        generator: None,
        solver: Default::default(),
        y0_override: None,
        params: BTreeMap::new(),
        output: None,
        sweep: None,
    }
}

/// Fills in the defaults so the echo in the summary is complete.
fn resolve(mut cfg: RunConfig) -> RunConfig {
    if let Some(exp) = cfg.experiment {
        cfg.steps = Some(cfg.steps.unwrap_or(exp.default_steps()));
        cfg.paths = Some(cfg.paths.unwrap_or(exp.default_paths()));
        let mut given = cfg.params.clone();
        if let Some(h) = cfg.horizon {
            given.entry("horizon".into()).or_insert(Param::Number(h));
        }
        cfg.params = exp.resolve(&given);
    }
    cfg.seed = Some(cfg.seed.unwrap_or(DEFAULT_SEED));
    cfg
}

fn budget(cfg: &RunConfig) -> Budget {
    Budget {
        steps: cfg.steps.unwrap_or(1),
        paths: cfg.paths.unwrap_or(1),
        seed: cfg.seed.unwrap_or(DEFAULT_SEED),
    }
}

/// Which closed-form family a generator belongs to, if any.
fn closed_family(gen: &GeneratorConfig, horizon: f64) -> Option<(ClosedFamily, f64)> {
    match gen {
        GeneratorConfig::FixedDelayY { k } => Some((ClosedFamily::FixedDelay, *k)),
        GeneratorConfig::DelayedY {
            k,
            measure: config::MeasureConfig::Dirac { lag },
        } if *lag == horizon => Some((ClosedFamily::FixedDelay, *k)),
        GeneratorConfig::UniformIntegralY { k } => Some((ClosedFamily::IntegralY, *k)),
        _ => None,
    }
}

/// Runs the pipeline of `cfg` without writing anything.
pub fn run_config(cfg: &RunConfig) -> Result<(RunSummary, Timings), CliError> {
    let cfg = resolve(cfg.clone());
    if let Some(sw) = cfg.sweep.clone() {
        return run_sweep(&cfg, &sw);
    }
    let b = budget(&cfg);
    let outcome = match cfg.pipeline {
        Pipeline::Reproduce => {
            let exp = cfg.experiment.expect("validated");
            experiment::reproduce(exp, &cfg.params, b)?
        }
        Pipeline::Solve | Pipeline::Classify => {
            let horizon = cfg.horizon.expect("validated");
            let gen_cfg = cfg.generator.as_ref().expect("validated");
            let spec = cfg.terminal.as_ref().expect("validated");
            let solver = cfg.solver.to_core();
            match (cfg.pipeline, closed_family(gen_cfg, horizon)) {
                (Pipeline::Classify, None) => {
                    return Err(CliError::Config(ConfigError {
                        message: "classification covers the fixed delay and the integral generators".into(),
                        line: 0,
                        column: 0,
                    }))
                }
                (Pipeline::Classify, Some((family, k))) => closed_form_pipeline(
                    "classify",
                    family,
                    horizon,
                    k,
                    spec,
                    cfg.y0_override,
                    b,
                    &solver,
                    PicardWhen::Never,
                )?,
                (_, Some((family, k))) => closed_form_pipeline(
                    "solve",
                    family,
                    horizon,
                    k,
                    spec,
                    cfg.y0_override,
                    b,
                    &solver,
                    PicardWhen::Always,
                )?,
                (_, None) => solve_pipeline(&gen_cfg.build(horizon)?, spec, horizon, b, &solver)?,
            }
        }
    };
    let timings = Timings {
        phases: outcome.timings.clone(),
    };
    let mut summary = RunSummary::new(cfg);
    summary.absorb(outcome);
    Ok((summary, timings))
}

fn run_sweep(cfg: &RunConfig, sw: &config::SweepSection) -> Result<(RunSummary, Timings), CliError> {
    let mut summary = RunSummary::new(cfg.clone());
    let mut timings = Timings::default();
    for &v in &sw.values {
        let mut row = cfg.clone();
        row.sweep = None;
        if !sw.solve && row.pipeline == Pipeline::Solve {
            row.pipeline = Pipeline::Classify;
        }
        let name = match sw.parameter {
            SweepParameter::K => {
                row.generator = row.generator.map(|g| g.with_k(v));
                "k"
            }
            SweepParameter::Horizon => {
                row.horizon = Some(v);
                "horizon"
            }
        };
        row.validate().map_err(|(key, message)| ConfigError {
            message: format!("sweep value {v}: {key}: {message}"),
            line: 0,
            column: 0,
        })?;
        let label = format!("{name}={v}");
        let (mut s, t) = match run_config(&row) {
            Ok(r) => r,
            // a row the solver refuses is still a row of the table
            Err(CliError::Core(e)) => {
                let mut s = RunSummary::new(row.clone());
                s.verdicts.insert("error".into(), e.to_string());
                s.exit_code = CliError::Core(e).exit_code();
                (s, Timings::default())
            }
            Err(e) => return Err(e),
        };
        s.label = Some(label.clone());
        timings
            .phases
            .extend(t.phases.into_iter().map(|(p, secs)| (format!("{label}/{p}"), secs)));
        summary.runs.push(s);
    }
    summary.verdicts.insert("sweep".into(), format!("{} rows", summary.runs.len()));
    Ok((summary, timings))
}

/// Columns of [`emit_table`], in order.
pub const TABLE_COLUMNS: [&str; 10] = [
    "label",
    "classification",
    "picard",
    "exit_code",
    "delta_star",
    "beta_star",
    "y0",
    "iterations",
    "max_norm_ratio",
    "residual_max_step_rms",
];

/// Fixed 17 significant digit float format; empty for missing values.
pub fn fmt_float(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.16e}"),
        None => String::new(),
    }
}

/// Flattens summaries into one comparison table.
pub fn emit_table(summaries: &[RunSummary]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_COLUMNS)?;
    for s in summaries {
        let verdict = |k: &str| s.verdicts.get(k).cloned().unwrap_or_default();
        let y0 = s
            .value("picard_y0")
            .or_else(|| s.value("closed_form_y0"))
            .or_else(|| s.classification.as_ref().and_then(|c| c.y0));
        w.write_record([
            s.label.clone().unwrap_or_default(),
            verdict("classification"),
            verdict("picard"),
            s.exit_code.to_string(),
            fmt_float(s.value("delta_star")),
            fmt_float(s.value("beta_star")),
            fmt_float(y0),
            s.convergence.as_ref().map(|c| c.iterations.to_string()).unwrap_or_default(),
            fmt_float(s.value("max_norm_ratio")),
            fmt_float(s.value("residual_max_step_rms")),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// A report table as CSV.
pub fn table_csv(table: &Table) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|&x| fmt_float(Some(x))))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `bytes` to a temporary file next to `path` and renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Writes every artifact of a run. All contents are rendered before the
/// first file is touched, so a failure leaves no partial output.
pub fn write_outputs(summary: &RunSummary, timings: &Timings, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<(PathBuf, String)> = vec![
        (dir.join("summary.json"), summary.to_json()?),
        (dir.join("timings.json"), serde_json::to_string_pretty(timings)?),
    ];
    if let Some(r) = &summary.report {
        for (name, t) in &r.tables {
            files.push((dir.join(format!("{name}.csv")), table_csv(t)?));
        }
    }
    if !summary.runs.is_empty() {
        files.push((dir.join("sweep.csv"), emit_table(&summary.runs)?));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (path, body) in &files {
        write_atomic(path, body.as_bytes())?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Output directory of a run: the override, the config entry, or `out`.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let csv = emit_table(&[]).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(csv.trim_end(), TABLE_COLUMNS.join(","));
    }

    #[test]
    fn floats_have_seventeen_digits() {
        assert_eq!(fmt_float(Some(0.1)), "1.0000000000000001e-1");
        assert_eq!(fmt_float(Some(2.0)).parse::<f64>().unwrap(), 2.0);
        assert_eq!(fmt_float(None), "");
    }

    #[test]
    fn exit_codes_of_core_errors() {
        let e = CliError::Core(tdbsde::Error::NoSolution("x".into()));
        assert_eq!(e.exit_code(), exit::NO_SOLUTION);
        let e = CliError::Core(tdbsde::Error::Refused("x".into()));
        assert_eq!(e.exit_code(), exit::INCONCLUSIVE);
    }

    #[test]
    fn resolved_reproduce_config_echo() {
        let cfg = resolve(reproduce_config(Experiment::Example1));
        assert_eq!(cfg.steps, Some(50));
        assert_eq!(cfg.params["k"], Param::Number(0.5));
        assert!(!cfg.params.contains_key("y0"));
    }
}

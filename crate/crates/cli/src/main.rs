use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdbsde_cli::{
    exit, load_config, output_dir, reproduce_config, run_config, write_outputs, CliError, ConfigError, Experiment,
    Overrides, Param, Pipeline, RunConfig,
};

/// Solvers and experiments for BSDEs with time-delayed generators.
#[derive(Parser, Debug)]
#[command(name = "tdbsde", version)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,

    /// Number of simulated paths.
    #[arg(long)]
    paths: Option<usize>,

    /// Number of time steps.
    #[arg(long)]
    steps: Option<usize>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run whatever pipeline the config selects.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Picard iteration for the configured equation.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Existence classification and explicit solution.
    Classify {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reproduce one of the built-in experiments.
    Reproduce {
        #[arg(value_enum)]
        experiment: Experiment,
        /// Parameter override `key=value`, repeatable.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, Param)>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a config once per value of its `[sweep]` section.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_param(raw: &str) -> Result<(String, Param), String> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{raw}`"))?;
    Ok((k.trim().to_string(), Param::parse(v)))
}

fn overrides(common: &Common, params: Vec<(String, Param)>) -> Overrides {
    Overrides {
        seed: common.seed,
        paths: common.paths,
        steps: common.steps,
        out: common.out.clone(),
        params: params.into_iter().collect(),
    }
}

fn prepare(cmd: Command) -> Result<RunConfig, CliError> {
    let (cfg, common, params) = match cmd {
        Command::Run { config, common } => (load_config(&config)?, common, Vec::new()),
        Command::Solve { config, common } => {
            let mut cfg = load_config(&config)?;
            cfg.pipeline = Pipeline::Solve;
            (cfg, common, Vec::new())
        }
        Command::Classify { config, common } => {
            let mut cfg = load_config(&config)?;
            cfg.pipeline = Pipeline::Classify;
            (cfg, common, Vec::new())
        }
        Command::Sweep { config, common } => {
            let cfg = load_config(&config)?;
            if cfg.sweep.is_none() {
                return Err(ConfigError {
                    message: "sweep needs a [sweep] section".into(),
                    line: 1,
                    column: 1,
                }
                .into());
            }
            (cfg, common, Vec::new())
        }
        Command::Reproduce {
            experiment,
            params,
            common,
        } => (reproduce_config(experiment), common, params),
    };
    overrides(&common, params).apply(cfg)
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    let cfg = prepare(cli.command)?;
    let (summary, timings) = run_config(&cfg)?;
    let dir = output_dir(&summary.config);
    let files = write_outputs(&summary, &timings, &dir)?;
    for (k, v) in &summary.verdicts {
        println!("{k}: {v}");
    }
    if let Some(r) = &summary.report {
        for c in &r.checks {
            println!("check {}: {} ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
        for n in &r.notes {
            println!("note: {n}");
        }
    }
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(summary.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(exit::FAILED as u8);
        }
    }
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

//! `tailtp`: profile, fit, simulate, compare and sweep TP schedules.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tailtp_core::Mode;

use tailtp_cli::commands;
use tailtp_cli::config::{ExperimentConfig, Format, CONFIG_DIR_ENV};
use tailtp_cli::failure::{CliResult, Failure};

#[derive(Debug, Parser)]
#[command(name = "tailtp", version, about = "Adaptive TP reconfiguration simulator for long-tail rollouts")]
struct Cli {
    /// Worker threads for concurrent runs (default: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario config (TOML). Relative paths are also looked up in $TAILTP_CONFIG_DIR.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Output directory (overrides output.dir).
    #[arg(long, short)]
    out: Option<PathBuf>,

    /// Profile table CSV to fit the predictor from (overrides output.profile).
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,

    /// Workload seed (overrides scenario.seed).
    #[arg(long)]
    seed: Option<u64>,

    /// Output formats (overrides output.formats).
    #[arg(long, value_enum, value_delimiter = ',')]
    format: Vec<Format>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Profile the hardware oracle over the sparse grid and write profile.csv.
    Profile(Common),
    /// Fit the latency predictor and write predictor.json.
    Fit(Common),
    /// Run one scenario and write report.json and timeline.csv.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// adaptive, static or naive-switch (overrides scenario.mode).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Compare every static layout against the dynamic modes.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Dynamic modes to run next to the statics.
        #[arg(long, value_delimiter = ',', default_value = "adaptive,naive-switch")]
        mode: Vec<Mode>,
        #[arg(long)]
        l_max: Option<u32>,
    },
    /// Run `compare` for each l_max value.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "adaptive,naive-switch")]
        mode: Vec<Mode>,
        /// l_max values (overrides output.sweep).
        #[arg(long, value_delimiter = ',')]
        l_max: Vec<u32>,
    },
    /// Print the effective configuration.
    Config(Common),
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &common.profile {
        cfg.output.profile = Some(p.clone());
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn job(run: &RunArgs, edit: impl FnOnce(&mut ExperimentConfig)) -> CliResult<commands::Job> {
    let mut cfg = load(&run.common)?;
    if let Some(s) = run.seed {
        cfg.scenario.seed = s;
    }
    if !run.format.is_empty() {
        cfg.output.formats = run.format.clone();
    }
    edit(&mut cfg);
    cfg.validate()?;
    Ok(commands::Job {
        out: cfg.output.dir.clone(),
        formats: cfg.output.formats.clone(),
        cfg,
    })
}

fn plain_job(common: &Common) -> CliResult<commands::Job> {
    let cfg = load(common)?;
    Ok(commands::Job {
        out: cfg.output.dir.clone(),
        formats: cfg.output.formats.clone(),
        cfg,
    })
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::usage("--workers must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::usage)?;
    }
    match cli.command {
        Command::Profile(c) => commands::profile(&plain_job(&c)?),
        Command::Fit(c) => commands::fit(&plain_job(&c)?),
        Command::Simulate { run, mode } => commands::simulate(&job(&run, |c| {
            if let Some(m) = mode {
                c.scenario.mode = m;
            }
        })?),
        Command::Compare { run, mode, l_max } => {
            let j = job(&run, |c| {
                if let Some(l) = l_max {
                    c.scenario.l_max = l;
                }
            })?;
            commands::compare_cmd(&j, &mode)
        }
        Command::Sweep { run, mode, l_max } => {
            let j = job(&run, |c| {
                if !l_max.is_empty() {
                    c.output.sweep = l_max;
                }
            })?;
            let values = j.cfg.output.sweep.clone();
            commands::sweep_cmd(&j, &mode, &values)
        }
        Command::Config(c) => {
            print!("{}", load(&c)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            if f.code() == 2 {
                eprintln!("hint: check paths; relative configs are also searched in ${CONFIG_DIR_ENV}");
            }
            ExitCode::from(f.code())
        }
    }
}

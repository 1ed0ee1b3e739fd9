//! `qae`: run, sweep, verify and report from the command line.
//!
//! Exit codes: 0 success, 1 failing verification instance, 2 invalid
//! config or malformed metrics, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use qae_lab::config::{env_layer, layered_config, TrainConfig};
use qae_lab::runner::{run_id, run_to_dir, sweep, SweepAxis};
use qae_lab::verify::{run_suite, Suite};
use qae_lab::{report, Error};

#[derive(Parser)]
#[command(
    name = "qae",
    version,
    about = "Mean and K-quantile advantage baselines on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write its artifacts under `<out>/<run-id>/`.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every value x seed cell of a one-axis sweep.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Config field to sweep: K or eps_high.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Number of cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check the analytic properties over randomized instances.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG charts for a run directory or a sweep directory.
    Report { dir: PathBuf },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Prop1,
    Prop2,
    Gradients,
    Identity,
    All,
}

impl SuiteArg {
    fn suites(self) -> Vec<Suite> {
        match self {
            SuiteArg::Prop1 => vec![Suite::Prop1],
            SuiteArg::Prop2 => vec![Suite::Prop2],
            SuiteArg::Gradients => vec![Suite::Gradients],
            SuiteArg::Identity => vec![Suite::Identity],
            SuiteArg::All => Suite::ALL.to_vec(),
        }
    }
}

enum Failure {
    Config(Error),
    Runtime(Error),
    Verify,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn load_config(args: &ConfigArgs, fallback_seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Config(Error::Config(format!(
                    "cannot read {}: {e}",
                    path.display()
                )))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Config(Error::Config(format!("{}: {e}", path.display()))))?
        }
        None => Value::Object(Map::new()),
    };
    let mut overrides = Map::new();
    if let Some(seed) = args.seed.or(fallback_seed) {
        overrides.insert("seed".into(), seed.into());
    }
    layered_config(env_layer(std::env::vars()), file, overrides).map_err(Failure::Config)
}

fn cmd_run(config: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, None)?;
    let dir = out.join(run_id(&cfg));
    let history = run_to_dir(&cfg, &dir).map_err(Failure::Runtime)?;
    if let Some(last) = history.last() {
        println!(
            "{}: {} steps, final entropy {:.4}, pass@1 {:.4}",
            dir.display(),
            history.len(),
            last.entropy_total,
            last.pass_at_1
        );
    } else {
        println!("{}: 0 steps", dir.display());
    }
    Ok(())
}

fn cmd_sweep(
    config: &ConfigArgs,
    out: &Path,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<(), Failure> {
    // the base config must be valid on its own (each cell replaces the
    // seed); per-cell failures are recorded in the summary instead
    let base = load_config(config, seeds.first().copied())?;
    let rows = sweep(&base, axis, values, seeds, out, jobs).map_err(Failure::Runtime)?;
    for row in &rows {
        match row.final_quartile_entropy {
            Some(h) if row.is_ok() => println!(
                "{}={} seed {}: final-quartile entropy {:.4}",
                axis.name(),
                row.value,
                row.seed,
                h
            ),
            _ => println!(
                "{}={} seed {}: {}",
                axis.name(),
                row.value,
                row.seed,
                row.status
            ),
        }
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    println!("{} cells, {} failed", rows.len(), failed);
    Ok(())
}

fn cmd_verify(suite: SuiteArg, trials: usize, seed: u64) -> Result<(), Failure> {
    let mut all_ok = true;
    for s in suite.suites() {
        let report = run_suite(s, trials, seed).map_err(Failure::Config)?;
        println!("{report}");
        all_ok &= report.ok();
    }
    if all_ok {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let files = report::render(dir).map_err(|e| match e {
        Error::Sink(_) => Failure::Config(e),
        other => Failure::Runtime(other),
    })?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out } => cmd_run(config, out),
        Command::Sweep {
            config,
            out,
            axis,
            values,
            seeds,
            jobs,
        } => cmd_sweep(config, out, *axis, values, seeds, *jobs),
        Command::Verify {
            suite,
            trials,
            seed,
        } => cmd_verify(*suite, *trials, *seed),
        Command::Report { dir } => cmd_report(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Config(e) | Failure::Runtime(e) => eprintln!("error: {e}"),
                Failure::Verify => eprintln!("verification failed"),
            }
            ExitCode::from(failure.code())
        }
    }
}

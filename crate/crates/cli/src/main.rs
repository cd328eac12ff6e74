//! `thzsb` command line: run experiments, validate configurations, print
//! analytic bounds and time the estimators.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use thzsb::harness::bench::{run_bench, write_bench_csv, BenchSettings};
use thzsb::harness::{
    bound_report, run_experiment, write_bound_csv, write_outputs, HarnessError, MetricKind,
    ScenarioConfig,
};

const THREADS_ENV: &str = "THZSB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "thzsb", version, about = "Semi-blind THz uplink channel estimation simulator")]
struct Cli {
    /// Override the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to THZSB_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for CSV output.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override the number of Monte Carlo trials per sweep point.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Monte Carlo experiment and write nmse.csv, ber.csv and,
    /// when configured, se.csv and ecdf.csv.
    Run { config: PathBuf },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
    /// Analytic ML error, constrained bound and semi-blind gain per sweep
    /// point, written to bound.csv.
    Bound { config: PathBuf },
    /// Time each estimator and the hybrid combiner design, one call at a
    /// time; writes bench.csv.
    Bench {
        /// Repetitions per problem size.
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// Data block length.
        #[arg(long, default_value_t = 200)]
        n_data: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                Failure::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Failure::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn load(cli: &Cli, path: &Path) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::from_path(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.outputs.dir = dir.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let threads = threads(cli.threads)?;
    match &cli.command {
        Command::Validate { config } => {
            let cfg = load(cli, config)?;
            println!(
                "{}: ok ({} sweep points x {} trials)",
                config.display(),
                cfg.sweep.values.len(),
                cfg.trials
            );
        }
        Command::Run { config } => {
            let cfg = load(cli, config)?;
            let report = run_experiment(&cfg, threads)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{:>12}  {:<24} {:>12} {:>12}", cfg.sweep.parameter, "method", "nmse_db", "ber");
            for row in report.rows_for(MetricKind::NmseDb) {
                let ber = report
                    .mean(MetricKind::Ber, &row.method, row.sweep_value)
                    .unwrap_or(f64::NAN);
                println!(
                    "{:>12}  {:<24} {:>12.3} {:>12.5}",
                    row.sweep_value, row.method, row.mean, ber
                );
            }
            write_outputs(&report, &cfg.outputs.dir)?;
            println!("wrote {}", cfg.outputs.dir.display());
        }
        Command::Bound { config } => {
            let cfg = load(cli, config)?;
            let rows = bound_report(&cfg)?;
            for r in &rows {
                println!(
                    "{} = {}: ml {:.2} dB, ccrlb {:.2} dB, gain N_BS={} K_U={}: {:.2} dB",
                    cfg.sweep.parameter, r.sweep_value, r.ml_nmse_db, r.ccrlb_nmse_db, r.n_bs, r.k_u, r.gain_db
                );
            }
            let path = cfg.outputs.dir.join("bound.csv");
            write_bound_csv(&rows, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Bench { reps, n_data } => {
            if cli.trials.is_some() {
                return Err(Failure::Config("--trials does not apply to bench; use --reps".into()));
            }
            let settings = BenchSettings {
                reps: *reps,
                n_data: *n_data,
                seed: cli.seed.unwrap_or(BenchSettings::default().seed),
                ..BenchSettings::default()
            };
            let rows = run_bench(&settings)?;
            println!("{:<18} {:>6} {:>6} {:>12} {:>12}", "method", "n_bs", "k_u", "mean_ms", "p95_ms");
            for r in &rows {
                println!(
                    "{:<18} {:>6} {:>6} {:>12.3} {:>12.3}",
                    r.method, r.n_bs, r.k_u, r.mean_ms, r.p95_ms
                );
            }
            let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
            let path = dir.join("bench.csv");
            write_bench_csv(&rows, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error:\n{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

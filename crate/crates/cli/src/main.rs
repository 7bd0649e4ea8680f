use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kpf_cli::config::ExperimentConfig;
use kpf_cli::{acceptance, commands, CliError, CliResult};

#[derive(Parser)]
#[command(name = "kpf", version, about = "Kalman particle filter experiments for affine term-structure models")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dataset and its truth sidecar.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an estimator and write its trace and summary.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV; overrides data.path.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the estimator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score traces against a truth sidecar.
    Report {
        /// `label=path` or a bare path (label = file stem); repeatable.
        #[arg(long = "trace", required = true)]
        traces: Vec<String>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run the acceptance suite.
    Selftest {
        /// Comma-separated criterion numbers; all by default.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

fn labelled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((l, p)) => (l.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
            (label, p)
        }
    }
}

fn run(cli: Cli) -> CliResult<bool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::config(format!("--threads: {e}")))?;
    match cli.cmd {
        Cmd::Simulate { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = commands::simulate(&cfg, out.as_deref(), seed)?;
            println!("wrote {}", path.display());
        }
        Cmd::Calibrate { config, data, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = commands::calibrate(&cfg, data.as_deref(), out.as_deref(), seed)?;
            println!(
                "{} steps in {:.1} s; switch {:?}, resets {:?}",
                s.steps, s.wall_clock_seconds, s.switch_step, s.reset_steps
            );
            for (n, (m, sd)) in s.param_names.iter().zip(s.final_mean.iter().zip(&s.final_std)) {
                println!("  {n:<8} {m:.6e} ± {sd:.2e}");
            }
        }
        Cmd::Report { traces, truth, out } => {
            let traces: Vec<_> = traces.iter().map(|t| labelled(t)).collect();
            let m = commands::report(&traces, &truth, &out)?;
            print!("{}", commands::metrics_table(&m));
        }
        Cmd::Selftest { only } => {
            let selected = if only.is_empty() { acceptance::ALL.to_vec() } else { only };
            let outcomes = acceptance::run(&selected, |o| {
                println!("{}", o.line());
                for d in &o.details {
                    println!("    {d}");
                }
            });
            return Ok(outcomes.iter().all(|o| o.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

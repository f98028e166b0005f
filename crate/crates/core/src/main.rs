use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dislab::cli::{cmd_bench, cmd_solve, cmd_toy_demo, cmd_verify, with_threads, ExperimentConfig};
use dislab::solvers::SolverKind;
use dislab::Error;

#[derive(Parser)]
#[command(name = "dislab", version, about = "Guided diffusion sampling on analytic Gaussian-mixture priors")]
struct Cli {
    /// Worker threads for parallel grids and runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Posterior heatmap, approximation scatter and PF-ODE decision maps on the toy prior.
    ToyDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/toy-demo")]
        out: PathBuf,
    },
    /// Run the configured solvers and write per-step trajectories.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to one solver by name.
        #[arg(long)]
        solver: Option<String>,
        /// Overrides the master seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare at least two solvers over seeded runs.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic and numerical self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_score: f64,
    },
}

enum Failure {
    Invariant,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Json(_)) => 2,
        Some(Error::Divergence { .. }) => 3,
        _ => 1,
    }
}

fn load(config: &Path, seed: Option<u64>, solver: Option<&str>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seeds.master = s;
    }
    if let Some(name) = solver {
        let kind = SolverKind::parse(name)?;
        cfg.solvers.retain(|c| c.solver == kind);
        if cfg.solvers.is_empty() {
            return Err(Error::Config(format!("solver {name} is not configured")).into());
        }
    }
    Ok(cfg)
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cli.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = cli.threads;
    match cli.command {
        Command::ToyDemo { seed, out } => {
            let files = with_threads(threads, || cmd_toy_demo(seed, &out))
                .map_err(anyhow::Error::from)?
                .context("toy-demo failed")?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Solve {
            config,
            solver,
            seed,
            out,
        } => {
            let cfg = load(&config, seed, solver.as_deref())?;
            let out = out_dir(out, &cfg, "out/solve");
            let files = with_threads(threads, || cmd_solve(&cfg, &out)).map_err(anyhow::Error::from)?;
            for f in files.map_err(anyhow::Error::from)? {
                println!("{}", f.display());
            }
        }
        Command::Bench { config, seed, out } => {
            let cfg = load(&config, seed, None)?;
            let out = out_dir(out, &cfg, "out/bench");
            let res = with_threads(threads, || cmd_bench(&cfg, &out)).map_err(anyhow::Error::from)?;
            let res = res.map_err(anyhow::Error::from)?;
            for s in &res.results.summaries {
                println!(
                    "{:<16} consistency={:.4} failures={} mean_post_logdensity={:.4}",
                    s.label, s.consistency, s.failures, s.mean_post_logdensity
                );
            }
            for f in res.files {
                println!("{}", f.display());
            }
        }
        Command::Verify { seed, corrupt_score } => {
            let report = with_threads(threads, || cmd_verify(corrupt_score, seed)).map_err(anyhow::Error::from)?;
            let report = report.map_err(anyhow::Error::from)?;
            print!("{}", report.render());
            if !report.all_passed() {
                return Err(Failure::Invariant);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant) => {
            eprintln!("error: verification failed");
            ExitCode::from(1)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

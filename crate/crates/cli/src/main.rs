use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dacsim::config::{self, parse_config};
use dacsim::report;
use dacsim::simulator::{run_sweep, ExperimentResult, Simulation};
use dacsim::{Error, ExperimentConfig, Result, Scalar};

/// Decentralized personalized learning simulator.
#[derive(Debug, Parser)]
#[command(name = "dacsim", version)]
struct Cli {
    /// Threads used for the client updates inside each round.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Validate the config and print it with defaults filled in.
        #[arg(long)]
        dry_run: bool,
        /// Where artifacts go; overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
        /// Write a checkpoint after this many rounds, then keep going.
        #[arg(long, requires = "checkpoint")]
        checkpoint_at: Option<usize>,
        /// Checkpoint file written by `--checkpoint-at`.
        #[arg(long, requires = "checkpoint_at")]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint of this same config.
        #[arg(long, conflicts_with = "checkpoint_at")]
        resume: Option<PathBuf>,
    },
    /// Run one experiment per value of a single parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Summarize every run stored below a results directory.
    Report { results_dir: PathBuf },
    /// Check a config and print it with defaults filled in.
    Validate { config: PathBuf },
}

fn load(path: &Path, output_dir: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if output_dir.is_some() {
        cfg.output_dir = output_dir;
    }
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn print_result(label: &str, r: &ExperimentResult) {
    let clusters: Vec<String> = r
        .config
        .layout
        .clusters
        .iter()
        .zip(&r.summary.cluster_means)
        .map(|(c, &m)| format!("{}={}", c.shift, pct(m)))
        .collect();
    println!(
        "{label}: mean {} std {} [{}]",
        pct(r.summary.mean),
        pct(r.summary.std),
        clusters.join(" ")
    );
    if let Some(mass) = r.mean_final_in_cluster_mass() {
        println!("{label}: final in-cluster sampling mass {mass:.4}");
    }
}

struct RunArgs {
    checkpoint_at: Option<usize>,
    checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
}

fn run_one<F: Scalar>(cfg: ExperimentConfig, args: RunArgs, workers: usize) -> Result<ExperimentResult> {
    let mut sim = match &args.resume {
        Some(path) => {
            let sim = Simulation::<F>::resume(path)?;
            let mut stored = sim.config().clone();
            stored.output_dir = cfg.output_dir.clone();
            if stored != cfg {
                return Err(Error::config(format!(
                    "checkpoint {} was written for a different config",
                    path.display()
                )));
            }
            log::info!("resuming at round {}", sim.round());
            sim
        }
        None => Simulation::<F>::new(cfg.clone())?,
    }
    .with_workers(workers)?;
    if let (Some(at), Some(path)) = (args.checkpoint_at, &args.checkpoint) {
        sim.run_until(at)?;
        sim.checkpoint(path)?;
        log::info!("checkpoint at round {} written to {}", sim.round(), path.display());
    }
    let result = sim.finish()?;
    if let Some(dir) = &cfg.output_dir {
        result.write_artifacts(dir)?;
    }
    Ok(result)
}

fn execute(cli: Cli) -> Result<()> {
    let workers = cli.workers as usize;
    match cli.command {
        Command::Validate { config } => {
            print!("{}", config::echo(&parse_config(&config)?));
        }
        Command::Run {
            config,
            dry_run,
            output_dir,
            precision,
            checkpoint_at,
            checkpoint,
            resume,
        } => {
            let cfg = load(&config, output_dir)?;
            if dry_run {
                print!("{}", config::echo(&cfg));
                return Ok(());
            }
            let name = cfg.name.clone();
            let args = RunArgs {
                checkpoint_at,
                checkpoint,
                resume,
            };
            let result = match precision {
                Precision::F64 => run_one::<f64>(cfg, args, workers)?,
                Precision::F32 => run_one::<f32>(cfg, args, workers)?,
            };
            print_result(&name, &result);
        }
        Command::Sweep {
            config,
            param,
            values,
            output_dir,
            precision,
        } => {
            let cfg = load(&config, output_dir)?;
            let results = match precision {
                Precision::F64 => run_sweep::<f64>(&cfg, &param, &values, workers)?,
                Precision::F32 => run_sweep::<f32>(&cfg, &param, &values, workers)?,
            };
            for (v, r) in values.iter().zip(&results) {
                print_result(&format!("{param}={v}"), r);
            }
        }
        Command::Report { results_dir } => {
            print!("{}", report::report(&results_dir)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

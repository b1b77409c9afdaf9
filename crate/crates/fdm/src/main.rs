use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fdm::commands::{self, VerifyOptions};
use fdm::config::{documented_defaults, ConfigError, ExperimentConfig};
use fdm::experiment::UsageError;
use fdm::formats::write_atomic;

/// Multi-stage diffusion with progressively transformed signals.
#[derive(Parser)]
#[command(name = "fdm", version)]
struct Cli {
    /// Experiment config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides a config key, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the denoiser, writing checkpoints and a CSV log.
    Train {
        /// Continues from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generates samples from a checkpoint's EMA weights.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of samples; defaults to `sample.count`.
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Generates from conditions given at stage `cond.stage`.
    Condgen {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `.fdmt` stage tensors or `.png` images; the first corpus images when omitted.
        #[arg(long = "condition")]
        conditions: Vec<PathBuf>,
        /// Number of corpus conditions; defaults to `sample.count`.
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Checks the schedule, process and boundary invariants; exits 1 on failure.
    Verify {
        /// Writes the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Writes schedule curves as CSV (t, alpha, sigma, stage).
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Monte-Carlo draws per estimate.
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        /// Multiplies the first rescale factor by this value.
        #[arg(long)]
        corrupt_rescale: Option<f64>,
    },
    /// Prints the signal-power ratio of every boundary.
    EstimateGamma,
    /// Prints every config key with its default and description.
    Defaults,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_config(),
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

enum Outcome {
    Ok,
    Failed,
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    if let Command::Defaults = cli.command {
        print!("{}", documented_defaults());
        return Ok(Outcome::Ok);
    }
    let cfg = load_config(cli)?;
    let mut err = std::io::stderr();
    match &cli.command {
        Command::Train { resume } => {
            commands::cmd_train(&cfg, resume.as_deref(), &mut err)?;
        }
        Command::Sample { checkpoint, n } => {
            let paths = commands::cmd_sample(&cfg, checkpoint, n.unwrap_or(cfg.sample_count))?;
            writeln!(err, "wrote {} samples to {}", paths.len(), cfg.output_dir.join("samples").display())?;
        }
        Command::Condgen { checkpoint, conditions, n } => {
            let paths = commands::cmd_condgen(&cfg, checkpoint, conditions, n.unwrap_or(cfg.sample_count))?;
            writeln!(err, "wrote {} outputs to {}", paths.len(), cfg.output_dir.join("condgen").display())?;
        }
        Command::Verify { report, curves, draws, corrupt_rescale } => {
            let opts = VerifyOptions {
                draws: *draws,
                corrupt_rescale: *corrupt_rescale,
                ..VerifyOptions::default()
            };
            let (rep, exp) = commands::cmd_verify(&cfg, &opts)?;
            for c in &rep.checks {
                writeln!(err, "{}", c.line())?;
            }
            let json = serde_json::to_string_pretty(&rep)? + "\n";
            match report {
                Some(p) => write_atomic(p, json.as_bytes())?,
                None => print!("{json}"),
            }
            if let Some(p) = curves {
                write_atomic(p, commands::schedule_curves(&exp.ns)?.as_bytes())?;
            }
            if !rep.passed {
                return Ok(Outcome::Failed);
            }
        }
        Command::EstimateGamma => {
            println!("boundary,gamma");
            for (k, g) in commands::cmd_estimate_gamma(&cfg)? {
                println!("{k},{g:.9}");
            }
        }
        Command::Defaults => unreachable!(),
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<ConfigError>().is_some();
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdrs::config::ExperimentConfig;
use cdrs::pipeline::{self, Artifacts, Method};
use cdrs::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cdrs",
    version,
    about = "Conditional density ratio subsampling for conditional generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; defaults to the config's output_dir, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    CdrRs,
}

#[derive(Subcommand)]
enum Command {
    /// Train the sparse autoencoder feature extractor.
    TrainSae(Common),
    /// Train the conditional density ratio model.
    TrainCdre {
        #[command(flatten)]
        common: Common,
        /// Checkpoint name inside the artifact directory.
        #[arg(long, default_value = "ratio")]
        tag: String,
    },
    /// Draw per-label samples into `samples/<name>`.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "cdr-rs")]
        method: MethodArg,
        #[arg(long, default_value = "ratio")]
        tag: String,
        /// Sample directory name; defaults to the method name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Compare a baseline sample directory with a subsampled one.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        subsampled: PathBuf,
    },
    /// Run a bundled preset end to end.
    Benchmark {
        preset: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn load(common: &Common) -> cdrs::Result<(ExperimentConfig, Artifacts)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, Artifacts::new(out)))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Mismatch(_) | Error::MissingArtifact(_) | Error::Checkpoint(_) => 3,
        Error::Schema(_) => 4,
        Error::BudgetExhausted { .. } => 5,
        _ => 1,
    }
}

fn report_failures(summary: &pipeline::SampleSummary) -> cdrs::Result<()> {
    let mut failed = summary.failures().peekable();
    let Some(first) = failed.peek().copied() else {
        return Ok(());
    };
    let exhausted = summary.labels.iter().any(|l| l.budget_exhausted);
    let n = failed.count();
    let msg = format!(
        "{n} label(s) failed; first at {}: {}",
        first.label,
        first.error.as_deref().unwrap_or("")
    );
    if exhausted {
        Err(Error::BudgetExhausted {
            label: first.label,
            accepted: first.accepted,
            proposed: first.proposed,
            rate: first.acceptance_rate,
        })
    } else {
        Err(Error::Unsupported(msg))
    }
}

fn print_table(path: &Path) -> cdrs::Result<()> {
    print!("{}", std::fs::read_to_string(path)?);
    Ok(())
}

fn run(cli: Cli) -> cdrs::Result<()> {
    match cli.command {
        Command::TrainSae(common) => {
            let (cfg, art) = load(&common)?;
            pipeline::train_sae_stage(&cfg, &art)?;
            println!("{}", art.sae().display());
        }
        Command::TrainCdre { common, tag } => {
            let (cfg, art) = load(&common)?;
            pipeline::train_cdre_stage(&cfg, &art, &tag)?;
            println!("{}", art.ratio(&tag).display());
        }
        Command::Sample {
            common,
            method,
            tag,
            name,
        } => {
            let (cfg, art) = load(&common)?;
            let (method, default_name) = match method {
                MethodArg::Baseline => (Method::Baseline, "baseline"),
                MethodArg::CdrRs => (Method::CdrRs, "cdr-rs"),
            };
            let name = name.unwrap_or_else(|| default_name.to_string());
            let summary = pipeline::sample_stage(&cfg, &art, &tag, method, &name, common.threads)?;
            println!("{}", art.samples(&name).display());
            report_failures(&summary)?;
        }
        Command::Evaluate {
            common,
            baseline,
            subsampled,
        } => {
            let (cfg, art) = load(&common)?;
            let out = art.dir.join("evaluation");
            pipeline::evaluate_stage(&cfg, &art, &baseline, &subsampled, &out)?;
            print_table(&out.join("comparison.csv"))?;
        }
        Command::Benchmark {
            preset,
            out,
            seed,
            threads,
        } => {
            let summary = pipeline::run_benchmark(&preset, &out, seed, threads)?;
            print_table(&out.join("summary.csv"))?;
            for (method, labels) in &summary.failures {
                log::warn!("{method}: sampling failed at labels {labels:?}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDRS_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `mocap`: statistics, augmentation, cleaning, solving, training and
//! evaluation over JSON marker and motion files.
//!
//! Success prints `{"command": ..., "outputs": [...]}` on stdout. Failure
//! prints `{"error": {"kind": ..., "message": ...}}` on stdout, a plain
//! message on stderr, and exits nonzero.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mocap::MocapError;
use serde_json::json;

use commands::{CleanArgs, EvalArgs, Stage, Which};
use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "mocap", version, about = "Marker cleaning and skeletal solving pipeline")]
struct Cli {
    /// Pipeline config JSON; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (clean and corrupted sequences, motions, masks).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Occlusion statistics; defaults to a heavy-tailed profile.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Occlusion statistics and fill/solve neighbor tables.
    Stats {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt clean sequences with occlusion gaps and shifts.
    Augment {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fill gaps, repair outliers and optionally refine the filled entries.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        neighbors: Option<PathBuf>,
        /// Refiner model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
    },
    /// Solve skeletal motion from a cleaned sequence.
    Solve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bvh: Option<PathBuf>,
    },
    /// Train the refiner or the solver on a generated dataset.
    Train {
        #[arg(value_enum)]
        which: Which,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// OMPE between sequences, or JOE and JPE between motions.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Corruption mask whose occluded entries are scored.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics as `metric,value` CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        per_frame: Option<PathBuf>,
    },
}

fn error_kind(e: &MocapError) -> &'static str {
    match e {
        MocapError::Parse { .. } | MocapError::Json(_) => "parse",
        MocapError::Invariant { .. } => "invalid",
        MocapError::Shape(_) => "mismatch",
        MocapError::Degenerate(_) | MocapError::Eigen => "degenerate",
        MocapError::Invisible { .. } => "invisible",
        MocapError::NoOcclusionProfile => "no_occlusion_profile",
        MocapError::NonFiniteLoss { .. } => "non_finite_loss",
        MocapError::Nn(_) => "model",
        MocapError::Io { .. } => "io",
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<String>, name: &str, key: &str) -> mocap::Result<PathBuf> {
    flag.or_else(|| fallback.as_ref().map(PathBuf::from)).ok_or_else(|| MocapError::Invariant {
        what: "arguments",
        check: format!("--{name} is required (or set paths.{key} in the config)"),
    })
}

fn run(cli: Cli) -> mocap::Result<(&'static str, Vec<PathBuf>)> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let paths = config.paths.clone();
    let opt = |p: &Option<PathBuf>, fallback: &Option<String>| p.clone().or_else(|| fallback.as_ref().map(PathBuf::from));
    Ok(match cli.command {
        Command::Generate { out, seed, stats } => {
            let seed = config.resolve_seed(seed)?;
            ("generate", commands::generate(&config, seed, stats.as_deref(), &out)?)
        }
        Command::Stats { input, out } => ("stats", commands::stats(&config, &input, &out)?),
        Command::Augment { input, stats, out, seed } => {
            let seed = config.resolve_seed(seed)?;
            let stats = required(stats, &paths.stats, "stats", "stats")?;
            ("augment", commands::augment(&config, seed, &input, &stats, &out)?)
        }
        Command::Clean {
            input,
            out,
            neighbors,
            model,
            report,
            stage,
        } => {
            let neighbors = opt(&neighbors, &paths.neighbors);
            let model = opt(&model, &paths.refiner);
            let args = CleanArgs {
                input: &input,
                model: model.as_deref(),
                neighbors: neighbors.as_deref(),
                out: &out,
                report: report.as_deref(),
                stage,
            };
            ("clean", commands::clean(&config, &args)?)
        }
        Command::Solve { input, model, out, bvh } => {
            let model = required(model, &paths.solver, "model", "solver")?;
            ("solve", commands::solve(&config, &input, &model, &out, bvh.as_deref())?)
        }
        Command::Train {
            which,
            dataset,
            out,
            log,
            seed,
        } => {
            let seed = config.resolve_seed(seed)?;
            ("train", commands::train(&config, seed, which, &dataset, &out, &log)?)
        }
        Command::Eval {
            pred,
            truth,
            mask,
            out,
            csv,
            per_frame,
        } => {
            let args = EvalArgs {
                mask: mask.as_deref(),
                out: &out,
                per_frame: per_frame.as_deref(),
                pred: &pred,
                table: csv.as_deref(),
                truth: &truth,
            };
            ("eval", commands::eval(&args)?)
        }
    })
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.kind().to_string();
            println!("{}", json!({ "error": { "kind": "usage", "message": message } }));
            eprint!("{e}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok((command, outputs)) => {
            let outputs: Vec<String> = outputs.iter().map(|p| display(p)).collect();
            println!("{}", json!({ "command": command, "outputs": outputs }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", json!({ "error": { "kind": error_kind(&e), "message": e.to_string() } }));
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! `optimerge` — extract distribution vectors, merge checkpoints, search
//! merge weights, and analyze the resulting vector geometry.
//!
//! Exit codes: 0 success, 1 runtime/I-O failure, 2 validation failure,
//! 3 evaluator failure that exhausted a whole batch.

mod commands;
mod config;
mod digest;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use optimerge_core::analysis::AnalysisError;
use optimerge_core::evaluator::EvalError;
use optimerge_core::merge::MergeError;
use optimerge_core::optimizer::OptimizerError;
use optimerge_core::space::SpaceError;
use optimerge_core::tensor::TensorStoreError;
use optimerge_core::vectors::VectorError;

#[derive(Parser)]
#[command(
    name = "optimerge",
    version,
    about = "Checkpoint merging with black-box merge-weight search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a distribution vector (fine-tuned minus base).
    Extract {
        /// Base checkpoint container.
        #[arg(long)]
        base: PathBuf,
        /// Fine-tuned checkpoint container.
        #[arg(long)]
        tuned: PathBuf,
        /// Output distribution-vector file.
        #[arg(long)]
        out: PathBuf,
        /// Exclusion substring pattern; repeatable. Replaces the default
        /// list (embed_tokens, lm_head, rotary).
        #[arg(long = "exclude")]
        excludes: Vec<String>,
        /// Exclude nothing, not even the defaults.
        #[arg(long, conflicts_with = "excludes")]
        no_exclusions: bool,
        /// Label stored as the vector's source identity (defaults to the
        /// tuned file's digest).
        #[arg(long)]
        label: Option<String>,
    },
    /// Merge once at the explicit weights in the config.
    Merge {
        /// Run configuration (TOML, or JSON by extension).
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path (default `<output_dir>/merged.st`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search merge weights with the model-based sampler.
    Optimize {
        /// Run configuration (TOML, or JSON by extension).
        #[arg(long)]
        config: PathBuf,
        /// Continue an interrupted study in `<output_dir>/study.jsonl`.
        #[arg(long)]
        resume: bool,
        /// Concurrent evaluator workers per batch.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Override the bounds of every non-IT dimension: LOW HIGH.
        #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], allow_negative_numbers = true)]
        range: Option<Vec<f64>>,
        /// Keep each trial's merged checkpoint on disk.
        #[arg(long)]
        keep_trials: bool,
    },
    /// Exhaustive grid sweep over the search space.
    Grid {
        /// Run configuration (TOML, or JSON by extension).
        #[arg(long)]
        config: PathBuf,
        /// Grid points per dimension (the sweep costs points^dims).
        #[arg(long)]
        points: usize,
        /// Allow sweeps beyond the built-in point cap.
        #[arg(long)]
        force: bool,
        /// Keep each trial's merged checkpoint on disk.
        #[arg(long)]
        keep_trials: bool,
    },
    /// Similarity, norms, and projection analyses over vectors.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Trial table and wall-clock summary of a study log.
    Report {
        /// Study JSONL file.
        study: PathBuf,
        /// Write the trial table CSV here instead of standard output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the summary JSON here (default: standard error, or
        /// standard output when --csv is given).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Pairwise cosine-similarity matrix over two or more vectors.
    Cosine {
        /// Distribution-vector files.
        #[arg(num_args = 2.., required = true)]
        vectors: Vec<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Per-tensor cosine between two vectors.
    Layerwise {
        left: PathBuf,
        right: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// L2 norm of each vector.
    Norms {
        #[arg(num_args = 1.., required = true)]
        vectors: Vec<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Fit a two-component projection basis over two or more vectors.
    Pca {
        #[arg(num_args = 2.., required = true)]
        vectors: Vec<PathBuf>,
        /// Singular-value truncation rank applied to 2-D tensors first.
        #[arg(long, default_value_t = 16)]
        rank: usize,
        /// Skip the truncation and fit on dense vectors.
        #[arg(long)]
        raw: bool,
        /// Where to store the fitted basis (container file).
        #[arg(long)]
        basis: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Project vectors into a previously fitted basis.
    Project {
        /// Basis container produced by `analyze pca`.
        #[arg(long)]
        basis: PathBuf,
        #[arg(num_args = 1.., required = true)]
        vectors: Vec<PathBuf>,
        /// Truncation rank; must match how the basis was fitted.
        #[arg(long, default_value_t = 16)]
        rank: usize,
        /// Skip truncation; must match how the basis was fitted.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Extract {
            base,
            tuned,
            out,
            excludes,
            no_exclusions,
            label,
        } => commands::cmd_extract(&base, &tuned, &out, &excludes, no_exclusions, label.as_deref()),
        Command::Merge { config, out } => commands::cmd_merge(&config, out.as_deref()),
        Command::Optimize {
            config,
            resume,
            parallel,
            range,
            keep_trials,
        } => {
            let range = range.map(|r| (r[0], r[1]));
            pipeline::cmd_optimize(&config, resume, parallel, range, keep_trials)
        }
        Command::Grid {
            config,
            points,
            force,
            keep_trials,
        } => pipeline::cmd_grid(&config, points, force, keep_trials),
        Command::Analyze { what } => match what {
            AnalyzeCommand::Cosine { vectors, output } => {
                commands::cmd_analyze_cosine(&vectors, output.json, output.out.as_deref())
            }
            AnalyzeCommand::Layerwise {
                left,
                right,
                output,
            } => commands::cmd_analyze_layerwise(&left, &right, output.json, output.out.as_deref()),
            AnalyzeCommand::Norms { vectors, output } => {
                commands::cmd_analyze_norms(&vectors, output.json, output.out.as_deref())
            }
            AnalyzeCommand::Pca {
                vectors,
                rank,
                raw,
                basis,
                output,
            } => commands::cmd_analyze_pca(
                &vectors,
                rank,
                raw,
                &basis,
                output.json,
                output.out.as_deref(),
            ),
            AnalyzeCommand::Project {
                basis,
                vectors,
                rank,
                raw,
                output,
            } => commands::cmd_analyze_project(
                &basis,
                &vectors,
                rank,
                raw,
                output.json,
                output.out.as_deref(),
            ),
        },
        Command::Report {
            study,
            csv,
            summary,
        } => commands::cmd_report(&study, csv.as_deref(), summary.as_deref()),
    }
}

/// Map an error chain to the documented exit codes.
///
/// A batch-exhausting evaluator failure wins (3); an I/O cause anywhere in
/// the chain is a runtime failure (1); every recognized domain error is a
/// validation failure (2); anything unrecognized is runtime (1).
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if matches!(
            cause.downcast_ref::<OptimizerError>(),
            Some(OptimizerError::BatchExhausted { .. })
        ) {
            return 3;
        }
    }
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() || io_rooted(cause) {
            return 1;
        }
    }
    for cause in err.chain() {
        if cause.downcast_ref::<config::ConfigError>().is_some()
            || cause.downcast_ref::<VectorError>().is_some()
            || cause.downcast_ref::<MergeError>().is_some()
            || cause.downcast_ref::<AnalysisError>().is_some()
            || cause.downcast_ref::<TensorStoreError>().is_some()
            || cause.downcast_ref::<OptimizerError>().is_some()
            || cause.downcast_ref::<SpaceError>().is_some()
            || cause.downcast_ref::<EvalError>().is_some()
        {
            return 2;
        }
    }
    1
}

/// True when `cause` is an I/O failure hiding inside a transparent domain
/// wrapper. Transparent errors forward `source()` past the value they wrap,
/// so the underlying `io::Error` never appears as its own chain entry.
fn io_rooted(cause: &(dyn std::error::Error + 'static)) -> bool {
    if let Some(e) = cause.downcast_ref::<TensorStoreError>() {
        return matches!(e, TensorStoreError::Io(_));
    }
    if let Some(e) = cause.downcast_ref::<VectorError>() {
        return matches!(e, VectorError::Store(TensorStoreError::Io(_)));
    }
    if let Some(e) = cause.downcast_ref::<MergeError>() {
        return matches!(
            e,
            MergeError::Store(TensorStoreError::Io(_))
                | MergeError::Vector(VectorError::Store(TensorStoreError::Io(_)))
        );
    }
    if let Some(e) = cause.downcast_ref::<AnalysisError>() {
        return matches!(e, AnalysisError::Store(TensorStoreError::Io(_)));
    }
    if let Some(e) = cause.downcast_ref::<OptimizerError>() {
        return matches!(e, OptimizerError::Io(_));
    }
    false
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

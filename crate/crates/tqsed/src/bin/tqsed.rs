//! Operator entry point: data synthesis, both training stages, separation
//! inference, evaluation and report rendering. Each run prints a one-line
//! JSON summary on stdout; failures print machine-readable JSON on stderr
//! and leave a `_FAILED` marker in the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tqsed::config::RunConfig;
use tqsed::pipeline;
use tqsed::training::Framework;

#[derive(Parser)]
#[command(
    name = "tqsed",
    version,
    about = "Text-queried sound event detection: query-conditioned separation plus per-event detection branches"
)]
struct Cli {
    /// Run configuration TOML; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; defaults to $TQSED_OUT_ROOT/<command> or
    /// ./tqsed_out/<command>.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Deterministic mode: recorded in reports; all computation in this
    /// binary is single-threaded and seeded either way.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Overrides branch conv filters (the published complexity sweep).
    #[arg(long, global = true, value_parser = ["16", "32", "64", "128"])]
    conv_filters: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic polyphonic dataset with stems and labels.
    Synth {
        /// Number of clips.
        #[arg(long, default_value_t = 100)]
        clips: usize,
    },
    /// Pretrain the separator on a caption manifest (stems + captions).
    TrainLass {
        /// manifest_lass.jsonl path.
        #[arg(long)]
        data: PathBuf,
        /// Ablate the dual-path recurrent bottleneck.
        #[arg(long)]
        no_dprnn: bool,
    },
    /// Evaluate separation quality (SDR/SDRI/SI-SDR) over a dataset.
    EvalLass {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Separator checkpoint (`final.tqck`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use reference stems as estimates (metric-path smoke test).
        #[arg(long)]
        oracle_stems: bool,
    },
    /// Separate one WAV for one text query.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Event label or caption to extract.
        #[arg(long)]
        query: String,
        #[arg(long)]
        output: PathBuf,
        /// Resample inputs at other rates (band-limited sinc).
        #[arg(long)]
        resample: bool,
    },
    /// Train a detector with cross-validation.
    TrainSed {
        /// tq_sed | base1 | base2.
        #[arg(long)]
        framework: String,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Frozen separator checkpoint (required for tq_sed).
        #[arg(long)]
        separator_checkpoint: Option<PathBuf>,
        /// Train only these folds (default: all).
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Evaluate trained detector folds on their held-out clips.
    EvalSed {
        #[arg(long)]
        framework: String,
        /// Directory holding fold*.tqck checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        separator_checkpoint: Option<PathBuf>,
    },
    /// Render a metrics report into CSV tables and optional plots.
    Report {
        /// metrics.json produced by eval-lass or eval-sed.
        #[arg(long)]
        metrics: PathBuf,
        /// Also write an SVG bar chart of per-class F1.
        #[arg(long)]
        plots: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainLass { .. } => "train-lass",
            Command::EvalLass { .. } => "eval-lass",
            Command::Separate { .. } => "separate",
            Command::TrainSed { .. } => "train-sed",
            Command::EvalSed { .. } => "eval-sed",
            Command::Report { .. } => "report",
        }
    }
}

fn default_out_dir(command: &str) -> PathBuf {
    let root = std::env::var_os("TQSED_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("tqsed_out"));
    root.join(command)
}

fn run(cli: Cli) -> tqsed::Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(filters) = &cli.conv_filters {
        cfg.branch.conv_filters = filters.parse().expect("validated by clap");
    }
    let out_dir = cli
        .out_dir
        .clone()
        .unwrap_or_else(|| default_out_dir(cli.command.name()));

    match &cli.command {
        Command::Synth { clips } => pipeline::cmd_synth(&cfg, *clips, &out_dir),
        Command::TrainLass { data, no_dprnn } => {
            pipeline::cmd_train_lass(&cfg, data, &out_dir, no_dprnn.then_some(false))
        }
        Command::EvalLass {
            data,
            checkpoint,
            oracle_stems,
        } => pipeline::cmd_eval_lass(
            &cfg,
            checkpoint.as_deref(),
            data,
            &out_dir,
            *oracle_stems,
            cli.deterministic,
        ),
        Command::Separate {
            checkpoint,
            input,
            query,
            output,
            resample,
        } => pipeline::cmd_separate(checkpoint, input, query, output, *resample),
        Command::TrainSed {
            framework,
            data,
            separator_checkpoint,
            folds,
        } => pipeline::cmd_train_sed(
            &cfg,
            Framework::parse(framework)?,
            data,
            separator_checkpoint.as_deref(),
            &out_dir,
            folds.as_deref(),
        ),
        Command::EvalSed {
            framework,
            checkpoints,
            data,
            separator_checkpoint,
        } => pipeline::cmd_eval_sed(
            &cfg,
            Framework::parse(framework)?,
            checkpoints,
            data,
            separator_checkpoint.as_deref(),
            &out_dir,
            cli.deterministic,
        ),
        Command::Report { metrics, plots } => pipeline::cmd_report(metrics, &out_dir, *plots),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = cli
        .out_dir
        .clone()
        .unwrap_or_else(|| default_out_dir(cli.command.name()));
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            pipeline::mark_failed(&out_dir, &err);
            eprintln!("{}", pipeline::error_json(&err));
            ExitCode::FAILURE
        }
    }
}

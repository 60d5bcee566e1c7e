//! `dbfusion`: one entry point for dataset generation, the two training
//! stages, the alignment probe, feature ablations, and PCA visualizations.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::ProbeFlags;
use config::{CliError, CliResult, FileConfig};

#[derive(Parser, Debug)]
#[command(
    name = "dbfusion",
    version,
    about = "A desk-scale laboratory for depth-breadth feature fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON config file; flags override its keys
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for model init, batch order, and data [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Square patch extent in pixels [default: 8]
    #[arg(long)]
    patch: Option<usize>,
    /// Raw patch-feature width [default: 32]
    #[arg(long)]
    d_backbone: Option<usize>,
    /// Multimodal feature width [default: 64]
    #[arg(long)]
    d: Option<usize>,
    /// Prompt-conditioned encoder blocks [default: 2]
    #[arg(long)]
    encoder_layers: Option<usize>,
    /// Vision-side attention heads [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Positional budget for prompt tokens [default: 12]
    #[arg(long)]
    n_t_max: Option<usize>,
    /// Square image extent in pixels [default: 64]
    #[arg(long)]
    image: Option<usize>,
    /// Language-model width [default: 128]
    #[arg(long)]
    d_model: Option<usize>,
    /// Language-model blocks [default: 4]
    #[arg(long)]
    lm_layers: Option<usize>,
    /// Language-model attention heads [default: 4]
    #[arg(long)]
    lm_heads: Option<usize>,
    /// Vocabulary size [default: 512]
    #[arg(long)]
    vocab: Option<usize>,
    /// Positional budget for vision rows plus text [default: 256]
    #[arg(long)]
    max_seq: Option<usize>,
    /// Fusion strategy: token | pool | channel [default: channel]
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args, Debug, Default)]
struct StageArgs {
    /// Optimizer steps [default: 2000 pretrain, 1000 finetune]
    #[arg(long)]
    steps: Option<usize>,
    /// Samples per step [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate [default: 3e-4 pretrain, 1e-4 finetune]
    #[arg(long)]
    lr_max: Option<f64>,
    /// Final learning rate [default: 0]
    #[arg(long)]
    lr_min: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct ProbeArgs {
    /// Projection-training steps [default: 500]
    #[arg(long)]
    steps: Option<usize>,
    /// Projection learning rate [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Seed count; runs use seeds 0..N [default: 3]
    #[arg(long)]
    seeds: Option<usize>,
    /// Keep only the first N filtered records, 0 = all [default: 0]
    #[arg(long)]
    limit: Option<usize>,
    /// Record filter: all | text-heavy [default: all]
    #[arg(long)]
    subset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: images/ plus manifest.jsonl
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Output dataset directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of records [default: 5000]
        #[arg(long)]
        n: Option<usize>,
        /// Scene-mix weights shapes,glyphs,both [default: 1,1,1]
        #[arg(long)]
        mix: Option<String>,
    },
    /// Stage 1: caption pretraining from a fresh seeded model
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        stage: StageArgs,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for config, losses, and checkpoints
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: instruction finetuning; the vision encoder stays frozen
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        stage: StageArgs,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for config, losses, and checkpoints
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage-1 checkpoint to start from
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the alignment probe for one feature subset
    Align {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        probe: ProbeArgs,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for reports and the summary
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to analyze; omitted = fresh seeded model
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-joined features to fuse [default: depth,caption,ocr,grounding]
        #[arg(long)]
        mask: Option<String>,
    },
    /// Compare the full bundle against leave-one-out subsets
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        probe: ProbeArgs,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for reports and the summary
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to analyze; omitted = fresh seeded model
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-joined features to drop one at a time [default: depth,caption,ocr,grounding]
        #[arg(long)]
        remove: Option<String>,
    },
    /// Render PCA foreground maps for one record's features
    Viz {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for PPM images and sidecars
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to analyze; omitted = fresh seeded model
        #[arg(long)]
        init: Option<PathBuf>,
        /// Manifest record id to visualize
        #[arg(long)]
        record: Option<u64>,
        /// Comma-joined features to render [default: depth,caption,ocr,grounding]
        #[arg(long)]
        tasks: Option<String>,
        /// Pixels per patch cell [default: 8]
        #[arg(long)]
        scale: Option<usize>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, out, n, mix } => {
            let fc = merged(&common, None, None, None, out.as_ref(), None)?;
            commands::gen_data(fc, n, mix)
        }
        Command::Pretrain { common, model, stage, data, out } => {
            let fc = merged(&common, Some(&model), Some(&stage), data.as_ref(), out.as_ref(), None)?;
            commands::pretrain(fc)
        }
        Command::Finetune { common, model, stage, data, out, init } => {
            let fc =
                merged(&common, Some(&model), Some(&stage), data.as_ref(), out.as_ref(), init.as_ref())?;
            commands::finetune(fc)
        }
        Command::Align { common, model, probe, data, out, init, mask } => {
            let fc = merged(&common, Some(&model), None, data.as_ref(), out.as_ref(), init.as_ref())?;
            commands::align(fc, probe_flags(&probe), mask)
        }
        Command::Ablate { common, model, probe, data, out, init, remove } => {
            let fc = merged(&common, Some(&model), None, data.as_ref(), out.as_ref(), init.as_ref())?;
            commands::ablate(fc, probe_flags(&probe), remove)
        }
        Command::Viz { common, model, data, out, init, record, tasks, scale } => {
            let fc = merged(&common, Some(&model), None, data.as_ref(), out.as_ref(), init.as_ref())?;
            commands::viz(fc, record, tasks, scale)
        }
    }
}

/// Load the optional config file, then overlay whatever flags were given.
fn merged(
    common: &CommonArgs,
    model: Option<&ModelArgs>,
    stage: Option<&StageArgs>,
    data: Option<&PathBuf>,
    out: Option<&PathBuf>,
    init: Option<&PathBuf>,
) -> CliResult<FileConfig> {
    let file = FileConfig::load(common.config.as_deref())?;
    let flags = FileConfig {
        patch: model.and_then(|m| m.patch),
        d_backbone: model.and_then(|m| m.d_backbone),
        d: model.and_then(|m| m.d),
        encoder_layers: model.and_then(|m| m.encoder_layers),
        heads: model.and_then(|m| m.heads),
        n_t_max: model.and_then(|m| m.n_t_max),
        image: model.and_then(|m| m.image),
        d_model: model.and_then(|m| m.d_model),
        lm_layers: model.and_then(|m| m.lm_layers),
        lm_heads: model.and_then(|m| m.lm_heads),
        vocab: model.and_then(|m| m.vocab),
        max_seq: model.and_then(|m| m.max_seq),
        strategy: model.and_then(|m| m.strategy.clone()),
        steps: stage.and_then(|s| s.steps),
        batch: stage.and_then(|s| s.batch),
        lr_max: stage.and_then(|s| s.lr_max),
        lr_min: stage.and_then(|s| s.lr_min),
        seed: common.seed,
        data: data.map(|p| p.display().to_string()),
        out: out.map(|p| p.display().to_string()),
        init: init.map(|p| p.display().to_string()),
    };
    Ok(file.merged_with(flags))
}

fn probe_flags(p: &ProbeArgs) -> ProbeFlags {
    ProbeFlags {
        steps: p.steps,
        lr: p.lr,
        seeds: p.seeds,
        limit: p.limit,
        subset: p.subset.clone(),
    }
}

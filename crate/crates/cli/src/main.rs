use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdre::commands::{self, EvalArgs, TrainOverrides};
use cdre::files::DATA_DIR_ENV;
use cdre::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "cdre",
    version,
    about = "Distortion-representation pipeline: data generation, training, side-channel coding, rate-task evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset to a directory of PNGs.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        /// Output directory; defaults to $CDRE_DATA_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model (regimes: backbone, fd, joint).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override training.regime from the config.
        #[arg(long)]
        regime: Option<String>,
        /// Override the root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override cdre.channels.
        #[arg(long)]
        channels: Option<usize>,
        /// Override cdre.embedding_depth.
        #[arg(long)]
        depth: Option<usize>,
        /// Resume from a checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a pair's distortion evidence into a side-channel bitstream.
    EncodeDist {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        compressed: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base-codec rate of the pair, echoed into bookkeeping.
        #[arg(long, default_value_t = 0.0)]
        base_bpp: f64,
    },
    /// Decode a side-channel bitstream into the distortion feature.
    DecodeDist {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint into a rate-task curve file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated base-codec qualities, e.g. 10,30,50,70.
        #[arg(long, value_parser = parse_qualities)]
        qualities: Option<std::vec::Vec<u8>>,
        /// Include the side-channel rate in each point: on|off.
        #[arg(long, value_parser = parse_on_off)]
        include_side_channel: Option<bool>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bjøntegaard delta-rate between two curve files.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Parameter, MACs-per-pixel, and side-rate accounting.
    Overhead {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 720)]
        height: usize,
        #[arg(long, default_value_t = 1280)]
        width: usize,
    },
    /// Train/evaluate an ablation grid: extractor_parts, embedding_depth, channels.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_qualities(s: &str) -> std::result::Result<Vec<u8>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<u8>().map_err(|e| format!("bad quality `{p}`: {e}")))
        .collect()
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on|off, got `{other}`")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { seed, n, out } => {
            let out = out
                .or_else(|| std::env::var(DATA_DIR_ENV).ok().map(PathBuf::from))
                .ok_or_else(|| {
                    CliError::Usage(format!("--out or ${DATA_DIR_ENV} is required"))
                })?;
            commands::cmd_gen_data(seed, n, &out)
        }
        Cmd::Train {
            config,
            regime,
            seed,
            channels,
            depth,
            resume,
            out,
        } => commands::cmd_train(
            &config,
            &TrainOverrides {
                seed,
                regime,
                channels,
                depth,
            },
            resume.as_deref(),
            &out,
        ),
        Cmd::EncodeDist {
            original,
            compressed,
            checkpoint,
            out,
            base_bpp,
        } => commands::cmd_encode_dist(&original, &compressed, &checkpoint, &out, base_bpp),
        Cmd::DecodeDist {
            input,
            checkpoint,
            out,
        } => commands::cmd_decode_dist(&input, &checkpoint, &out),
        Cmd::Eval {
            checkpoint,
            config,
            qualities,
            include_side_channel,
            label,
            out,
        } => commands::cmd_eval(
            &checkpoint,
            config.as_deref(),
            &EvalArgs {
                qualities,
                include_side_channel,
                label,
            },
            &out,
        ),
        Cmd::Bdrate { anchor, test } => commands::cmd_bdrate(&anchor, &test),
        Cmd::Overhead {
            checkpoint,
            height,
            width,
        } => commands::cmd_overhead(&checkpoint, height, width),
        Cmd::Ablate {
            kind,
            config,
            out_dir,
        } => commands::cmd_ablate(&kind, &config, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

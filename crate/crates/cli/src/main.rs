//! `birdplan`: decompose, index, plan, train, render, stitch and evaluate
//! large aerial reconstructions.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{FixtureArgs, TrainArgs};
use settings::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "birdplan", version, about = "Sub-scene planning pipeline for large bird-view reconstructions")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split the cameras of a sparse reconstruction into overlapping sub-scenes.
    Decompose {
        #[arg(long = "recon-dir")]
        recon_dir: PathBuf,
        /// Partition JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the ground plane and index camera and sub-scene footprints.
    Index {
        #[arg(long = "recon-dir")]
        recon_dir: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        /// Index JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Register query cameras against the footprint index.
    Plan {
        #[arg(long)]
        index: PathBuf,
        /// Query cameras JSON.
        #[arg(long)]
        queries: PathBuf,
        /// Plans JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per sub-scene; resumes from an existing manifest.
    Train {
        #[arg(long = "recon-dir")]
        recon_dir: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Output directory for the manifest, models and datasets.
        #[arg(long)]
        out: PathBuf,
        /// Scene file of a synthetic fixture (synthetic engine only).
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Directory of training images (external engine only).
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Render every planned query from its sub-scene models.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plans: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Output directory for partial renders.
        #[arg(long)]
        out: PathBuf,
    },
    /// Composite partial renders into one image per query.
    Stitch {
        #[arg(long)]
        plans: PathBuf,
        /// Directory written by `render`.
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare rendered images with ground truth (PSNR and SSIM).
    Eval {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long = "ground-truth")]
        ground_truth: PathBuf,
        /// Optional metrics JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic nadir survey with ground-truth query renders.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        /// Fixture spec (TOML or JSON); defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long = "noise-seed")]
        noise_seed: Option<u64>,
        #[arg(long = "jitter-seed")]
        jitter_seed: Option<u64>,
        /// Skip writing training images.
        #[arg(long = "no-images")]
        no_images: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Eval {
            rendered,
            ground_truth,
            out,
        } => return commands::eval(rendered, ground_truth, out.as_deref()),
        Command::MakeFixture {
            out,
            spec,
            queries,
            noise_seed,
            jitter_seed,
            no_images,
        } => {
            return commands::make_fixture(&FixtureArgs {
                out,
                spec: spec.as_deref(),
                queries: *queries,
                noise_seed: *noise_seed,
                jitter_seed: *jitter_seed,
                no_images: *no_images,
            })
        }
        _ => {}
    }

    let config = cli.config.resolve()?;
    match &cli.command {
        Command::Decompose { recon_dir, out } => commands::decompose(&config, recon_dir, out),
        Command::Index {
            recon_dir,
            partition,
            out,
        } => commands::index(&config, recon_dir, partition, out),
        Command::Plan { index, queries, out } => commands::plan(&config, index, queries, out),
        Command::Train {
            recon_dir,
            partition,
            index,
            out,
            scene,
            images,
        } => commands::train(
            &config,
            &TrainArgs {
                recon_dir,
                partition,
                index,
                out,
                scene: scene.as_deref(),
                images: images.as_deref(),
            },
        ),
        Command::Render {
            manifest,
            plans,
            queries,
            out,
        } => commands::render_stage(&config, manifest, plans, queries, out),
        Command::Stitch { plans, renders, out } => commands::stitch_stage(&config, plans, renders, out),
        Command::Eval { .. } | Command::MakeFixture { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

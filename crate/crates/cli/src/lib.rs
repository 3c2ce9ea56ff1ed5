//! Command-line pipeline over the `ppmsplat` library.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ppmsplat::metrics::AteAlignment;
use ppmsplat::{Error, Result};

use crate::commands::{Context, RefineInputs};
use crate::config::PipelineConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AteArg {
    Rigid,
    Similarity,
}

#[derive(Debug, Parser)]
#[command(name = "ppmsplat", version, about = "Submap alignment and joint pose/Gaussian refinement")]
pub struct Cli {
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding `rng_seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Keep the closed-form estimate for every submap pair.
    #[arg(long, global = true)]
    pub closed_form_only: bool,
    /// Optimize Gaussians only.
    #[arg(long, global = true)]
    pub freeze_poses: bool,
    #[arg(long, global = true, value_enum)]
    pub ate_alignment: Option<AteArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene, images and submaps.
    Synth { out: PathBuf },
    /// Chain the submaps in a directory into one global frame.
    Align { input: PathBuf, out: PathBuf },
    /// Seed Gaussians from an aligned cloud and refine them with the poses.
    Refine {
        align_dir: PathBuf,
        images_dir: PathBuf,
        out: PathBuf,
        /// Start from this scene instead of anchors.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Reference trajectory for reporting ATE.
        #[arg(long)]
        gt_poses: Option<PathBuf>,
    },
    /// Render a scene at every pose of a trajectory.
    Render {
        scene: PathBuf,
        poses: PathBuf,
        camera: PathBuf,
        out: PathBuf,
    },
    /// ATE, PSNR and SSIM of an estimate against ground truth.
    Eval {
        est: PathBuf,
        gt: PathBuf,
        /// Report directory; defaults to the estimate directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage into one run directory.
    Full {
        /// Run directory; defaults to `paths.output` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_FAILURE
    } else {
        EXIT_USAGE
    }
}

/// Loads the config and applies flag overrides other than the seed.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.align.closed_form_only |= cli.closed_form_only;
    cfg.joint.freeze_poses |= cli.freeze_poses;
    if let Some(a) = cli.ate_alignment {
        cfg.eval.ate_alignment = match a {
            AteArg::Rigid => AteAlignment::Rigid,
            AteArg::Similarity => AteAlignment::Similarity,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, ctx: &Context) -> Result<()> {
    match &cli.command {
        Command::Synth { out } => commands::cmd_synth(ctx, out).map(drop),
        Command::Align { input, out } => commands::cmd_align(ctx, input, out).map(drop),
        Command::Refine {
            align_dir,
            images_dir,
            out,
            scene,
            gt_poses,
        } => {
            let inputs = RefineInputs {
                scene: scene.clone(),
                gt_poses: gt_poses.clone(),
            };
            commands::cmd_refine(ctx, align_dir, images_dir, out, &inputs).map(drop)
        }
        Command::Render { scene, poses, camera, out } => commands::cmd_render(scene, poses, camera, out).map(drop),
        Command::Eval { est, gt, out } => commands::cmd_eval(ctx, est, gt, out.as_deref().unwrap_or(est)).map(drop),
        Command::Full { out } => {
            let dir = out.clone().unwrap_or_else(|| ctx.config.paths.output.clone());
            commands::cmd_full(ctx, &dir).map(drop)
        }
    }
}

fn report(e: &Error) {
    let mut msg = format!("error: {e}");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        msg.push_str(&format!("\n  caused by: {s}"));
        src = s.source();
    }
    eprintln!("{msg}");
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            report(&e);
            return exit_code(&e);
        }
    };
    let ctx = Context::new(cfg, cli.seed);
    let outcome = match cli.threads {
        Some(0) => Err(Error::spec("threads", "must be >= 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, &ctx)),
            Err(e) => Err(Error::spec("threads", e.to_string())),
        },
        None => dispatch(&cli, &ctx),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report(&e);
            exit_code(&e)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use deblur3d::cli::{
    cmd_eval, cmd_fit, cmd_render, cmd_synth, cmd_tsr, EvalArgs, FitArgs, RenderArgs, SynthArgs,
    TsrArgs,
};
use deblur3d::eval::TrajectoryKind;
use deblur3d::Error;

#[derive(Parser)]
#[command(
    version,
    about = "Recover shape, texture, 6-DoF motion and exposure gap from motion-blurred video"
)]
struct Cli {
    /// Worker threads (default: logical core count).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit mesh, texture, motion and exposure gap to a frame directory.
    Fit(FitCli),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthCli),
    /// Temporal super-resolution from a fit directory.
    Tsr(TsrCli),
    /// Score a fit directory against a synthetic scene directory.
    Eval(EvalCli),
    /// Re-render the blurred input frames of a fit directory.
    Render(RenderCli),
}

#[derive(Args)]
struct FitCli {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Known static background (linear 16-bit PNG); estimated when absent.
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    subframes: Option<usize>,
    /// Focal length in pixels (default: image width).
    #[arg(long)]
    focal: Option<f64>,
    /// Config override, repeatable: --set iterations=200
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthCli {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    rotation_cap: f64,
    #[arg(long, default_value_t = 3)]
    n_frames: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    subframes: usize,
    #[arg(long, default_value_t = 8)]
    factor: usize,
    /// Reverse the velocity at a random knot time.
    #[arg(long)]
    bounce: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TsrCli {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, default_value_t = 8)]
    factor: usize,
    #[arg(long)]
    out: PathBuf,
    /// Scene directory whose high-speed frames are used for scoring.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Per-sub-frame CSV; a JSON report is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderCli {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subframes: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Fit(a) => {
            let outcome = cmd_fit(&FitArgs {
                frames: a.frames,
                masks: a.masks,
                background: a.background,
                config: a.config,
                out: a.out,
                seed: a.seed,
                window: a.window,
                sub_frames: a.subframes,
                focal: a.focal,
                set: a.set,
            })?;
            log::info!("wrote {}", outcome.motion_path.display());
        }
        Command::Synth(a) => {
            let mut args = SynthArgs::new(a.seed, a.rotation_cap, a.n_frames, a.out);
            args.config.size = a.size;
            args.config.sub_frames = a.subframes;
            args.config.high_speed_factor = a.factor;
            if a.bounce {
                args.config.trajectory = TrajectoryKind::Bounce;
            }
            cmd_synth(&args)?;
        }
        Command::Tsr(a) => {
            let n = cmd_tsr(&TsrArgs {
                fit: a.fit,
                factor: a.factor,
                out: a.out,
                ground_truth: a.gt,
            })?;
            log::info!("wrote {n} frames");
        }
        Command::Eval(a) => {
            cmd_eval(&EvalArgs {
                fit: a.fit,
                ground_truth: a.gt,
                out: a.out,
            })?;
        }
        Command::Render(a) => {
            let n = cmd_render(&RenderArgs {
                fit: a.fit,
                out: a.out,
                sub_frames: a.subframes,
            })?;
            log::info!("wrote {n} frames");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input = e
                .downcast_ref::<Error>()
                .is_none_or(Error::is_input_error);
            ExitCode::from(if input { 2 } else { 3 })
        }
    }
}

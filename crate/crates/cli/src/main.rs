//! `gapslam` — synthesize datasets, replay them through the estimator in any
//! of its modes, draw reference posterior samples, and score the results.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gapslam_cli::commands::{
    cmd_eval, cmd_oracle, cmd_run, cmd_synth, DatasetKind, EvalSpec, OracleSpec, RunSpec,
    SynthSpec,
};
use gapslam_cli::runner::RunSettings;
use gapslam_core::Mode;

#[derive(Parser)]
#[command(
    name = "gapslam",
    version,
    about = "Hybrid Gaussian/particle SLAM over synthetic range and object worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset log plus a sidecar with the generator settings.
    Synth {
        /// World family to generate.
        #[arg(long, value_enum)]
        world: WorldArg,
        /// Output log file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Range worlds: number of motion steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Object worlds: number of camera frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Range worlds: range measurement noise in meters.
        #[arg(long)]
        sigma_range: Option<f64>,
        /// Object worlds: fraction of detections with a corrupted class.
        #[arg(long)]
        mislabel_rate: Option<f64>,
    },
    /// Replay a dataset through the estimator and write run artifacts.
    Run {
        /// Dataset log produced by `synth`; the format is sniffed.
        dataset: PathBuf,
        /// Output directory (steps.csv, estimates.txt, clouds.txt, config.toml).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Gapslam)]
        mode: ModeArg,
        /// Path count for dense cloud exports.
        #[arg(long, default_value_t = 200)]
        k: usize,
        /// Proposals drawn per landmark refresh.
        #[arg(long, default_value_t = 100)]
        m: usize,
        /// Graduation threshold on the cloud's largest eigenvalue
        /// (defaults: 0.05 planar, 0.02 spatial; accepts `inf`).
        #[arg(long)]
        eig_threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Snapshot dense clouds right after this step instead of at the end.
        #[arg(long)]
        dense_step: Option<u64>,
    },
    /// Sample the exact posterior of a truncated range log with MCMC.
    Oracle {
        dataset: PathBuf,
        /// Output directory (samples.txt, diagnostics.txt, config.toml).
        #[arg(long)]
        out: PathBuf,
        /// Last time index of the log to keep.
        #[arg(long)]
        step: u64,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 1500)]
        burn_in: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score run directories against dataset truth (and optional oracle samples).
    Eval {
        /// Run directories produced by `run`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Dataset override; defaults to the path each run's config records.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Oracle directory for per-landmark discrepancy columns.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Report file; defaults to eval.txt in the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WorldArg {
    Range,
    Objects,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gapslam,
    GaussOnly,
    NoReinit,
}

impl From<ModeArg> for Mode {
    fn from(arg: ModeArg) -> Mode {
        match arg {
            ModeArg::Gapslam => Mode::Gapslam,
            ModeArg::GaussOnly => Mode::GaussOnly,
            ModeArg::NoReinit => Mode::NoReinit,
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            world,
            out,
            seed,
            steps,
            frames,
            sigma_range,
            mislabel_rate,
        } => cmd_synth(&SynthSpec {
            kind: match world {
                WorldArg::Range => DatasetKind::Range,
                WorldArg::Objects => DatasetKind::Objects,
            },
            out,
            seed,
            steps,
            frames,
            sigma_range,
            mislabel_rate,
        }),
        Command::Run {
            dataset,
            out,
            mode,
            k,
            m,
            eig_threshold,
            seed,
            dense_step,
        } => cmd_run(&RunSpec {
            dataset,
            out,
            settings: RunSettings {
                mode: mode.into(),
                paths: k,
                per_path: m,
                eig_threshold,
                seed,
                dense_step,
            },
        }),
        Command::Oracle {
            dataset,
            out,
            step,
            chains,
            samples,
            burn_in,
            seed,
        } => cmd_oracle(&OracleSpec {
            dataset,
            out,
            step,
            chains,
            samples,
            burn_in,
            seed,
        }),
        Command::Eval {
            runs,
            dataset,
            oracle,
            out,
        } => cmd_eval(&EvalSpec {
            runs,
            dataset,
            oracle,
            out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(gapslam_cli::exit_code_for(&err))
        }
    }
}

//! `prosody-morph` command-line runs. Each invocation writes one run
//! directory ending in `manifest.json`.
//!
//! Exit codes: 0 success, 1 I/O, 2 config or usage, 3 solver divergence,
//! 4 non-finite training loss, 5 invalid data, 6 verification failure.

mod commands;
mod error;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prosody_morph::{Direction, RegistrationConfig};

use commands::{ConvertArgs, RegisterArgs, Suite};

#[derive(Debug, Parser)]
#[command(name = "prosody-morph", version, about = "Diffeomorphic prosody warping and VCGAN contour transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    /// Class A to class B
    Fwd,
    /// Class B to class A
    Bwd,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Fwd => Direction::Forward,
            DirectionArg::Bwd => Direction::Backward,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus
    Synth {
        /// Synthesis spec (JSON)
        #[arg(long)]
        spec: PathBuf,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty run directory
        #[arg(long)]
        force: bool,
    },
    /// Register a source F0 contour onto a target by geodesic shooting
    Register {
        /// Source contour CSV (`t,value`, Hz)
        #[arg(long)]
        src: PathBuf,
        /// Target contour CSV (`t,value`, Hz)
        #[arg(long)]
        tgt: PathBuf,
        /// Kernel width in Hz
        #[arg(long, default_value_t = 50.0)]
        sigma: f64,
        /// Weight of the squared data residual (1/Hz^2)
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Integration steps of the flow (unit time step)
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Gradient-descent iteration cap
        #[arg(long, default_value_t = RegistrationConfig::default().max_iters)]
        max_iters: usize,
        /// Largest line-search step (momenta units per gradient unit)
        #[arg(long, default_value_t = RegistrationConfig::default().learning_rate)]
        learning_rate: f64,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty run directory
        #[arg(long)]
        force: bool,
    },
    /// Train the VCGAN on a corpus directory written by `synth`
    Train {
        /// Training config (JSON with optional `train` and `model` objects)
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty run directory
        #[arg(long)]
        force: bool,
    },
    /// Convert one utterance with a trained checkpoint
    Convert {
        /// Checkpoint JSON written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source spectrogram CSV (`t,f0,...`, linear magnitude)
        #[arg(long)]
        spect: PathBuf,
        /// Source F0 contour CSV (`t,value`, Hz)
        #[arg(long)]
        f0: PathBuf,
        /// Conversion direction
        #[arg(long, value_enum)]
        direction: DirectionArg,
        /// Seed of the dropout masks
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional ground-truth F0 CSV (Hz); prints the RMSE against it
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty run directory
        #[arg(long)]
        force: bool,
    },
    /// Run verification checks; honours PROSODY_MORPH_THREADS (default 1)
    Verify {
        /// Which checks to run
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Optional verification config (JSON); defaults otherwise
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty run directory
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> error::CliResult<()> {
    match cli.command {
        Command::Synth { spec, out, force } => commands::synth(&spec, &out, force),
        Command::Register {
            src,
            tgt,
            sigma,
            lambda,
            steps,
            max_iters,
            learning_rate,
            out,
            force,
        } => commands::register_cmd(&RegisterArgs {
            src: &src,
            tgt: &tgt,
            sigma,
            lambda,
            steps,
            max_iters,
            learning_rate,
            out: &out,
            force,
        }),
        Command::Train {
            config,
            data,
            out,
            force,
        } => commands::train_cmd(&config, &data, &out, force),
        Command::Convert {
            checkpoint,
            spect,
            f0,
            direction,
            seed,
            truth,
            out,
            force,
        } => commands::convert_cmd(&ConvertArgs {
            checkpoint: &checkpoint,
            spect: &spect,
            f0: &f0,
            direction: direction.into(),
            seed,
            truth: truth.as_deref(),
            out: &out,
            force,
        }),
        Command::Verify {
            suite,
            config,
            out,
            force,
        } => commands::verify_cmd(suite, config.as_deref(), &out, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

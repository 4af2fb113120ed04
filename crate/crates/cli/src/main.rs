//! `optodrive` command-line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 bad data, 3 simulated hardware fault.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "optodrive", version, about = "Emulate and drive a 32-channel uLED current-source chip")]
struct Cli {
    /// Root seed for every random draw.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Probe description (JSON). Without it a synthetic probe is drawn from the seed.
    #[arg(long, global = true)]
    probe: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Command CSV (address,value) to a hex frame dump.
    Encode { input: PathBuf },
    /// Hex frame dump to command CSV.
    Decode { input: PathBuf },
    /// Sweep every channel, build the calibration table and linearity reports.
    Calibrate(CalibrateArgs),
    /// Compile a stimulus script into a slot-stamped frame stream.
    Compile {
        script: PathBuf,
        #[arg(long)]
        table: PathBuf,
    },
    /// Replay a frame stream through the chip into the probe.
    Simulate { stream: PathBuf },
    /// Chip state operations.
    Asic {
        #[command(subcommand)]
        command: AsicCommand,
    },
    /// Synthetic sequence experiments.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
    /// Compile, simulate, generate spikes and score in one go.
    Pipeline {
        /// Stimulus script or experiment plan (JSON).
        script: PathBuf,
        /// Calibration table; built from the probe when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Readings per code.
    #[arg(long, default_value_t = 9)]
    reps: usize,
    /// Target power is rounded down to a multiple of this, uW.
    #[arg(long, default_value_t = 1.0)]
    granularity_uw: f64,
    /// Relative measurement noise (standard deviation over mean).
    #[arg(long)]
    noise_cv: Option<f64>,
    /// Absolute current-meter noise floor, A.
    #[arg(long)]
    noise_floor_a: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PowerAction {
    Up,
    Down,
}

#[derive(Debug, Subcommand)]
enum AsicCommand {
    /// Apply power events and frames to a snapshot and write the result.
    Step {
        /// Starting snapshot; a powered-off chip when omitted.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Standard power sequence to run first.
        #[arg(long, conflicts_with = "events")]
        power: Option<PowerAction>,
        /// Power events (JSON list) to run first.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Hex frame dump to latch after the power events.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ExperimentCommand {
    /// Run an experiment plan and write spikes plus an experiment record.
    Run {
        plan: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Score the spikes listed in an experiment record.
    Score {
        record: PathBuf,
        /// Score a shuffled-spike control instead.
        #[arg(long)]
        shuffle: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = commands::Context::new(cli.seed, cli.out, cli.probe)?;
    match cli.command {
        Command::Encode { input } => commands::encode(&ctx, &input),
        Command::Decode { input } => commands::decode(&ctx, &input),
        Command::Calibrate(a) => commands::calibrate(
            &ctx,
            &commands::CalibrateOptions {
                reps: a.reps,
                granularity_uw: a.granularity_uw,
                noise_cv: a.noise_cv,
                noise_floor_a: a.noise_floor_a,
            },
        ),
        Command::Compile { script, table } => commands::compile(&ctx, &script, &table),
        Command::Simulate { stream } => commands::simulate(&ctx, &stream),
        Command::Asic {
            command:
                AsicCommand::Step {
                    state,
                    power,
                    events,
                    frames,
                },
        } => {
            let power = power.map(|p| matches!(p, PowerAction::Up));
            commands::asic_step(&ctx, state.as_deref(), power, events.as_deref(), frames.as_deref())
        }
        Command::Experiment {
            command: ExperimentCommand::Run { plan, table },
        } => commands::experiment_run(&ctx, &plan, table.as_deref()).map(|_| ()),
        Command::Experiment {
            command: ExperimentCommand::Score { record, shuffle },
        } => commands::experiment_score(&ctx, &record, shuffle).map(|_| ()),
        Command::Pipeline { script, table } => commands::pipeline(&ctx, &script, table.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                CliError::Usage(String::new()).exit_code()
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

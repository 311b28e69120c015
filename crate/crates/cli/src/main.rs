use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edgebench::report::OutputFormat;

/// Console output that keeps going when stdout is closed early.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Like [`say!`] without the trailing newline.
macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

mod campaign;
mod manifest;
mod traces;

use campaign::RunOverrides;
use traces::TraceCommand;

/// Error paired with the process exit status it maps to.
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    /// Bad input: manifest, trace file or directory problems (status 2).
    pub fn usage(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    /// Failed runs or corrupted evidence (status 1).
    pub fn failed(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

#[derive(Debug, Parser)]
#[command(name = "edgebench", version, about = "Energy and latency benchmarking for edge inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute a campaign manifest and write records and reports
    Run {
        manifest: PathBuf,
        /// Exit 0 even when some runs fail
        #[arg(long)]
        keep_going: bool,
        /// Repeats per sweep cell
        #[arg(long)]
        repeats: Option<u32>,
        /// Seconds to pause between runs
        #[arg(long)]
        cooling: Option<f64>,
        /// Report format; may be given several times
        #[arg(long = "format", value_name = "csv|json|markdown")]
        formats: Vec<OutputFormat>,
        /// Base seed for runners and simulated meters
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify stored records and regenerate the reports
    Analyze {
        /// Campaign directory or its records/ subdirectory
        dir: PathBuf,
    },
    /// Inspect a power trace file
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Stream a recorded trace to stdout at recorded pace
    Replay {
        file: PathBuf,
        /// Playback speed multiplier; `inf` streams without pauses
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            manifest,
            keep_going,
            repeats,
            cooling,
            formats,
            seed,
        } => campaign::cmd_run(
            &manifest,
            RunOverrides {
                keep_going,
                repeats,
                cooling,
                formats,
                seed,
                output_dir: std::env::var_os("EDGEBENCH_OUT").map(PathBuf::from),
            },
        ),
        Command::Analyze { dir } => campaign::cmd_analyze(&dir),
        Command::Trace { command } => traces::cmd_trace(command),
        Command::Replay { file, speed } => traces::cmd_replay(&file, speed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

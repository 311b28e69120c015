use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Subcommand};
use serde_json::Value;

use edgebench::report::format_fixed;
use edgebench::simmeter::replay_trace;
use edgebench::trace::{
    estimate_baseline, estimate_baseline_between, integrate_energy, mean_power, read_trace,
    serialize_trace, slice_by_phase, subtract_baseline, summed_power, Phase, PhaseLog, PowerTrace,
    TraceFormat, DEFAULT_BASELINE_SECONDS,
};

use crate::Failure;

#[derive(Debug, Args)]
pub struct TraceInput {
    /// Trace file (`t,watts` rows, or `t,volts,amps` with --input-format va)
    pub file: PathBuf,
    /// Row format when the file has no `#format:` header
    #[arg(long, default_value = "watts")]
    pub input_format: TraceFormat,
    /// Print numbers with this many decimals instead of full precision
    #[arg(long)]
    pub decimals: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PhaseSelection {
    /// Phase log as JSON: a list of {phase, start, end} spans, or a run record
    #[arg(long)]
    pub phases: Option<PathBuf>,
    /// Restrict to this phase (requires --phases)
    #[arg(long, requires = "phases")]
    pub phase: Option<Phase>,
    /// Subtract the idle baseline before slicing
    #[arg(long)]
    pub subtract_baseline: bool,
    /// Baseline window from t=0 when no phase log is given
    #[arg(long, default_value_t = DEFAULT_BASELINE_SECONDS)]
    pub window: f64,
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Idle power over the first --window seconds
    Baseline {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, default_value_t = DEFAULT_BASELINE_SECONDS)]
        window: f64,
    },
    /// Trapezoidal energy in joules
    Energy {
        #[command(flatten)]
        input: TraceInput,
        #[command(flatten)]
        select: PhaseSelection,
    },
    /// Mean and summed power in watts
    Power {
        #[command(flatten)]
        input: TraceInput,
        #[command(flatten)]
        select: PhaseSelection,
    },
    /// Samples of one phase, written as a watts trace
    Slice {
        #[command(flatten)]
        input: TraceInput,
        /// Phase log as JSON: a list of {phase, start, end} spans, or a run record
        #[arg(long)]
        phases: PathBuf,
        #[arg(long)]
        phase: Phase,
        #[arg(long)]
        subtract_baseline: bool,
    },
}

fn load_trace(input: &TraceInput) -> Result<PowerTrace> {
    let file = File::open(&input.file)
        .with_context(|| format!("cannot open {}", input.file.display()))?;
    read_trace(BufReader::new(file), input.input_format)
        .with_context(|| format!("cannot parse {}", input.file.display()))
}

fn load_phases(path: &Path) -> Result<PhaseLog> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))?;
    let spans = match value {
        Value::Object(mut map) => map
            .remove("phases")
            .ok_or_else(|| anyhow!("{} has no `phases` field", path.display()))?,
        other => other,
    };
    serde_json::from_value(spans).with_context(|| format!("invalid phase log in {}", path.display()))
}

fn number(x: f64, decimals: Option<usize>) -> String {
    match decimals {
        Some(d) => format_fixed(x, d),
        None => format!("{x:?}"),
    }
}

fn select(trace: PowerTrace, phases: Option<&PhaseLog>, phase: Option<Phase>, subtract: bool, window: f64) -> Result<PowerTrace> {
    let trace = if subtract {
        let baseline = match phases {
            Some(log) => {
                let span = log.span(Phase::Baseline)?;
                estimate_baseline_between(&trace, span.start, span.end)?
            }
            None => estimate_baseline(&trace, window)?,
        };
        let sub = subtract_baseline(&trace, &baseline);
        if sub.negative_fraction > edgebench::trace::NEGATIVE_FRACTION_WARN {
            eprintln!(
                "warning: {} of samples fall below the baseline",
                format_fixed(sub.negative_fraction, 2)
            );
        }
        sub.trace
    } else {
        trace
    };
    match (phases, phase) {
        (Some(log), Some(p)) => Ok(slice_by_phase(&trace, log, p)?),
        _ => Ok(trace),
    }
}

pub fn cmd_trace(command: TraceCommand) -> Result<(), Failure> {
    let out = run_trace(command).map_err(Failure::usage)?;
    say_raw!("{out}");
    Ok(())
}

fn run_trace(command: TraceCommand) -> Result<String> {
    match command {
        TraceCommand::Baseline { input, window } => {
            let trace = load_trace(&input)?;
            let b = estimate_baseline(&trace, window)?;
            Ok(format!("{}\n", number(b.watts, input.decimals)))
        }
        TraceCommand::Energy { input, select: s } => {
            let trace = load_trace(&input)?;
            let log = s.phases.as_deref().map(load_phases).transpose()?;
            let trace = select(trace, log.as_ref(), s.phase, s.subtract_baseline, s.window)?;
            Ok(format!("{}\n", number(integrate_energy(&trace)?, input.decimals)))
        }
        TraceCommand::Power { input, select: s } => {
            let trace = load_trace(&input)?;
            let log = s.phases.as_deref().map(load_phases).transpose()?;
            let trace = select(trace, log.as_ref(), s.phase, s.subtract_baseline, s.window)?;
            Ok(format!(
                "mean {}\nsummed {}\n",
                number(mean_power(&trace)?, input.decimals),
                number(summed_power(&trace), input.decimals)
            ))
        }
        TraceCommand::Slice { input, phases, phase, subtract_baseline } => {
            let trace = load_trace(&input)?;
            let log = load_phases(&phases)?;
            let trace = select(trace, Some(&log), Some(phase), subtract_baseline, 0.0)?;
            Ok(serialize_trace(&trace, TraceFormat::Watts))
        }
    }
}

/// Streams a recorded trace to stdout, paced at `speed` times real time.
pub fn cmd_replay(file: &Path, speed: f64) -> Result<(), Failure> {
    let stream = replay_trace(file, speed)
        .with_context(|| format!("cannot replay {}", file.display()))
        .map_err(Failure::usage)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "#format: watts");
    for sample in stream {
        let s = sample
            .with_context(|| format!("cannot parse {}", file.display()))
            .map_err(Failure::usage)?;
        if writeln!(out, "{},{}", s.t, s.watts).and_then(|_| out.flush()).is_err() {
            break;
        }
    }
    Ok(())
}

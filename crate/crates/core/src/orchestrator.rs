//! End-to-end measured runs and sweep campaigns.
//!
//! A run spawns the inference runner, hands it a [`RunConfig`], and gathers
//! three streams while it works: runner events, memory readings and meter
//! samples. Once the runner is done the streams are assembled into a
//! [`RunRecord`] whose metrics can always be recomputed from its evidence.
//!
//! Two runner kinds exist. [`RunnerSpec::Process`] launches a child process
//! speaking the line protocol in [`crate::protocol`]. [`RunnerSpec::Synthetic`]
//! is an in-process stand-in that plays a scripted lifecycle on a virtual
//! clock, so runs that use it are fully deterministic and take no wall time.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    f1_score, peak_memory, phase_duration, Averaging, MemorySample, MemorySamples, MetricSet,
    Prediction, PredictionSet,
};
use crate::protocol::{
    decode_event, encode_config, validate_sequence, EventBody, ProtocolError, RunConfig,
    RunnerEvent,
};
use crate::simmeter::{mix_seed, synth_trace, SimSpec};
use crate::trace::{
    estimate_baseline_between, integrate_energy, mean_power, read_trace, slice_by_phase,
    subtract_baseline, summed_power, BaselineEstimate, Phase, PhaseLog, PowerSample, PowerTrace,
    TraceFormat, TraceReader, NEGATIVE_FRACTION_WARN,
};

pub const DEFAULT_COOLING_SECONDS: f64 = 30.0;
pub const DEFAULT_REPEATS: u32 = 5;
pub const MEMORY_POLL_HZ: f64 = 4.0;
pub const TIMEOUT_FLOOR: Duration = Duration::from_secs(120);
/// Timeout multiple of the longest observed run of the same cell.
pub const TIMEOUT_FACTOR: f64 = 10.0;
/// A meter gap longer than this many nominal periods is reported.
pub const GAP_WARN_PERIODS: f64 = 3.0;

const BYTES_PER_MB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("runner failed: {0}")]
    RunnerFailure(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("meter failure: {0}")]
    MeterFailure(String),
    #[error("run exceeded its {0:?} time limit")]
    Timeout(Duration),
    #[error("invalid run setup: {0}")]
    InvalidSetup(String),
    #[error("could not derive metrics: {0}")]
    Analysis(String),
}

impl From<ProtocolError> for RunError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::RunnerFailure(m) => RunError::RunnerFailure(m),
            ProtocolError::InvalidConfig(m) => RunError::InvalidSetup(m),
            other => RunError::ProtocolViolation(other.to_string()),
        }
    }
}

/// Where power samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum MeterSpec {
    /// Phase-coupled simulator, rendered from the run's phase log.
    Sim(SimSpec),
    /// Recorded trace whose timestamps are already relative to run start.
    Replay(PathBuf),
    /// Text stream (FIFO, tty, pipe) read while the run is in progress.
    Live(PathBuf),
}

impl FromStr for MeterSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.starts_with("sim:") {
            s.parse().map(MeterSpec::Sim).map_err(|e| e.to_string())
        } else if let Some(p) = s.strip_prefix("replay:") {
            Ok(MeterSpec::Replay(PathBuf::from(p)))
        } else if let Some(p) = s.strip_prefix("live:") {
            Ok(MeterSpec::Live(PathBuf::from(p)))
        } else {
            Err(format!(
                "meter `{s}` must start with `sim:`, `replay:` or `live:`"
            ))
        }
    }
}

impl fmt::Display for MeterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeterSpec::Sim(spec) => {
                let p = &spec.profile;
                write!(f, "sim:baseline={}", p.baseline_w)?;
                for (phase, delta) in &p.phase_deltas {
                    write!(f, ",{phase}={delta}")?;
                }
                write!(f, ",noise={},rate={}", p.noise_std_w, p.rate_hz)?;
                if p.jitter_s > 0.0 {
                    write!(f, ",jitter={}", p.jitter_s)?;
                }
                write!(f, ",seed={}", spec.seed)
            }
            MeterSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            MeterSpec::Live(p) => write!(f, "live:{}", p.display()),
        }
    }
}

/// Command line of an external runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
}

fn default_dataset_load_s() -> f64 {
    0.5
}
fn default_model_load_s() -> f64 {
    1.0
}
fn default_inference_s() -> f64 {
    5.0
}
fn default_inputs() -> u64 {
    10
}
fn default_memory_mb() -> BTreeMap<Phase, f64> {
    BTreeMap::from([
        (Phase::Baseline, 40.0),
        (Phase::DatasetLoad, 120.0),
        (Phase::ModelLoad, 250.0),
        (Phase::Inference, 332.0),
    ])
}

/// In-process runner double with a scripted lifecycle on a virtual clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRunner {
    #[serde(default = "default_dataset_load_s")]
    pub dataset_load_s: f64,
    #[serde(default = "default_model_load_s")]
    pub model_load_s: f64,
    #[serde(default = "default_inference_s")]
    pub inference_s: f64,
    /// Extra inference seconds per unit of `input_size * batch_size`.
    #[serde(default)]
    pub inference_s_per_unit: f64,
    /// Number of labelled inputs; 0 runs without predictions.
    #[serde(default = "default_inputs")]
    pub inputs: u64,
    #[serde(default)]
    pub error_rate: f64,
    /// Resident MB reported while in each phase.
    #[serde(default = "default_memory_mb")]
    pub memory_mb: BTreeMap<Phase, f64>,
    /// Emit `fatal` midway through this phase.
    #[serde(default)]
    pub fail_phase: Option<Phase>,
    /// Restrict failures to these input sizes; empty means every config.
    #[serde(default)]
    pub fail_input_sizes: Vec<u64>,
}

impl Default for SyntheticRunner {
    fn default() -> Self {
        Self {
            dataset_load_s: default_dataset_load_s(),
            model_load_s: default_model_load_s(),
            inference_s: default_inference_s(),
            inference_s_per_unit: 0.0,
            inputs: default_inputs(),
            error_rate: 0.0,
            memory_mb: default_memory_mb(),
            fail_phase: None,
            fail_input_sizes: Vec::new(),
        }
    }
}

impl SyntheticRunner {
    fn validate(&self) -> Result<(), RunError> {
        let durations = [self.dataset_load_s, self.model_load_s, self.inference_s_per_unit];
        if durations.iter().any(|d| !(d.is_finite() && *d >= 0.0))
            || !(self.inference_s.is_finite() && self.inference_s > 0.0)
        {
            return Err(RunError::InvalidSetup(
                "synthetic runner durations must be non-negative (inference positive)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(RunError::InvalidSetup("error_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn fails_for(&self, config: &RunConfig) -> Option<Phase> {
        self.fail_phase.filter(|_| {
            self.fail_input_sizes.is_empty() || self.fail_input_sizes.contains(&config.input_size)
        })
    }

    /// Scripted event stream with virtual receipt times.
    pub fn script(&self, config: &RunConfig) -> (Vec<RunnerEvent>, Vec<f64>) {
        let inference_s = self.inference_s
            + self.inference_s_per_unit * (config.input_size * config.batch_size) as f64;
        let mut plan = vec![(Phase::Baseline, config.baseline_seconds)];
        if self.dataset_load_s > 0.0 {
            plan.push((Phase::DatasetLoad, self.dataset_load_s));
        }
        if self.model_load_s > 0.0 {
            plan.push((Phase::ModelLoad, self.model_load_s));
        }
        plan.push((Phase::Inference, inference_s));

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, config.repeat_index]));
        let fail = self.fails_for(config);
        let mut out: Vec<(f64, EventBody)> = vec![(0.0, EventBody::Hello)];
        let memory_period = 1.0 / MEMORY_POLL_HZ;
        let mut start = 0.0;
        for (phase, duration) in plan {
            let end = start + duration;
            out.push((start, EventBody::PhaseStart(phase)));
            let mut inner: Vec<(f64, EventBody)> = Vec::new();
            let mb = self.memory_mb.get(&phase).copied().unwrap_or(0.0);
            let first_tick = (start / memory_period).ceil() as u64;
            for k in first_tick.. {
                let t = k as f64 * memory_period;
                if t >= end {
                    break;
                }
                inner.push((
                    t,
                    EventBody::MemoryReport {
                        resident_bytes: (mb * BYTES_PER_MB).round() as u64,
                    },
                ));
            }
            if phase == Phase::Inference {
                for i in 0..self.inputs {
                    let t = start + (i as f64 + 0.5) * duration / self.inputs as f64;
                    let truth = i % 10;
                    let predicted = if rng.random::<f64>() < self.error_rate {
                        (truth + rng.random_range(1..10)) % 10
                    } else {
                        truth
                    };
                    inner.push((
                        t,
                        EventBody::Prediction {
                            input_id: i,
                            predicted: predicted.to_string(),
                            truth: truth.to_string(),
                        },
                    ));
                }
            }
            inner.sort_by(|a, b| a.0.total_cmp(&b.0));
            if fail == Some(phase) {
                let t_fail = start + 0.5 * duration;
                out.extend(inner.into_iter().filter(|(t, _)| *t < t_fail));
                out.push((
                    t_fail,
                    EventBody::Fatal {
                        message: format!("synthetic failure during {phase}"),
                    },
                ));
                return split_script(out);
            }
            out.extend(inner);
            out.push((end, EventBody::PhaseEnd(phase)));
            start = end;
        }
        out.push((start, EventBody::Done));
        split_script(out)
    }
}

fn split_script(script: Vec<(f64, EventBody)>) -> (Vec<RunnerEvent>, Vec<f64>) {
    script
        .into_iter()
        .map(|(t, body)| (RunnerEvent::new(t, body), t))
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerSpec {
    Process(ProcessSpec),
    Synthetic(SyntheticRunner),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub timeout: Duration,
    pub memory_poll_hz: f64,
    pub averaging: Averaging,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            timeout: TIMEOUT_FLOOR,
            memory_poll_hz: MEMORY_POLL_HZ,
            averaging: Averaging::Macro,
        }
    }
}

/// Complete evidence of one measured run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub meter: String,
    /// Wall-clock start, seconds since the Unix epoch.
    pub started_at_unix_s: f64,
    /// Run length on the harness clock (virtual for synthetic runners).
    pub duration_s: f64,
    pub phases: PhaseLog,
    pub raw_trace: PowerTrace,
    pub baseline: BaselineEstimate,
    pub memory: MemorySamples,
    pub predictions: Option<PredictionSet>,
    pub f1_averaging: Averaging,
    pub metrics: MetricSet,
    pub warnings: Vec<String>,
}

struct Capture {
    events: Vec<RunnerEvent>,
    receipt: Vec<f64>,
    polled_memory: Vec<MemorySample>,
    live_trace: Option<Result<Vec<PowerSample>, String>>,
    duration_s: f64,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Runs one measured lifecycle and assembles its record.
pub fn execute_run(
    config: &RunConfig,
    meter: &MeterSpec,
    runner: &RunnerSpec,
    options: &RunOptions,
) -> Result<RunRecord, RunError> {
    config.validate()?;
    let started_at_unix_s = unix_now();
    let capture = match runner {
        RunnerSpec::Synthetic(stub) => {
            stub.validate()?;
            if matches!(meter, MeterSpec::Live(_)) {
                return Err(RunError::InvalidSetup(
                    "a live meter needs a process runner".into(),
                ));
            }
            let (events, receipt) = stub.script(config);
            let duration_s = receipt.last().copied().unwrap_or(0.0);
            if duration_s > options.timeout.as_secs_f64() {
                return Err(RunError::Timeout(options.timeout));
            }
            Capture {
                events,
                receipt,
                polled_memory: Vec::new(),
                live_trace: None,
                duration_s,
            }
        }
        RunnerSpec::Process(spec) => run_process(config, spec, meter, options)?,
    };
    assemble(config, meter, options, capture, started_at_unix_s)
}

fn assemble(
    config: &RunConfig,
    meter: &MeterSpec,
    options: &RunOptions,
    capture: Capture,
    started_at_unix_s: f64,
) -> Result<RunRecord, RunError> {
    let phases = validate_sequence(&capture.events, &capture.receipt)?;

    let mut memory = capture.polled_memory;
    let mut predictions = Vec::new();
    for (event, &t) in capture.events.iter().zip(&capture.receipt) {
        match &event.body {
            EventBody::MemoryReport { resident_bytes } => memory.push(MemorySample {
                t,
                resident_bytes: *resident_bytes,
            }),
            EventBody::Prediction {
                input_id,
                predicted,
                truth,
            } => predictions.push(Prediction {
                input_id: *input_id,
                predicted: predicted.clone(),
                truth: truth.clone(),
            }),
            _ => {}
        }
    }
    let memory = MemorySamples::merged(memory);
    let predictions = (!predictions.is_empty()).then(|| PredictionSet::from(predictions));

    let raw_trace = match (meter, capture.live_trace) {
        (MeterSpec::Sim(spec), _) => synth_trace(
            &spec.profile,
            &phases,
            mix_seed(&[spec.seed, config.seed, config.repeat_index]),
        ),
        (MeterSpec::Replay(path), _) => {
            let file = File::open(path)
                .map_err(|e| RunError::MeterFailure(format!("{}: {e}", path.display())))?;
            read_trace(BufReader::new(file), TraceFormat::Watts)
                .map_err(|e| RunError::MeterFailure(e.to_string()))?
        }
        (MeterSpec::Live(path), Some(Ok(samples))) => {
            PowerTrace::new(samples, crate::trace::DEFAULT_RATE_HZ, path.display().to_string())
                .map_err(|e| RunError::MeterFailure(e.to_string()))?
        }
        (MeterSpec::Live(_), Some(Err(e))) => return Err(RunError::MeterFailure(e)),
        (MeterSpec::Live(_), None) => {
            return Err(RunError::MeterFailure("live meter produced no stream".into()))
        }
    };
    check_meter_coverage(&raw_trace, &phases)?;

    let metrics = derive_metrics(
        &raw_trace,
        &phases,
        &memory,
        predictions.as_ref(),
        options.averaging,
    )?;
    let baseline = baseline_for(&raw_trace, &phases)?;
    let warnings = derive_warnings(&raw_trace, &phases, &baseline);

    Ok(RunRecord {
        config: config.clone(),
        meter: meter.to_string(),
        started_at_unix_s,
        duration_s: capture.duration_s,
        phases,
        raw_trace,
        baseline,
        memory,
        predictions,
        f1_averaging: options.averaging,
        metrics,
        warnings,
    })
}

fn check_meter_coverage(trace: &PowerTrace, phases: &PhaseLog) -> Result<(), RunError> {
    let inference = phases.span(Phase::Inference).expect("validated log");
    let period = 1.0 / trace.nominal_rate_hz();
    let Some(last) = trace.last_t() else {
        return Err(RunError::MeterFailure("meter produced no samples".into()));
    };
    if last < inference.end - 1.5 * period {
        return Err(RunError::MeterFailure(format!(
            "meter stream ends at t={last:.3}s, before inference ends at t={:.3}s",
            inference.end
        )));
    }
    Ok(())
}

fn baseline_for(trace: &PowerTrace, phases: &PhaseLog) -> Result<BaselineEstimate, RunError> {
    let span = phases.span(Phase::Baseline).expect("validated log");
    estimate_baseline_between(trace, span.start, span.end)
        .map_err(|e| RunError::MeterFailure(format!("baseline window: {e}")))
}

fn derive_metrics(
    raw_trace: &PowerTrace,
    phases: &PhaseLog,
    memory: &MemorySamples,
    predictions: Option<&PredictionSet>,
    averaging: Averaging,
) -> Result<MetricSet, RunError> {
    let analysis = |e: &dyn fmt::Display| RunError::Analysis(e.to_string());
    let baseline = baseline_for(raw_trace, phases)?;
    let subtracted = subtract_baseline(raw_trace, &baseline);
    let inference =
        slice_by_phase(&subtracted.trace, phases, Phase::Inference).map_err(|e| analysis(&e))?;
    Ok(MetricSet {
        f1_percent: predictions
            .map(|p| f1_score(p, averaging))
            .transpose()
            .map_err(|e| analysis(&e))?,
        inference_time_s: phase_duration(phases, Phase::Inference).map_err(|e| analysis(&e))?,
        summed_power_w: summed_power(&inference),
        mean_power_w: mean_power(&inference).map_err(|e| analysis(&e))?,
        energy_j: integrate_energy(&inference).map_err(|e| analysis(&e))?,
        peak_memory_mb: peak_memory(memory, phases, Phase::Inference).map_err(|e| analysis(&e))?,
    })
}

fn derive_warnings(trace: &PowerTrace, phases: &PhaseLog, baseline: &BaselineEstimate) -> Vec<String> {
    let mut warnings = Vec::new();
    if let Ok(inference) = slice_by_phase(trace, phases, Phase::Inference) {
        let fraction = subtract_baseline(&inference, baseline).negative_fraction;
        if fraction > NEGATIVE_FRACTION_WARN {
            warnings.push(format!(
                "{:.1}% of inference samples fall below the baseline; the baseline may be unreliable",
                100.0 * fraction
            ));
        }
    }
    let period = 1.0 / trace.nominal_rate_hz();
    if let Some(gap) = trace.max_gap() {
        if gap > GAP_WARN_PERIODS * period {
            warnings.push(format!(
                "meter gap of {gap:.3}s exceeds {GAP_WARN_PERIODS}x the nominal sample period"
            ));
        }
    }
    warnings
}

/// Recomputes a record's metrics from its stored evidence.
pub fn recompute_metrics(record: &RunRecord) -> Result<MetricSet, RunError> {
    derive_metrics(
        &record.raw_trace,
        &record.phases,
        &record.memory,
        record.predictions.as_ref(),
        record.f1_averaging,
    )
}

/// Checks that the stored metrics and baseline match the evidence exactly.
pub fn verify_record(record: &RunRecord) -> Result<(), String> {
    let metrics = recompute_metrics(record).map_err(|e| e.to_string())?;
    if metrics != record.metrics {
        return Err(format!(
            "stored metrics {:?} differ from recomputed {:?}",
            record.metrics, metrics
        ));
    }
    let baseline = baseline_for(&record.raw_trace, &record.phases).map_err(|e| e.to_string())?;
    if baseline != record.baseline {
        return Err("stored baseline differs from the recomputed estimate".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// process runner

enum StreamItem {
    Line(String, f64),
    ReadError(String),
}

fn run_process(
    config: &RunConfig,
    spec: &ProcessSpec,
    meter: &MeterSpec,
    options: &RunOptions,
) -> Result<Capture, RunError> {
    let line = encode_config(config)?;
    let origin = Instant::now();
    let mut child = Command::new(&spec.command)
        .args(&spec.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| RunError::RunnerFailure(format!("cannot start `{}`: {e}", spec.command)))?;
    let pid = child.id();

    let stop = Arc::new(AtomicBool::new(false));
    let memory = Arc::new(Mutex::new(Vec::<MemorySample>::new()));

    let live = match meter {
        MeterSpec::Live(path) => Some(spawn_live_meter(path.clone(), origin, stop.clone())),
        _ => None,
    };

    let poller = {
        let stop = stop.clone();
        let memory = memory.clone();
        let period = Duration::from_secs_f64(1.0 / options.memory_poll_hz.max(0.1));
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                if let Some(bytes) = tree_resident_bytes(pid) {
                    let t = origin.elapsed().as_secs_f64();
                    memory.lock().unwrap().push(MemorySample {
                        t,
                        resident_bytes: bytes,
                    });
                }
                std::thread::sleep(period);
            }
        })
    };

    let stderr_tail = {
        let stderr = child.stderr.take().expect("piped stderr");
        std::thread::spawn(move || {
            let mut tail = Vec::new();
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                tail.push(line);
                if tail.len() > 20 {
                    tail.remove(0);
                }
            }
            tail.join("\n")
        })
    };

    let (tx, rx) = mpsc::channel::<StreamItem>();
    {
        let stdout = child.stdout.take().expect("piped stdout");
        let memory = memory.clone();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(line) => {
                        let t = origin.elapsed().as_secs_f64();
                        // A reading at each event guarantees coverage of short phases.
                        if let Some(bytes) = tree_resident_bytes(pid) {
                            memory.lock().unwrap().push(MemorySample {
                                t,
                                resident_bytes: bytes,
                            });
                        }
                        if tx.send(StreamItem::Line(line, t)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(StreamItem::ReadError(e.to_string()));
                        break;
                    }
                }
            }
        });
    }

    if let Some(mut stdin) = child.stdin.take() {
        // A runner that exits before reading its config shows up as a
        // protocol violation below, so a broken pipe is not fatal here.
        let _ = writeln!(stdin, "{line}");
    }

    let deadline = origin + options.timeout;
    let result = collect_events(&rx, deadline, options.timeout);
    stop.store(true, Ordering::Relaxed);
    let (events, receipt) = match result {
        Ok(v) => v,
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            let _ = poller.join();
            return Err(e);
        }
    };
    let status = wait_until(&mut child, deadline, options.timeout)?;
    let _ = poller.join();
    let stderr = stderr_tail.join().unwrap_or_default();
    let duration_s = origin.elapsed().as_secs_f64();

    let terminated_cleanly = matches!(events.last().map(|e| &e.body), Some(EventBody::Done));
    if terminated_cleanly && !status.success() {
        return Err(RunError::RunnerFailure(format!(
            "runner exited with {status} after done{}",
            if stderr.is_empty() { String::new() } else { format!(": {stderr}") }
        )));
    }
    if events.is_empty() && !status.success() {
        return Err(RunError::RunnerFailure(format!(
            "runner exited with {status} without emitting events{}",
            if stderr.is_empty() { String::new() } else { format!(": {stderr}") }
        )));
    }

    let live_trace = live.map(|handle| {
        let (samples, error) = {
            let guard = handle.lock().unwrap();
            (guard.0.clone(), guard.1.clone())
        };
        match error {
            Some(e) => Err(e),
            None => Ok(samples),
        }
    });
    let polled_memory = std::mem::take(&mut *memory.lock().unwrap());
    Ok(Capture {
        events,
        receipt,
        polled_memory,
        live_trace,
        duration_s,
    })
}

fn collect_events(
    rx: &mpsc::Receiver<StreamItem>,
    deadline: Instant,
    limit: Duration,
) -> Result<(Vec<RunnerEvent>, Vec<f64>), RunError> {
    let mut events = Vec::new();
    let mut receipt = Vec::new();
    loop {
        let now = Instant::now();
        if now >= deadline {
            return Err(RunError::Timeout(limit));
        }
        match rx.recv_timeout(deadline - now) {
            Ok(StreamItem::Line(line, t)) => {
                if line.trim().is_empty() {
                    continue;
                }
                let event = decode_event(&line)?;
                let terminal = event.body.is_terminal();
                events.push(event);
                receipt.push(t);
                if terminal {
                    return Ok((events, receipt));
                }
            }
            Ok(StreamItem::ReadError(e)) => {
                return Err(RunError::ProtocolViolation(format!("reading runner output: {e}")))
            }
            Err(RecvTimeoutError::Timeout) => return Err(RunError::Timeout(limit)),
            // stdout closed; validate_sequence reports the missing terminal
            Err(RecvTimeoutError::Disconnected) => return Ok((events, receipt)),
        }
    }
}

fn wait_until(
    child: &mut Child,
    deadline: Instant,
    limit: Duration,
) -> Result<std::process::ExitStatus, RunError> {
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Ok(status),
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RunError::Timeout(limit));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(RunError::RunnerFailure(e.to_string())),
        }
    }
}

type LiveBuffer = Arc<Mutex<(Vec<PowerSample>, Option<String>)>>;

/// Reads a live meter stream on its own thread. Sample spacing comes from the
/// meter's timestamps; the first sample is pinned to its harness receipt time.
fn spawn_live_meter(path: PathBuf, origin: Instant, stop: Arc<AtomicBool>) -> LiveBuffer {
    let buffer: LiveBuffer = Arc::new(Mutex::new((Vec::new(), None)));
    let out = buffer.clone();
    std::thread::spawn(move || {
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) => {
                out.lock().unwrap().1 = Some(format!("{}: {e}", path.display()));
                return;
            }
        };
        let mut offset = None;
        for item in TraceReader::new(BufReader::new(file), TraceFormat::Watts) {
            if stop.load(Ordering::Relaxed) {
                break;
            }
            match item {
                Ok(s) => {
                    let received = origin.elapsed().as_secs_f64();
                    let shift = *offset.get_or_insert(received - s.t);
                    out.lock().unwrap().0.push(PowerSample::new(s.t + shift, s.watts));
                }
                Err(e) => {
                    out.lock().unwrap().1 = Some(e.to_string());
                    break;
                }
            }
        }
    });
    buffer
}

/// Resident set of a process and all of its descendants, in bytes.
#[cfg(target_os = "linux")]
fn tree_resident_bytes(root: u32) -> Option<u64> {
    let mut children: HashMap<u32, Vec<u32>> = HashMap::new();
    for entry in std::fs::read_dir("/proc").ok()?.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let Ok(stat) = std::fs::read_to_string(entry.path().join("stat")) else {
            continue;
        };
        // the command name may contain spaces; fields resume after the last ')'
        let Some(rest) = stat.rfind(')').map(|i| &stat[i + 1..]) else {
            continue;
        };
        if let Some(ppid) = rest.split_whitespace().nth(1).and_then(|s| s.parse().ok()) {
            children.entry(ppid).or_default().push(pid);
        }
    }
    let mut total = 0u64;
    let mut seen_root = false;
    let mut stack = vec![root];
    while let Some(pid) = stack.pop() {
        if let Some(kb) = vm_rss_kb(pid) {
            total += kb * 1024;
            seen_root |= pid == root;
        }
        if let Some(kids) = children.get(&pid) {
            stack.extend(kids);
        }
    }
    seen_root.then_some(total)
}

#[cfg(target_os = "linux")]
fn vm_rss_kb(pid: u32) -> Option<u64> {
    let status = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmRSS:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

// TODO: poll the process tree on macOS via proc_pidinfo; runners there must
// send memory_report events for peak memory to be available.
#[cfg(not(target_os = "linux"))]
fn tree_resident_bytes(_root: u32) -> Option<u64> {
    None
}

// ---------------------------------------------------------------------------
// sweeps

/// Workload parameters a sweep may vary. Declared in name order, which is
/// also the nesting order of the sweep (first key outermost).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    BatchSize,
    InputSize,
    TokenWindow,
}

impl SweepParam {
    fn apply(self, config: &mut RunConfig, value: u64) {
        match self {
            SweepParam::BatchSize => config.batch_size = value,
            SweepParam::InputSize => config.input_size = value,
            SweepParam::TokenWindow => config.token_window = Some(value),
        }
    }
}

fn default_repeats() -> u32 {
    DEFAULT_REPEATS
}
fn default_cooling() -> f64 {
    DEFAULT_COOLING_SECONDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base_config: RunConfig,
    #[serde(default)]
    pub grid: BTreeMap<SweepParam, Vec<u64>>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default = "default_cooling")]
    pub cooling_seconds: f64,
}

impl SweepSpec {
    pub fn new(base_config: RunConfig) -> Self {
        Self {
            base_config,
            grid: BTreeMap::new(),
            repeats: DEFAULT_REPEATS,
            cooling_seconds: DEFAULT_COOLING_SECONDS,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::InvalidSetup(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if !(self.cooling_seconds.is_finite() && self.cooling_seconds >= 0.0) {
            return bad("cooling_seconds must be non-negative".into());
        }
        for (param, values) in &self.grid {
            if values.is_empty() {
                return bad(format!("grid entry {param:?} has no values"));
            }
            if values.contains(&0) {
                return bad(format!("grid entry {param:?} contains 0"));
            }
        }
        self.base_config.validate()?;
        Ok(())
    }

    /// Every run of the campaign, in execution order.
    pub fn configs(&self) -> Vec<RunConfig> {
        let mut cells = vec![self.base_config.clone()];
        for (&param, values) in &self.grid {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |&v| {
                        let mut next = cell.clone();
                        param.apply(&mut next, v);
                        next
                    })
                })
                .collect();
        }
        cells
            .into_iter()
            .flat_map(|cell| {
                (0..self.repeats as u64).map(move |r| RunConfig {
                    repeat_index: r,
                    ..cell.clone()
                })
            })
            .collect()
    }

    pub fn run_count(&self) -> usize {
        self.repeats as usize * self.grid.values().map(Vec::len).product::<usize>()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub abort_on_error: bool,
    /// Fixed per-run limit; when unset the limit adapts per cell.
    pub timeout: Option<Duration>,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub index: usize,
    pub config: RunConfig,
    pub error: RunError,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
    pub aborted: bool,
}

/// Runs a whole campaign serially. See [`execute_sweep_with`].
pub fn execute_sweep(
    spec: &SweepSpec,
    meter: &MeterSpec,
    runner: &RunnerSpec,
    options: &SweepOptions,
) -> Result<SweepOutcome, RunError> {
    execute_sweep_with(spec, meter, runner, options, |_, _, _| {})
}

/// Runs a whole campaign serially, calling `on_run(index, total, result)`
/// after each run. Cooling pauses separate consecutive runs.
pub fn execute_sweep_with(
    spec: &SweepSpec,
    meter: &MeterSpec,
    runner: &RunnerSpec,
    options: &SweepOptions,
    mut on_run: impl FnMut(usize, usize, &Result<RunRecord, RunError>),
) -> Result<SweepOutcome, RunError> {
    spec.validate()?;
    let configs = spec.configs();
    let total = configs.len();
    let mut longest: HashMap<String, f64> = HashMap::new();
    let mut outcome = SweepOutcome::default();
    for (index, config) in configs.into_iter().enumerate() {
        if index > 0 && spec.cooling_seconds > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(spec.cooling_seconds));
        }
        let cell = config.cell_key();
        let timeout = options.timeout.unwrap_or_else(|| {
            longest
                .get(&cell)
                .map(|&d| Duration::from_secs_f64(d * TIMEOUT_FACTOR).max(TIMEOUT_FLOOR))
                .unwrap_or(TIMEOUT_FLOOR)
        });
        let run_options = RunOptions {
            timeout,
            averaging: options.averaging,
            ..RunOptions::default()
        };
        let result = execute_run(&config, meter, runner, &run_options);
        on_run(index, total, &result);
        match result {
            Ok(record) => {
                let entry = longest.entry(cell).or_insert(0.0);
                *entry = entry.max(record.duration_s);
                outcome.records.push(record);
            }
            Err(error) => {
                outcome.failures.push(CellFailure {
                    index,
                    config,
                    error,
                });
                if options.abort_on_error {
                    outcome.aborted = true;
                    break;
                }
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simmeter::LoadProfile;

    pub(crate) fn base_config() -> RunConfig {
        RunConfig {
            model_id: "tinybert".into(),
            device_id: "rpi4".into(),
            framework_id: "litert".into(),
            input_size: 128,
            batch_size: 1,
            token_window: None,
            dataset_ref: "glue-sst2".into(),
            repeat_index: 0,
            seed: 11,
            baseline_seconds: 3.0,
        }
    }

    fn sim(noise: f64) -> MeterSpec {
        MeterSpec::Sim(SimSpec {
            profile: LoadProfile::new(2.0)
                .with_delta(Phase::Inference, 3.0)
                .with_noise(noise),
            seed: 42,
        })
    }

    fn stub() -> RunnerSpec {
        RunnerSpec::Synthetic(SyntheticRunner::default())
    }

    #[test]
    fn synthetic_run_metrics() {
        let rec = execute_run(&base_config(), &sim(0.0), &stub(), &RunOptions::default()).unwrap();
        let m = rec.metrics;
        assert!((m.inference_time_s - 5.0).abs() <= 0.1);
        assert!((m.energy_j - 15.0).abs() <= 0.5, "{}", m.energy_j);
        assert!((m.mean_power_w - 3.0).abs() <= 0.1);
        assert_eq!(m.peak_memory_mb, 332.0);
        assert_eq!(m.f1_percent, Some(100.0));
        assert_eq!(rec.baseline.sample_count, 48);
        assert_eq!(rec.baseline.watts, 2.0);
        assert!(rec.warnings.is_empty(), "{:?}", rec.warnings);
    }

    #[test]
    fn fatal_during_model_load_fails_run() {
        let runner = RunnerSpec::Synthetic(SyntheticRunner {
            fail_phase: Some(Phase::ModelLoad),
            ..SyntheticRunner::default()
        });
        let err = execute_run(&base_config(), &sim(0.0), &runner, &RunOptions::default())
            .unwrap_err();
        assert!(matches!(err, RunError::RunnerFailure(_)), "{err}");
    }

    #[test]
    fn short_meter_trace_is_meter_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.csv");
        let text: String = (0..=16).map(|k| format!("{},2.0\n", k as f64 / 16.0)).collect();
        std::fs::write(&path, text).unwrap();
        let runner = RunnerSpec::Synthetic(SyntheticRunner {
            dataset_load_s: 0.0,
            model_load_s: 0.0,
            ..SyntheticRunner::default()
        });
        let mut config = base_config();
        config.baseline_seconds = 1.0; // inference then ends at t = 6.0
        let err = execute_run(&config, &MeterSpec::Replay(path), &runner, &RunOptions::default())
            .unwrap_err();
        assert!(matches!(err, RunError::MeterFailure(_)), "{err}");
    }

    #[test]
    fn replayed_trace_drives_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.csv");
        // baseline 1.0 W for 3 s, 4.0 W afterwards
        let text: String = (0..16 * 12)
            .map(|k| {
                let t = k as f64 / 16.0;
                format!("{t},{}\n", if t < 3.0 { 1.0 } else { 4.0 })
            })
            .collect();
        std::fs::write(&path, text).unwrap();
        let rec = execute_run(&base_config(), &MeterSpec::Replay(path), &stub(), &RunOptions::default())
            .unwrap();
        assert_eq!(rec.metrics.mean_power_w, 3.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let a = execute_run(&base_config(), &sim(0.05), &stub(), &RunOptions::default()).unwrap();
        let b = execute_run(&base_config(), &sim(0.05), &stub(), &RunOptions::default()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(recompute_metrics(&a).unwrap(), a.metrics);
        verify_record(&a).unwrap();
    }

    #[test]
    fn record_round_trips_through_json() {
        let rec = execute_run(&base_config(), &sim(0.05), &stub(), &RunOptions::default()).unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        let back: RunRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        assert_eq!(recompute_metrics(&back).unwrap(), rec.metrics);
    }

    #[test]
    fn predictions_control_f1_presence() {
        let rec = execute_run(&base_config(), &sim(0.0), &stub(), &RunOptions::default()).unwrap();
        assert!(recompute_metrics(&rec).unwrap().f1_percent.is_some());
        let runner = RunnerSpec::Synthetic(SyntheticRunner {
            inputs: 0,
            ..SyntheticRunner::default()
        });
        let rec = execute_run(&base_config(), &sim(0.0), &runner, &RunOptions::default()).unwrap();
        assert!(rec.predictions.is_none());
        assert_eq!(recompute_metrics(&rec).unwrap().f1_percent, None);
    }

    #[test]
    fn tampered_record_fails_verification() {
        let mut rec =
            execute_run(&base_config(), &sim(0.05), &stub(), &RunOptions::default()).unwrap();
        rec.metrics.energy_j += 1.0;
        assert!(verify_record(&rec).is_err());
    }

    #[test]
    fn noisy_inference_below_baseline_warns() {
        let meter = MeterSpec::Sim(SimSpec {
            profile: LoadProfile::new(2.0).with_noise(0.2),
            seed: 1,
        });
        let rec = execute_run(&base_config(), &meter, &stub(), &RunOptions::default()).unwrap();
        assert!(rec.warnings.iter().any(|w| w.contains("below the baseline")));
    }

    #[test]
    fn meter_gaps_warn() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gappy.csv");
        let text: String = (0..16 * 12)
            .filter(|k| !(100..110).contains(k))
            .map(|k| format!("{},2.0\n", k as f64 / 16.0))
            .collect();
        std::fs::write(&path, text).unwrap();
        let rec = execute_run(&base_config(), &MeterSpec::Replay(path), &stub(), &RunOptions::default())
            .unwrap();
        assert!(rec.warnings.iter().any(|w| w.contains("meter gap")));
    }

    #[test]
    fn synthetic_timeout() {
        let opts = RunOptions {
            timeout: Duration::from_secs(5),
            ..RunOptions::default()
        };
        assert!(matches!(
            execute_run(&base_config(), &sim(0.0), &stub(), &opts),
            Err(RunError::Timeout(_))
        ));
    }

    #[test]
    fn meter_spec_strings() {
        let m: MeterSpec = "sim:baseline=2.0,inference=+3.0,noise=0.05,rate=16,seed=42"
            .parse()
            .unwrap();
        assert_eq!(m.to_string().parse::<MeterSpec>().unwrap(), m);
        assert_eq!(
            "replay:/tmp/x.csv".parse::<MeterSpec>().unwrap(),
            MeterSpec::Replay("/tmp/x.csv".into())
        );
        assert!("usb:/dev/ttyACM0".parse::<MeterSpec>().is_err());
    }

    #[test]
    fn sweep_order_and_count() {
        let mut spec = SweepSpec::new(base_config());
        spec.grid.insert(SweepParam::InputSize, vec![128, 256]);
        spec.grid.insert(SweepParam::BatchSize, vec![1, 4]);
        spec.repeats = 2;
        let order: Vec<_> = spec
            .configs()
            .iter()
            .map(|c| (c.batch_size, c.input_size, c.repeat_index))
            .collect();
        assert_eq!(
            order,
            vec![
                (1, 128, 0),
                (1, 128, 1),
                (1, 256, 0),
                (1, 256, 1),
                (4, 128, 0),
                (4, 128, 1),
                (4, 256, 0),
                (4, 256, 1),
            ]
        );
        assert_eq!(spec.run_count(), 8);
    }

    #[test]
    fn empty_grid_is_identity_sweep() {
        let mut spec = SweepSpec::new(base_config());
        spec.repeats = 1;
        assert_eq!(spec.configs(), vec![base_config()]);
    }

    #[test]
    fn sweep_continues_past_failures() {
        let mut spec = SweepSpec::new(base_config());
        spec.grid.insert(SweepParam::InputSize, vec![64, 128, 256]);
        spec.repeats = 2;
        spec.cooling_seconds = 0.0;
        let runner = RunnerSpec::Synthetic(SyntheticRunner {
            fail_phase: Some(Phase::Inference),
            fail_input_sizes: vec![128],
            ..SyntheticRunner::default()
        });
        let out = execute_sweep(&spec, &sim(0.0), &runner, &SweepOptions::default()).unwrap();
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.failures.len(), 2);
        assert!(out.failures.iter().all(|f| f.config.input_size == 128));

        let abort = SweepOptions {
            abort_on_error: true,
            ..SweepOptions::default()
        };
        let out = execute_sweep(&spec, &sim(0.0), &runner, &abort).unwrap();
        assert!(out.aborted);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.failures.len(), 1);
    }

    #[test]
    fn invalid_sweeps_rejected() {
        let mut spec = SweepSpec::new(base_config());
        spec.repeats = 0;
        assert!(spec.validate().is_err());
        let mut spec = SweepSpec::new(base_config());
        spec.grid.insert(SweepParam::BatchSize, vec![]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn inference_time_scales_with_work() {
        let runner = RunnerSpec::Synthetic(SyntheticRunner {
            inference_s: 1.0,
            inference_s_per_unit: 0.01,
            ..SyntheticRunner::default()
        });
        let mut c = base_config();
        c.input_size = 100;
        c.batch_size = 2;
        let rec = execute_run(&c, &sim(0.0), &runner, &RunOptions::default()).unwrap();
        assert!((rec.metrics.inference_time_s - 3.0).abs() < 1e-9);
    }
}

//! Time-stamped power traces and the analyses run over them.
//!
//! A [`PowerTrace`] is an ordered series of instantaneous power readings from
//! one meter. The functions here estimate the idle baseline, subtract it,
//! cut the trace into lifecycle phases and reduce a trace to energy, mean
//! power or the raw summed-power figure used in the published tables.
//!
//! Two line-oriented text formats are understood:
//!
//! ```text
//! #format: watts
//! 0.0,2.13
//! 0.0625,2.11
//! ```
//!
//! and `#format: va` with `t_seconds,volts,amps` rows. Lines starting with `#`
//! are comments; `#rate_hz:` and `#source:` comments set trace metadata.

use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling rate of the reference USB meter.
pub const DEFAULT_RATE_HZ: f64 = 16.0;

/// Idle window recorded before any work starts. 48 samples at 16 Hz.
pub const DEFAULT_BASELINE_SECONDS: f64 = 3.0;

/// Above this share of negative post-subtraction samples the baseline is
/// considered suspect.
pub const NEGATIVE_FRACTION_WARN: f64 = 0.10;

/// Nominal USB bus voltage used when writing volts-amps rows.
const SERIALIZE_BUS_VOLTS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed row at line {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("timestamp at line {line} does not exceed its predecessor")]
    NonMonotonicTime { line: usize },
    #[error("no samples fall inside the baseline window")]
    EmptyWindow,
    #[error("phase {0} is not present in the phase log")]
    PhaseAbsent(Phase),
    #[error("at least two samples are required to integrate energy")]
    InsufficientSamples,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid phase log: {0}")]
    InvalidPhaseLog(String),
    #[error("i/o error reading trace: {0}")]
    Io(#[from] std::io::Error),
}

/// Lifecycle phase of one measured run, in canonical order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    DatasetLoad,
    ModelLoad,
    Inference,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Baseline,
        Phase::DatasetLoad,
        Phase::ModelLoad,
        Phase::Inference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::DatasetLoad => "dataset_load",
            Phase::ModelLoad => "model_load",
            Phase::Inference => "inference",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds since run start.
    pub t: f64,
    pub watts: f64,
}

impl PowerSample {
    pub fn new(t: f64, watts: f64) -> Self {
        Self { t, watts }
    }
}

/// Ordered power samples from a single meter source.
///
/// Timestamps are strictly increasing. Raw meter traces are non-negative;
/// traces produced by [`subtract_baseline`] may dip below zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPowerTrace")]
pub struct PowerTrace {
    samples: Vec<PowerSample>,
    nominal_rate_hz: f64,
    source_id: String,
}

#[derive(Deserialize)]
struct RawPowerTrace {
    samples: Vec<PowerSample>,
    nominal_rate_hz: f64,
    source_id: String,
}

impl TryFrom<RawPowerTrace> for PowerTrace {
    type Error = TraceError;

    fn try_from(raw: RawPowerTrace) -> Result<Self, Self::Error> {
        PowerTrace::new(raw.samples, raw.nominal_rate_hz, raw.source_id)
    }
}

impl PowerTrace {
    pub fn new(
        samples: Vec<PowerSample>,
        nominal_rate_hz: f64,
        source_id: impl Into<String>,
    ) -> Result<Self, TraceError> {
        if !(nominal_rate_hz.is_finite() && nominal_rate_hz > 0.0) {
            return Err(TraceError::InvalidTrace(format!(
                "nominal rate must be positive, got {nominal_rate_hz}"
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || !s.watts.is_finite() {
                return Err(TraceError::InvalidTrace(format!(
                    "sample {i} is not finite"
                )));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(TraceError::InvalidTrace(format!(
                    "sample {i} does not advance in time"
                )));
            }
        }
        Ok(Self {
            samples,
            nominal_rate_hz,
            source_id: source_id.into(),
        })
    }

    pub fn empty(nominal_rate_hz: f64, source_id: impl Into<String>) -> Self {
        Self::new(Vec::new(), nominal_rate_hz, source_id).expect("empty trace is valid")
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn nominal_rate_hz(&self) -> f64 {
        self.nominal_rate_hz
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_t(&self) -> Option<f64> {
        self.samples.first().map(|s| s.t)
    }

    pub fn last_t(&self) -> Option<f64> {
        self.samples.last().map(|s| s.t)
    }

    /// Largest spacing between consecutive samples.
    pub fn max_gap(&self) -> Option<f64> {
        self.samples
            .windows(2)
            .map(|w| w[1].t - w[0].t)
            .reduce(f64::max)
    }

    fn with_samples(&self, samples: Vec<PowerSample>) -> Self {
        Self {
            samples,
            nominal_rate_hz: self.nominal_rate_hz,
            source_id: self.source_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub watts: f64,
    pub window_seconds: f64,
    pub sample_count: usize,
    /// Sample standard deviation of the window, in W.
    pub dispersion: f64,
}

/// One phase interval, half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

impl PhaseSpan {
    pub fn new(phase: Phase, start: f64, end: f64) -> Self {
        Self { phase, start, end }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }
}

/// Start/end instants of each lifecycle phase of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PhaseSpan>", into = "Vec<PhaseSpan>")]
pub struct PhaseLog {
    spans: Vec<PhaseSpan>,
}

impl TryFrom<Vec<PhaseSpan>> for PhaseLog {
    type Error = TraceError;

    fn try_from(spans: Vec<PhaseSpan>) -> Result<Self, Self::Error> {
        PhaseLog::new(spans)
    }
}

impl From<PhaseLog> for Vec<PhaseSpan> {
    fn from(log: PhaseLog) -> Self {
        log.spans
    }
}

impl PhaseLog {
    pub fn new(spans: Vec<PhaseSpan>) -> Result<Self, TraceError> {
        let bad = |m: String| Err(TraceError::InvalidPhaseLog(m));
        for (i, span) in spans.iter().enumerate() {
            if !span.start.is_finite() || !span.end.is_finite() {
                return bad(format!("{} has a non-finite bound", span.phase));
            }
            if span.start >= span.end {
                return bad(format!("{} does not have start < end", span.phase));
            }
            if i > 0 {
                let prev = &spans[i - 1];
                if prev.phase >= span.phase {
                    return bad(format!(
                        "{} follows {} (out of order or repeated)",
                        span.phase, prev.phase
                    ));
                }
                if span.start < prev.end {
                    return bad(format!("{} overlaps {}", span.phase, prev.phase));
                }
            }
        }
        for required in [Phase::Baseline, Phase::Inference] {
            if !spans.iter().any(|s| s.phase == required) {
                return bad(format!("mandatory phase {required} missing"));
            }
        }
        Ok(Self { spans })
    }

    pub fn spans(&self) -> &[PhaseSpan] {
        &self.spans
    }

    pub fn get(&self, phase: Phase) -> Option<&PhaseSpan> {
        self.spans.iter().find(|s| s.phase == phase)
    }

    pub fn span(&self, phase: Phase) -> Result<&PhaseSpan, TraceError> {
        self.get(phase).ok_or(TraceError::PhaseAbsent(phase))
    }

    /// End of the last phase.
    pub fn end(&self) -> f64 {
        self.spans.last().map_or(0.0, |s| s.end)
    }

    /// Phase whose half-open interval contains `t`.
    pub fn phase_at(&self, t: f64) -> Option<Phase> {
        self.spans.iter().find(|s| s.contains(t)).map(|s| s.phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    /// `t_seconds,watts`
    #[default]
    Watts,
    /// `t_seconds,volts,amps`
    #[serde(rename = "va")]
    VoltsAmps,
}

impl TraceFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceFormat::Watts => "watts",
            TraceFormat::VoltsAmps => "va",
        }
    }
}

impl FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "watts" => Ok(TraceFormat::Watts),
            "va" => Ok(TraceFormat::VoltsAmps),
            other => Err(format!("unknown trace format `{other}`")),
        }
    }
}

/// Streaming reader over a trace text source.
///
/// Yields samples one at a time and stops after the first error. Header
/// comments seen before the first data row update the format and metadata.
pub struct TraceReader<R> {
    input: R,
    format: TraceFormat,
    rate_hz: f64,
    source_id: String,
    line_no: usize,
    last_t: Option<f64>,
    seen_data: bool,
    done: bool,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R, format: TraceFormat) -> Self {
        Self {
            input,
            format,
            rate_hz: DEFAULT_RATE_HZ,
            source_id: String::new(),
            line_no: 0,
            last_t: None,
            seen_data: false,
            done: false,
            buf: String::new(),
        }
    }

    pub fn format(&self) -> TraceFormat {
        self.format
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    fn header(&mut self, comment: &str) -> Result<(), TraceError> {
        let Some((key, value)) = comment.split_once(':') else {
            return Ok(());
        };
        let value = value.trim();
        let malformed = |detail: String| TraceError::MalformedRow {
            line: self.line_no,
            detail,
        };
        match key.trim() {
            "format" if !self.seen_data => {
                self.format = value.parse().map_err(malformed)?;
            }
            "rate_hz" if !self.seen_data => {
                let rate: f64 = value
                    .parse()
                    .map_err(|_| malformed(format!("bad rate `{value}`")))?;
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(malformed(format!("bad rate `{value}`")));
                }
                self.rate_hz = rate;
            }
            "source" if !self.seen_data => self.source_id = value.to_string(),
            _ => {}
        }
        Ok(())
    }

    fn row(&mut self, line: &str) -> Result<PowerSample, TraceError> {
        let line_no = self.line_no;
        let malformed = |detail: &str| TraceError::MalformedRow {
            line: line_no,
            detail: detail.to_string(),
        };
        let fields = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| malformed("non-numeric field"))?;
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(malformed("non-finite field"));
        }
        let (t, watts) = match (self.format, fields.as_slice()) {
            (TraceFormat::Watts, &[t, w]) => (t, w),
            (TraceFormat::VoltsAmps, &[t, v, a]) => (t, v * a),
            (TraceFormat::Watts, _) => return Err(malformed("expected `t,watts`")),
            (TraceFormat::VoltsAmps, _) => return Err(malformed("expected `t,volts,amps`")),
        };
        if watts < 0.0 {
            return Err(malformed("negative power reading"));
        }
        if let Some(prev) = self.last_t {
            if t <= prev {
                return Err(TraceError::NonMonotonicTime { line: line_no });
            }
        }
        self.last_t = Some(t);
        self.seen_data = true;
        Ok(PowerSample::new(t, watts))
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<PowerSample, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => self.done = true,
                Ok(_) => {
                    self.line_no += 1;
                    let line = std::mem::take(&mut self.buf);
                    let trimmed = line.trim();
                    let result = if trimmed.is_empty() {
                        continue;
                    } else if let Some(comment) = trimmed.strip_prefix('#') {
                        self.header(comment).map(|_| None)
                    } else {
                        self.row(trimmed).map(Some)
                    };
                    self.buf = line;
                    match result {
                        Ok(None) => continue,
                        Ok(Some(sample)) => return Some(Ok(sample)),
                        Err(e) => {
                            self.done = true;
                            return Some(Err(e));
                        }
                    }
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        None
    }
}

/// Parses a whole trace. A `#format:` header, when present, overrides
/// `format`.
pub fn parse_trace(text: &str, format: TraceFormat) -> Result<PowerTrace, TraceError> {
    read_trace(text.as_bytes(), format)
}

pub fn read_trace<R: BufRead>(input: R, format: TraceFormat) -> Result<PowerTrace, TraceError> {
    let mut reader = TraceReader::new(input, format);
    let samples = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    let source = reader.source_id().to_string();
    PowerTrace::new(samples, reader.rate_hz(), source)
}

/// Writes a trace in the given text format, with metadata headers.
///
/// Volts-amps rows use a nominal 5 V bus; the current is chosen so that
/// `volts * amps` reproduces the stored wattage bit for bit.
pub fn serialize_trace(trace: &PowerTrace, format: TraceFormat) -> String {
    let mut out = String::with_capacity(trace.len() * 20 + 64);
    let _ = writeln!(out, "#format: {}", format.as_str());
    let _ = writeln!(out, "#rate_hz: {}", trace.nominal_rate_hz());
    if !trace.source_id().is_empty() {
        let _ = writeln!(out, "#source: {}", trace.source_id());
    }
    for s in trace.samples() {
        match format {
            TraceFormat::Watts => {
                let _ = writeln!(out, "{},{}", s.t, s.watts);
            }
            TraceFormat::VoltsAmps => {
                let (v, a) = split_watts(s.watts);
                let _ = writeln!(out, "{},{},{}", s.t, v, a);
            }
        }
    }
    out
}

fn split_watts(watts: f64) -> (f64, f64) {
    let amps = watts / SERIALIZE_BUS_VOLTS;
    for candidate in [amps, amps.next_up(), amps.next_down()] {
        if SERIALIZE_BUS_VOLTS * candidate == watts {
            return (SERIALIZE_BUS_VOLTS, candidate);
        }
    }
    (1.0, watts)
}

/// Mean power over samples with `t` in `[0, window_seconds)`.
pub fn estimate_baseline(
    trace: &PowerTrace,
    window_seconds: f64,
) -> Result<BaselineEstimate, TraceError> {
    if !(window_seconds.is_finite() && window_seconds > 0.0) {
        return Err(TraceError::InvalidTrace(format!(
            "baseline window must be positive, got {window_seconds}"
        )));
    }
    estimate_baseline_between(trace, 0.0, window_seconds)
}

/// Mean power over samples with `t` in `[start, end)`.
pub fn estimate_baseline_between(
    trace: &PowerTrace,
    start: f64,
    end: f64,
) -> Result<BaselineEstimate, TraceError> {
    let window: Vec<f64> = trace
        .samples()
        .iter()
        .filter(|s| start <= s.t && s.t < end)
        .map(|s| s.watts)
        .collect();
    if window.is_empty() {
        return Err(TraceError::EmptyWindow);
    }
    let n = window.len() as f64;
    // Shifted mean: exact for constant windows.
    let pivot = window[0];
    let mean = pivot + window.iter().map(|w| w - pivot).sum::<f64>() / n;
    if mean < 0.0 {
        return Err(TraceError::InvalidTrace(
            "baseline window has negative mean power".into(),
        ));
    }
    let dispersion = if window.len() > 1 {
        (window.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BaselineEstimate {
        watts: mean,
        window_seconds: end - start,
        sample_count: window.len(),
        dispersion,
    })
}

/// Baseline-subtracted trace plus the share of samples that went negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtractedTrace {
    pub trace: PowerTrace,
    pub negative_fraction: f64,
}

/// Subtracts the baseline from every sample. Negative results are kept.
pub fn subtract_baseline(trace: &PowerTrace, baseline: &BaselineEstimate) -> SubtractedTrace {
    let samples: Vec<PowerSample> = trace
        .samples()
        .iter()
        .map(|s| PowerSample::new(s.t, s.watts - baseline.watts))
        .collect();
    let negative = samples.iter().filter(|s| s.watts < 0.0).count();
    let negative_fraction = if samples.is_empty() {
        0.0
    } else {
        negative as f64 / samples.len() as f64
    };
    SubtractedTrace {
        trace: trace.with_samples(samples),
        negative_fraction,
    }
}

/// Samples falling in the phase's half-open interval.
pub fn slice_by_phase(
    trace: &PowerTrace,
    phases: &PhaseLog,
    phase: Phase,
) -> Result<PowerTrace, TraceError> {
    let span = phases.span(phase)?;
    let samples = trace
        .samples()
        .iter()
        .filter(|s| span.contains(s.t))
        .copied()
        .collect();
    Ok(trace.with_samples(samples))
}

/// Trapezoidal integral of power over time, in joules.
pub fn integrate_energy(trace: &PowerTrace) -> Result<f64, TraceError> {
    if trace.len() < 2 {
        return Err(TraceError::InsufficientSamples);
    }
    Ok(trace
        .samples()
        .windows(2)
        .map(|w| 0.5 * (w[0].watts + w[1].watts) * (w[1].t - w[0].t))
        .sum())
}

/// Plain sum of the sample values. Not dimensionally an energy; kept
/// because the published power tables are built this way.
pub fn summed_power(trace: &PowerTrace) -> f64 {
    trace.samples().iter().map(|s| s.watts).sum()
}

pub fn mean_power(trace: &PowerTrace) -> Result<f64, TraceError> {
    if trace.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(summed_power(trace) / trace.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(points: &[(f64, f64)]) -> PowerTrace {
        PowerTrace::new(
            points.iter().map(|&(t, w)| PowerSample::new(t, w)).collect(),
            DEFAULT_RATE_HZ,
            "test",
        )
        .unwrap()
    }

    fn constant(watts: f64, n: usize) -> PowerTrace {
        let pts: Vec<_> = (0..n).map(|i| (i as f64 / 16.0, watts)).collect();
        trace(&pts)
    }

    fn log(spans: &[(Phase, f64, f64)]) -> PhaseLog {
        PhaseLog::new(
            spans
                .iter()
                .map(|&(p, s, e)| PhaseSpan::new(p, s, e))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_watts_rows() {
        let t = parse_trace("0.0,2.0\n0.0625,2.0", TraceFormat::Watts).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.samples().iter().all(|s| s.watts == 2.0));
        assert_eq!(t.samples()[1].t, 0.0625);
    }

    #[test]
    fn parses_volts_amps_rows() {
        let t = parse_trace("0.0,5.0,0.4", TraceFormat::VoltsAmps).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t.samples()[0].watts - 2.0).abs() < 1e-12);
    }

    #[test]
    fn header_selects_format() {
        let t = parse_trace("# meter dump\n#format: va\n0.0,5.0,0.4\n", TraceFormat::Watts)
            .unwrap();
        assert!((t.samples()[0].watts - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_repeated_timestamp() {
        let err = parse_trace("0.0,2.0\n0.0,2.1", TraceFormat::Watts).unwrap_err();
        assert!(matches!(err, TraceError::NonMonotonicTime { line: 2 }), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_trace("#c\n0.0,2.0\n0.1,abc\n", TraceFormat::Watts).unwrap_err();
        assert!(matches!(err, TraceError::MalformedRow { line: 3, .. }), "{err}");
        let err = parse_trace("0.0,2.0,1.0\n", TraceFormat::Watts).unwrap_err();
        assert!(matches!(err, TraceError::MalformedRow { line: 1, .. }));
        let err = parse_trace("0.0,-1.0\n", TraceFormat::Watts).unwrap_err();
        assert!(matches!(err, TraceError::MalformedRow { line: 1, .. }));
    }

    #[test]
    fn baseline_of_constant_window() {
        let b = estimate_baseline(&constant(1.5, 60), 3.0).unwrap();
        assert_eq!(b.watts, 1.5);
        assert_eq!(b.sample_count, 48);
        assert_eq!(b.dispersion, 0.0);
    }

    #[test]
    fn baseline_mean_and_dispersion() {
        let b = estimate_baseline(&trace(&[(0.0, 2.0), (1.0, 4.0), (3.5, 100.0)]), 3.0).unwrap();
        assert_eq!(b.watts, 3.0);
        assert_eq!(b.sample_count, 2);
        assert!((b.dispersion - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn baseline_window_without_samples() {
        let t = trace(&[(5.0, 1.0), (6.0, 1.0)]);
        assert!(matches!(estimate_baseline(&t, 3.0), Err(TraceError::EmptyWindow)));
    }

    #[test]
    fn subtraction_preserves_negatives() {
        let b = |w| BaselineEstimate {
            watts: w,
            window_seconds: 3.0,
            sample_count: 1,
            dispersion: 0.0,
        };
        let out = subtract_baseline(&constant(5.0, 4), &b(2.0));
        assert!(out.trace.samples().iter().all(|s| s.watts == 3.0));
        let out = subtract_baseline(&constant(2.0, 4), &b(2.0));
        assert!(out.trace.samples().iter().all(|s| s.watts == 0.0));
        assert_eq!(out.negative_fraction, 0.0);
        let out = subtract_baseline(&trace(&[(0.0, 1.0), (1.0, 3.0)]), &b(2.0));
        let w: Vec<_> = out.trace.samples().iter().map(|s| s.watts).collect();
        assert_eq!(w, vec![-1.0, 1.0]);
        assert_eq!(out.negative_fraction, 0.5);
    }

    #[test]
    fn slicing_is_half_open() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, 1.0)).collect();
        let t = trace(&pts);
        let phases = log(&[(Phase::Baseline, 0.0, 4.0), (Phase::Inference, 4.0, 9.0)]);
        let s = slice_by_phase(&t, &phases, Phase::Inference).unwrap();
        let ts: Vec<_> = s.samples().iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn slicing_empty_and_absent_phase() {
        let t = trace(&[(0.0, 1.0), (10.0, 1.0)]);
        let phases = log(&[(Phase::Baseline, 0.0, 4.0), (Phase::Inference, 4.0, 9.0)]);
        assert!(slice_by_phase(&t, &phases, Phase::Inference).unwrap().is_empty());
        assert!(matches!(
            slice_by_phase(&t, &phases, Phase::DatasetLoad),
            Err(TraceError::PhaseAbsent(Phase::DatasetLoad))
        ));
    }

    #[test]
    fn energy_of_constant_and_ramp() {
        assert_eq!(
            integrate_energy(&trace(&[(0.0, 2.0), (1.0, 2.0), (2.0, 2.0)])).unwrap(),
            4.0
        );
        assert_eq!(integrate_energy(&trace(&[(0.0, 0.0), (2.0, 4.0)])).unwrap(), 4.0);
        assert!(matches!(
            integrate_energy(&trace(&[(0.0, 1.0)])),
            Err(TraceError::InsufficientSamples)
        ));
    }

    #[test]
    fn summed_and_mean_power() {
        assert_eq!(summed_power(&constant(2.0, 3)), 6.0);
        assert_eq!(summed_power(&PowerTrace::empty(16.0, "")), 0.0);
        let post = PowerTrace::new(
            vec![
                PowerSample::new(0.0, 1.5),
                PowerSample::new(1.0, 2.5),
                PowerSample::new(2.0, -0.5),
            ],
            16.0,
            "",
        )
        .unwrap();
        assert_eq!(summed_power(&post), 3.5);
        assert_eq!(mean_power(&constant(3.0, 5)).unwrap(), 3.0);
        assert_eq!(mean_power(&trace(&[(0.0, 2.0), (1.0, 4.0)])).unwrap(), 3.0);
        assert!(matches!(
            mean_power(&PowerTrace::empty(16.0, "")),
            Err(TraceError::EmptyTrace)
        ));
    }

    #[test]
    fn phase_log_invariants() {
        let mk = |spans: &[(Phase, f64, f64)]| {
            PhaseLog::new(
                spans
                    .iter()
                    .map(|&(p, s, e)| PhaseSpan::new(p, s, e))
                    .collect(),
            )
        };
        assert!(mk(&[(Phase::Baseline, 0.0, 3.0), (Phase::Inference, 3.0, 5.0)]).is_ok());
        // missing inference
        assert!(mk(&[(Phase::Baseline, 0.0, 3.0)]).is_err());
        // out of order
        assert!(mk(&[
            (Phase::Baseline, 0.0, 3.0),
            (Phase::ModelLoad, 3.0, 4.0),
            (Phase::DatasetLoad, 4.0, 5.0),
            (Phase::Inference, 5.0, 6.0),
        ])
        .is_err());
        // overlap
        assert!(mk(&[(Phase::Baseline, 0.0, 3.0), (Phase::Inference, 2.0, 5.0)]).is_err());
        // empty interval
        assert!(mk(&[(Phase::Baseline, 0.0, 0.0), (Phase::Inference, 2.0, 5.0)]).is_err());
    }

    #[test]
    fn phase_log_json_is_validated() {
        let ok: PhaseLog = serde_json::from_str(
            r#"[{"phase":"baseline","start":0,"end":3},{"phase":"inference","start":3,"end":8}]"#,
        )
        .unwrap();
        assert_eq!(ok.span(Phase::Inference).unwrap().duration(), 5.0);
        let bad = serde_json::from_str::<PhaseLog>(
            r#"[{"phase":"inference","start":3,"end":8},{"phase":"baseline","start":0,"end":3}]"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn max_gap_finds_dropouts() {
        let t = trace(&[(0.0, 1.0), (0.0625, 1.0), (1.0, 1.0)]);
        assert_eq!(t.max_gap(), Some(0.9375));
    }

    fn arb_trace() -> impl Strategy<Value = PowerTrace> {
        prop::collection::vec((1e-4f64..1.0, 0.0f64..50.0), 0..60).prop_map(|steps| {
            let mut t = 0.0;
            let samples = steps
                .into_iter()
                .map(|(dt, w)| {
                    t += dt;
                    PowerSample::new(t, w)
                })
                .collect();
            PowerTrace::new(samples, 16.0, "prop").unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialize_round_trips(trace in arb_trace(), va in any::<bool>()) {
            let fmt = if va { TraceFormat::VoltsAmps } else { TraceFormat::Watts };
            let text = serialize_trace(&trace, fmt);
            let back = parse_trace(&text, TraceFormat::Watts).unwrap();
            prop_assert_eq!(back.samples(), trace.samples());
            prop_assert_eq!(back.source_id(), trace.source_id());
        }

        #[test]
        fn subtraction_shifts_sum(trace in arb_trace(), b in 0.0f64..10.0) {
            let est = BaselineEstimate { watts: b, window_seconds: 3.0, sample_count: 1, dispersion: 0.0 };
            let lhs = summed_power(&subtract_baseline(&trace, &est).trace);
            let rhs = summed_power(&trace) - b * trace.len() as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-9 * trace.len().max(1) as f64);
        }

        #[test]
        fn contiguous_phases_partition_samples(
            trace in arb_trace(),
            cuts in prop::collection::vec(0.01f64..5.0, 4),
            include_dataset in any::<bool>(),
            include_model in any::<bool>(),
        ) {
            let mut phases = vec![Phase::Baseline];
            if include_dataset { phases.push(Phase::DatasetLoad); }
            if include_model { phases.push(Phase::ModelLoad); }
            phases.push(Phase::Inference);
            let mut start = 0.0;
            let spans: Vec<_> = phases.iter().zip(&cuts).map(|(&p, &len)| {
                let s = PhaseSpan::new(p, start, start + len);
                start += len;
                s
            }).collect();
            let log = PhaseLog::new(spans).unwrap();
            let mut union: Vec<PowerSample> = phases
                .iter()
                .flat_map(|&p| slice_by_phase(&trace, &log, p).unwrap().samples().to_vec())
                .collect();
            union.sort_by(|a, b| a.t.total_cmp(&b.t));
            let expected: Vec<_> = trace.samples().iter().filter(|s| s.t < log.end()).copied().collect();
            prop_assert_eq!(union, expected);
        }

        #[test]
        fn constant_window_has_zero_dispersion(w in 0.0f64..100.0, n in 1usize..100) {
            let pts: Vec<_> = (0..n).map(|i| PowerSample::new(i as f64 * 0.01, w)).collect();
            let t = PowerTrace::new(pts, 16.0, "").unwrap();
            let b = estimate_baseline(&t, 10.0).unwrap();
            prop_assert_eq!(b.watts, w);
            prop_assert_eq!(b.dispersion, 0.0);
        }
    }
}

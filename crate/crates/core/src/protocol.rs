//! Wire protocol between the harness and an external inference runner.
//!
//! The harness writes one JSON config line to the runner's stdin. The runner
//! answers with line-delimited JSON events on stdout:
//!
//! ```text
//! {"kind":"hello","t_runner":0.0}
//! {"kind":"phase_start","phase":"baseline","t_runner":0.01}
//! {"kind":"phase_end","phase":"baseline","t_runner":3.01}
//! {"kind":"phase_start","phase":"inference","t_runner":3.2}
//! {"kind":"prediction","input_id":0,"predicted":"7","truth":"7","t_runner":3.3}
//! {"kind":"phase_end","phase":"inference","t_runner":8.2}
//! {"kind":"done","t_runner":8.21}
//! ```
//!
//! `memory_report` events carry a `resident_bytes` figure for memory the
//! harness cannot observe itself (accelerator memory, for instance).

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::trace::{Phase, PhaseLog, PhaseSpan, DEFAULT_BASELINE_SECONDS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("malformed event: {0}")]
    MalformedEvent(String),
    #[error("unknown event kind `{0}`")]
    UnknownKind(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("runner reported a fatal error: {0}")]
    RunnerFailure(String),
}

fn default_baseline_seconds() -> f64 {
    DEFAULT_BASELINE_SECONDS
}

/// Configuration of a single measured run, as sent to the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model_id: String,
    pub device_id: String,
    pub framework_id: String,
    /// Tokens or pixels per side, depending on the model.
    pub input_size: u64,
    pub batch_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_window: Option<u64>,
    pub dataset_ref: String,
    #[serde(default)]
    pub repeat_index: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_baseline_seconds")]
    pub baseline_seconds: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::InvalidConfig(m.to_string()));
        if self.input_size == 0 {
            return bad("input_size must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.token_window == Some(0) {
            return bad("token_window must be at least 1");
        }
        if !(self.baseline_seconds.is_finite() && self.baseline_seconds > 0.0) {
            return bad("baseline_seconds must be positive");
        }
        Ok(())
    }

    /// Key identifying the sweep cell this run belongs to (everything but the
    /// repeat index).
    pub fn cell_key(&self) -> String {
        let mut cell = self.clone();
        cell.repeat_index = 0;
        serde_json::to_string(&cell).expect("config serializes")
    }
}

/// Serializes a config as a single JSON line (no trailing newline).
pub fn encode_config(config: &RunConfig) -> Result<String, ProtocolError> {
    config.validate()?;
    Ok(serde_json::to_string(config).expect("config serializes"))
}

pub fn decode_config(line: &str) -> Result<RunConfig, ProtocolError> {
    let config: RunConfig = serde_json::from_str(line.trim())
        .map_err(|e| ProtocolError::InvalidConfig(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    Hello,
    PhaseStart(Phase),
    PhaseEnd(Phase),
    Prediction {
        input_id: u64,
        predicted: String,
        truth: String,
    },
    MemoryReport {
        resident_bytes: u64,
    },
    Done,
    Fatal {
        message: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Hello => "hello",
            EventBody::PhaseStart(_) => "phase_start",
            EventBody::PhaseEnd(_) => "phase_end",
            EventBody::Prediction { .. } => "prediction",
            EventBody::MemoryReport { .. } => "memory_report",
            EventBody::Done => "done",
            EventBody::Fatal { .. } => "fatal",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EventBody::Done | EventBody::Fatal { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunnerEvent {
    /// Runner-side clock. Diagnostic only; phases are stamped by the harness.
    pub t_runner: Option<f64>,
    pub body: EventBody,
}

impl RunnerEvent {
    pub fn new(t_runner: f64, body: EventBody) -> Self {
        Self {
            t_runner: Some(t_runner),
            body,
        }
    }
}

pub fn encode_event(event: &RunnerEvent) -> String {
    let mut obj = Map::new();
    obj.insert("kind".into(), json!(event.body.kind()));
    match &event.body {
        EventBody::PhaseStart(p) | EventBody::PhaseEnd(p) => {
            obj.insert("phase".into(), json!(p.as_str()));
        }
        EventBody::Prediction {
            input_id,
            predicted,
            truth,
        } => {
            obj.insert("input_id".into(), json!(input_id));
            obj.insert("predicted".into(), json!(predicted));
            obj.insert("truth".into(), json!(truth));
        }
        EventBody::MemoryReport { resident_bytes } => {
            obj.insert("resident_bytes".into(), json!(resident_bytes));
        }
        EventBody::Fatal { message } => {
            obj.insert("message".into(), json!(message));
        }
        EventBody::Hello | EventBody::Done => {}
    }
    if let Some(t) = event.t_runner {
        obj.insert("t_runner".into(), json!(t));
    }
    Value::Object(obj).to_string()
}

/// Parses one event line. Unknown fields are ignored; unknown kinds are not.
pub fn decode_event(line: &str) -> Result<RunnerEvent, ProtocolError> {
    let malformed = |m: String| ProtocolError::MalformedEvent(m);
    let value: Value =
        serde_json::from_str(line.trim()).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("event is not a JSON object".into()))?;
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `kind`".into()))?;
    let text = |field: &str| -> Result<String, ProtocolError> {
        obj.get(field)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed(format!("{kind}: missing string field `{field}`")))
    };
    let count = |field: &str| -> Result<u64, ProtocolError> {
        obj.get(field)
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed(format!("{kind}: missing integer field `{field}`")))
    };
    let phase = || -> Result<Phase, ProtocolError> {
        text("phase")?
            .parse()
            .map_err(|e: String| malformed(format!("{kind}: {e}")))
    };
    let t_runner = match obj.get("t_runner") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_f64()
                .ok_or_else(|| malformed(format!("{kind}: `t_runner` is not a number")))?,
        ),
    };
    let body = match kind {
        "hello" => EventBody::Hello,
        "phase_start" => EventBody::PhaseStart(phase()?),
        "phase_end" => EventBody::PhaseEnd(phase()?),
        "prediction" => EventBody::Prediction {
            input_id: count("input_id")?,
            predicted: text("predicted")?,
            truth: text("truth")?,
        },
        "memory_report" => EventBody::MemoryReport {
            resident_bytes: count("resident_bytes")?,
        },
        "done" => EventBody::Done,
        "fatal" => EventBody::Fatal {
            message: text("message").unwrap_or_default(),
        },
        other => return Err(ProtocolError::UnknownKind(other.to_string())),
    };
    Ok(RunnerEvent { t_runner, body })
}

/// Checks a complete event stream and builds the phase log from the
/// harness receipt times.
///
/// The accepted language is `hello (baseline) (dataset_load)? (model_load)?
/// (inference) done`, each phase being a `phase_start`/`phase_end` pair.
/// Predictions may only appear inside the inference pair; memory reports may
/// appear anywhere between `hello` and the terminal event.
pub fn validate_sequence(
    events: &[RunnerEvent],
    harness_times: &[f64],
) -> Result<PhaseLog, ProtocolError> {
    let violation = |m: String| Err(ProtocolError::ProtocolViolation(m));
    if events.len() != harness_times.len() {
        return violation(format!(
            "{} events but {} receipt times",
            events.len(),
            harness_times.len()
        ));
    }
    if harness_times.iter().any(|t| !t.is_finite()) || harness_times.windows(2).any(|w| w[1] < w[0])
    {
        return violation("receipt times are not monotone".into());
    }
    let Some(terminal) = events.iter().position(|e| e.body.is_terminal()) else {
        return violation("stream ended without done or fatal".into());
    };
    if terminal + 1 != events.len() {
        return violation(format!(
            "{} event(s) after {}",
            events.len() - terminal - 1,
            events[terminal].body.kind()
        ));
    }
    if let EventBody::Fatal { message } = &events[terminal].body {
        return Err(ProtocolError::RunnerFailure(message.clone()));
    }
    if !matches!(events.first().map(|e| &e.body), Some(EventBody::Hello)) {
        return violation("first event is not hello".into());
    }

    let mut spans = Vec::new();
    let mut open: Option<(Phase, f64)> = None;
    let mut last_closed: Option<Phase> = None;
    for (i, (event, &t)) in events.iter().zip(harness_times).enumerate().take(terminal).skip(1) {
        match &event.body {
            EventBody::Hello => return violation(format!("repeated hello at event {i}")),
            EventBody::PhaseStart(p) => {
                if let Some((q, _)) = open {
                    return violation(format!("{p} started while {q} is open"));
                }
                if let Some(q) = last_closed {
                    if q >= *p {
                        return violation(format!("{p} started after {q}"));
                    }
                }
                open = Some((*p, t));
            }
            EventBody::PhaseEnd(p) => match open.take() {
                Some((q, start)) if q == *p => {
                    if t <= start {
                        return violation(format!("{p} has non-positive duration"));
                    }
                    spans.push(PhaseSpan::new(*p, start, t));
                    last_closed = Some(*p);
                }
                _ => return violation(format!("{p} ended without a matching start")),
            },
            EventBody::Prediction { .. } => {
                if !matches!(open, Some((Phase::Inference, _))) {
                    return violation(format!("prediction outside inference at event {i}"));
                }
            }
            EventBody::MemoryReport { .. } => {}
            EventBody::Done | EventBody::Fatal { .. } => unreachable!("terminal handled above"),
        }
    }
    if let Some((p, _)) = open {
        return violation(format!("{p} never ended"));
    }
    PhaseLog::new(spans).map_err(|e| ProtocolError::ProtocolViolation(e.to_string()))
}

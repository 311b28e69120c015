//! Benchmarking harness for inference workloads on edge devices.
//!
//! A run drives a model runner through its phases while a power meter
//! records a trace. The harness slices the trace by phase, subtracts the
//! idle baseline and derives quality, latency, power, energy and memory
//! metrics. Repeated runs are aggregated into confidence intervals and
//! compared across devices.

pub mod metrics;
pub mod orchestrator;
pub mod protocol;
pub mod report;
pub mod simmeter;
pub mod trace;

pub use metrics::{aggregate, f1_score, AggregateMetric, Averaging, MetricSet, PredictionSet};
pub use orchestrator::{execute_run, execute_sweep, RunError, RunRecord, SweepSpec};
pub use protocol::RunConfig;
pub use report::{build_comparison, emit, format_interval, rank_table, OutputFormat};
pub use trace::{Phase, PhaseLog, PowerTrace};

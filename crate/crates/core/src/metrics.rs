//! Per-run quality and resource metrics, and repeat aggregation.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::trace::{Phase, PhaseLog};

const BYTES_PER_MB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction set is empty")]
    EmptyPredictions,
    #[error("phase {0} is not present in the phase log")]
    PhaseAbsent(Phase),
    #[error("no memory samples fall inside phase {0}")]
    NoSamplesInPhase(Phase),
    #[error("degrees of freedom must be at least 1, got {0}")]
    InvalidDf(u64),
    #[error("probability must lie in (0, 1), got {0}")]
    InvalidP(f64),
    #[error("cannot aggregate an empty sample")]
    EmptyInput,
    #[error("invalid memory samples: {0}")]
    InvalidMemorySamples(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub input_id: u64,
    pub predicted: String,
    pub truth: String,
}

/// Predicted/true label pairs, ordered by input id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<Prediction>", into = "Vec<Prediction>")]
pub struct PredictionSet {
    pairs: Vec<Prediction>,
}

impl From<Vec<Prediction>> for PredictionSet {
    fn from(mut pairs: Vec<Prediction>) -> Self {
        pairs.sort_by_key(|p| p.input_id);
        Self { pairs }
    }
}

impl From<PredictionSet> for Vec<Prediction> {
    fn from(set: PredictionSet) -> Self {
        set.pairs
    }
}

impl PredictionSet {
    /// Builds a set from `(predicted, truth)` pairs, numbering inputs in order.
    pub fn from_labels<P, T>(pairs: impl IntoIterator<Item = (P, T)>) -> Self
    where
        P: Into<String>,
        T: Into<String>,
    {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (p, t))| Prediction {
                input_id: i as u64,
                predicted: p.into(),
                truth: t.into(),
            })
            .collect::<Vec<_>>()
            .into()
    }

    pub fn pairs(&self) -> &[Prediction] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub t: f64,
    pub resident_bytes: u64,
}

/// Resident-set readings of the runner process tree, strictly increasing in t.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<MemorySample>", into = "Vec<MemorySample>")]
pub struct MemorySamples {
    samples: Vec<MemorySample>,
}

impl TryFrom<Vec<MemorySample>> for MemorySamples {
    type Error = MetricsError;

    fn try_from(samples: Vec<MemorySample>) -> Result<Self, Self::Error> {
        MemorySamples::new(samples)
    }
}

impl From<MemorySamples> for Vec<MemorySample> {
    fn from(m: MemorySamples) -> Self {
        m.samples
    }
}

impl MemorySamples {
    pub fn new(samples: Vec<MemorySample>) -> Result<Self, MetricsError> {
        for (i, s) in samples.iter().enumerate() {
            if !s.t.is_finite() {
                return Err(MetricsError::InvalidMemorySamples(format!(
                    "sample {i} has a non-finite timestamp"
                )));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(MetricsError::InvalidMemorySamples(format!(
                    "sample {i} does not advance in time"
                )));
            }
        }
        Ok(Self { samples })
    }

    /// Merges readings from several sources: sorts by time and keeps the
    /// largest reading where timestamps coincide.
    pub fn merged(mut samples: Vec<MemorySample>) -> Self {
        samples.retain(|s| s.t.is_finite());
        samples.sort_by(|a, b| a.t.total_cmp(&b.t));
        let mut out: Vec<MemorySample> = Vec::with_capacity(samples.len());
        for s in samples {
            match out.last_mut() {
                Some(last) if last.t == s.t => {
                    last.resident_bytes = last.resident_bytes.max(s.resident_bytes)
                }
                _ => out.push(s),
            }
        }
        Self { samples: out }
    }

    pub fn samples(&self) -> &[MemorySample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub f1_percent: Option<f64>,
    pub inference_time_s: f64,
    /// Sum of baseline-subtracted samples over the inference window.
    pub summed_power_w: f64,
    pub mean_power_w: f64,
    pub energy_j: f64,
    pub peak_memory_mb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetric {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub std_dev: f64,
}

impl AggregateMetric {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn overlaps(&self, other: &AggregateMetric) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// F1 of one class as the exact fraction 2TP / (2TP + FP + FN), which equals
/// 2PR / (P + R) and is 0 when P + R = 0.
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> BigRational {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(2 * tp), BigInt::from(den))
    }
}

/// F1 score as a percentage, correctly rounded from the exact rational value.
///
/// Classes are the union of true and predicted labels. Macro averaging takes
/// the unweighted mean of per-class F1 (0 for classes with P + R = 0); micro
/// averaging pools the counts over all classes.
pub fn f1_score(preds: &PredictionSet, averaging: Averaging) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyPredictions);
    }
    // label -> (tp, fp, fn)
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for p in preds.pairs() {
        if p.predicted == p.truth {
            counts.entry(&p.truth).or_default().0 += 1;
        } else {
            counts.entry(&p.predicted).or_default().1 += 1;
            counts.entry(&p.truth).or_default().2 += 1;
        }
    }
    let score = match averaging {
        Averaging::Macro => {
            let total = counts
                .values()
                .fold(BigRational::zero(), |acc, &(tp, fp, fn_)| acc + f1_from_counts(tp, fp, fn_));
            total / BigInt::from(counts.len())
        }
        Averaging::Micro => {
            let (tp, fp, fn_) = counts
                .values()
                .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
            f1_from_counts(tp, fp, fn_)
        }
    };
    Ok((score * BigInt::from(100)).to_f64().unwrap_or(f64::NAN))
}

pub fn phase_duration(phases: &PhaseLog, phase: Phase) -> Result<f64, MetricsError> {
    phases
        .get(phase)
        .map(|s| s.duration())
        .ok_or(MetricsError::PhaseAbsent(phase))
}

/// Peak resident memory inside a phase, in MiB (labelled "MB" in reports).
pub fn peak_memory(
    samples: &MemorySamples,
    phases: &PhaseLog,
    phase: Phase,
) -> Result<f64, MetricsError> {
    let span = phases.get(phase).ok_or(MetricsError::PhaseAbsent(phase))?;
    samples
        .samples()
        .iter()
        .filter(|s| span.contains(s.t))
        .map(|s| s.resident_bytes)
        .max()
        .map(|b| b as f64 / BYTES_PER_MB)
        .ok_or(MetricsError::NoSamplesInPhase(phase))
}

/// Quantile of Student's t distribution with `df` degrees of freedom.
pub fn t_quantile(df: u64, p: f64) -> Result<f64, MetricsError> {
    if df == 0 {
        return Err(MetricsError::InvalidDf(df));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricsError::InvalidP(p));
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|_| MetricsError::InvalidDf(df))?;
    Ok(dist.inverse_cdf(p))
}

/// Mean and two-sided Student-t confidence interval of repeated measurements.
pub fn aggregate(values: &[f64], confidence: f64) -> Result<AggregateMetric, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(MetricsError::InvalidP(confidence));
    }
    let n = values.len();
    let pivot = values[0];
    let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(AggregateMetric {
            mean,
            ci_low: mean,
            ci_high: mean,
            n,
            std_dev: 0.0,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    let t = t_quantile(n as u64 - 1, 0.5 * (1.0 + confidence))?;
    let half = t * std_dev / (n as f64).sqrt();
    Ok(AggregateMetric {
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
        n,
        std_dev,
    })
}

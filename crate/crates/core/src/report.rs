//! Comparison and ranking tables over repeated runs.
//!
//! Cells are rendered as `MEAN [LO, HI]` with half-even decimal rounding.
//! Rankings name the best device per metric, or `~` when the best and the
//! runner-up have overlapping confidence intervals.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::metrics::{aggregate, AggregateMetric, MetricSet, MetricsError};
use crate::orchestrator::RunRecord;

pub const TIE_MARKER: &str = "~";
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("no records to report on")]
    EmptyRecords,
    #[error("unknown or unavailable metric `{0}`")]
    UnknownMetric(String),
    #[error("unknown grouping field `{0}`")]
    UnknownField(String),
    #[error("ranking needs at least two devices for {0}")]
    InsufficientDevices(String),
    #[error("ranking needs `device_id` among the grouping fields")]
    NoDeviceColumn,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Run-config field usable as a grouping key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    DeviceId,
    ModelId,
    FrameworkId,
    DatasetRef,
    InputSize,
    BatchSize,
    TokenWindow,
}

impl GroupField {
    pub const ALL: [GroupField; 7] = [
        GroupField::DeviceId,
        GroupField::ModelId,
        GroupField::FrameworkId,
        GroupField::DatasetRef,
        GroupField::InputSize,
        GroupField::BatchSize,
        GroupField::TokenWindow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupField::DeviceId => "device_id",
            GroupField::ModelId => "model_id",
            GroupField::FrameworkId => "framework_id",
            GroupField::DatasetRef => "dataset_ref",
            GroupField::InputSize => "input_size",
            GroupField::BatchSize => "batch_size",
            GroupField::TokenWindow => "token_window",
        }
    }

    fn value(self, record: &RunRecord) -> KeyValue {
        let c = &record.config;
        match self {
            GroupField::DeviceId => KeyValue::Text(c.device_id.clone()),
            GroupField::ModelId => KeyValue::Text(c.model_id.clone()),
            GroupField::FrameworkId => KeyValue::Text(c.framework_id.clone()),
            GroupField::DatasetRef => KeyValue::Text(c.dataset_ref.clone()),
            GroupField::InputSize => KeyValue::Int(c.input_size),
            GroupField::BatchSize => KeyValue::Int(c.batch_size),
            GroupField::TokenWindow => c.token_window.map_or(KeyValue::Missing, KeyValue::Int),
        }
    }
}

impl FromStr for GroupField {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupField::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| ReportError::UnknownField(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyValue {
    Missing,
    Int(u64),
    Text(String),
}

impl KeyValue {
    fn to_json(&self) -> Value {
        match self {
            KeyValue::Missing => Value::Null,
            KeyValue::Int(v) => json!(v),
            KeyValue::Text(s) => json!(s),
        }
    }
}

impl fmt::Display for KeyValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyValue::Missing => f.write_str("-"),
            KeyValue::Int(v) => write!(f, "{v}"),
            KeyValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    fn arrow(self) -> &'static str {
        match self {
            Direction::HigherBetter => "↑",
            Direction::LowerBetter => "↓",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1Percent,
    InferenceTimeS,
    SummedPowerW,
    MeanPowerW,
    EnergyJ,
    PeakMemoryMb,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::F1Percent,
        Metric::InferenceTimeS,
        Metric::SummedPowerW,
        Metric::MeanPowerW,
        Metric::EnergyJ,
        Metric::PeakMemoryMb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::F1Percent => "f1_percent",
            Metric::InferenceTimeS => "inference_time_s",
            Metric::SummedPowerW => "summed_power_w",
            Metric::MeanPowerW => "mean_power_w",
            Metric::EnergyJ => "energy_j",
            Metric::PeakMemoryMb => "peak_memory_mb",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::F1Percent => "F1 (%)",
            Metric::InferenceTimeS => "Inference Time (s)",
            Metric::SummedPowerW => "Inference Power (W)",
            Metric::MeanPowerW => "Mean Power (W)",
            Metric::EnergyJ => "Energy (J)",
            Metric::PeakMemoryMb => "Memory (MB)",
        }
    }

    pub fn default_decimals(self) -> usize {
        match self {
            Metric::PeakMemoryMb => 0,
            _ => 2,
        }
    }

    pub fn default_direction(self) -> Direction {
        match self {
            Metric::F1Percent => Direction::HigherBetter,
            _ => Direction::LowerBetter,
        }
    }

    pub fn extract(self, m: &MetricSet) -> Option<f64> {
        match self {
            Metric::F1Percent => m.f1_percent,
            Metric::InferenceTimeS => Some(m.inference_time_s),
            Metric::SummedPowerW => Some(m.summed_power_w),
            Metric::MeanPowerW => Some(m.mean_power_w),
            Metric::EnergyJ => Some(m.energy_j),
            Metric::PeakMemoryMb => Some(m.peak_memory_mb),
        }
    }
}

impl FromStr for Metric {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let alias = match s {
            "f1" => Some(Metric::F1Percent),
            "inference_time" | "time" => Some(Metric::InferenceTimeS),
            "summed_power" | "power" => Some(Metric::SummedPowerW),
            "mean_power" => Some(Metric::MeanPowerW),
            "energy" => Some(Metric::EnergyJ),
            "memory" | "peak_memory" => Some(Metric::PeakMemoryMb),
            _ => None,
        };
        alias
            .or_else(|| Metric::ALL.into_iter().find(|m| m.name() == s))
            .ok_or_else(|| ReportError::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub key: Vec<KeyValue>,
    pub cells: Vec<AggregateMetric>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub group_by: Vec<GroupField>,
    pub metrics: Vec<Metric>,
    pub rows: Vec<ComparisonRow>,
}

/// Groups records by `group_by` and aggregates each metric per group.
/// Rows are ordered by key.
pub fn build_comparison(
    records: &[RunRecord],
    group_by: &[GroupField],
    metrics: &[Metric],
    confidence: f64,
) -> Result<ComparisonTable, ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyRecords);
    }
    let mut groups: BTreeMap<Vec<KeyValue>, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = group_by.iter().map(|f| f.value(r)).collect();
        groups.entry(key).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let mut cells = Vec::with_capacity(metrics.len());
        for &metric in metrics {
            let values: Vec<f64> = members
                .iter()
                .filter_map(|r| metric.extract(&r.metrics))
                .collect();
            if values.is_empty() {
                return Err(ReportError::UnknownMetric(metric.name().to_string()));
            }
            cells.push(aggregate(&values, confidence)?);
        }
        rows.push(ComparisonRow { key, cells });
    }
    Ok(ComparisonTable {
        group_by: group_by.to_vec(),
        metrics: metrics.to_vec(),
        rows,
    })
}

/// Metrics every record can supply, in canonical order.
pub fn available_metrics(records: &[RunRecord]) -> Vec<Metric> {
    Metric::ALL
        .into_iter()
        .filter(|m| records.iter().all(|r| m.extract(&r.metrics).is_some()))
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Rounding {
    HalfEven,
    Floor,
    Ceil,
}

/// Fixed-point decimal rendering with half-even rounding of the shortest
/// round-trip decimal form of `x`.
pub fn format_fixed(x: f64, decimals: usize) -> String {
    round_decimal(x, decimals, Rounding::HalfEven)
}

fn round_decimal(x: f64, decimals: usize, mode: Rounding) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let negative = x.is_sign_negative() && x != 0.0;
    let repr = format!("{}", x.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(decimals))
        .map(|b| b - b'0')
        .collect();
    let rest: Vec<u8> = frac_part.bytes().skip(decimals).map(|b| b - b'0').collect();
    let rest_nonzero = rest.iter().any(|&d| d != 0);
    // direction is applied to the magnitude, so floor/ceil swap for negatives
    let away_from_zero = match (mode, negative) {
        (Rounding::HalfEven, _) => match rest.first() {
            Some(&d) if d > 5 => true,
            Some(&5) => rest[1..].iter().any(|&d| d != 0) || digits.last().is_some_and(|d| d % 2 == 1),
            _ => false,
        },
        (Rounding::Floor, false) | (Rounding::Ceil, true) => false,
        (Rounding::Floor, true) | (Rounding::Ceil, false) => rest_nonzero,
    };
    if away_from_zero {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let int_len = digits.len() - decimals;
    let mut out = String::with_capacity(digits.len() + 2);
    if negative && digits.iter().any(|&d| d != 0) {
        out.push('-');
    }
    out.extend(digits[..int_len].iter().map(|&d| char::from(b'0' + d)));
    if decimals > 0 {
        out.push('.');
        out.extend(digits[int_len..].iter().map(|&d| char::from(b'0' + d)));
    }
    out
}

fn parse_rendered(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

/// Renders `MEAN [LO, HI]`. If rounding would put an endpoint on the wrong
/// side of the mean, that endpoint is rounded outward instead.
pub fn format_interval(agg: &AggregateMetric, decimals: usize) -> String {
    let mean = format_fixed(agg.mean, decimals);
    let m = parse_rendered(&mean);
    let mut lo = format_fixed(agg.ci_low, decimals);
    if parse_rendered(&lo) > m {
        lo = round_decimal(agg.ci_low, decimals, Rounding::Floor);
        if parse_rendered(&lo) > m {
            lo = mean.clone();
        }
    }
    let mut hi = format_fixed(agg.ci_high, decimals);
    if parse_rendered(&hi) < m {
        hi = round_decimal(agg.ci_high, decimals, Rounding::Ceil);
        if parse_rendered(&hi) < m {
            hi = mean.clone();
        }
    }
    format!("{mean} [{lo}, {hi}]")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankCell {
    Winner(String),
    Tie,
}

impl fmt::Display for RankCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankCell::Winner(d) => f.write_str(d),
            RankCell::Tie => f.write_str(TIE_MARKER),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankColumn {
    pub metric: Metric,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub key: Vec<KeyValue>,
    pub cells: Vec<RankCell>,
}

/// Winner device per model row and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    /// Grouping fields other than the device.
    pub row_fields: Vec<GroupField>,
    pub columns: Vec<RankColumn>,
    pub rows: Vec<RankRow>,
}

/// Ranks devices on one metric. See [`rank_table`].
pub fn rank_devices(
    table: &ComparisonTable,
    metric: Metric,
    direction: Direction,
) -> Result<RankTable, ReportError> {
    rank_table(table, &[RankColumn { metric, direction }])
}

/// For every row of `table` with the device field removed, picks the best
/// device by mean in each column's direction. The cell is a tie when the
/// best device's interval intersects the runner-up's.
pub fn rank_table(table: &ComparisonTable, columns: &[RankColumn]) -> Result<RankTable, ReportError> {
    let device_pos = table
        .group_by
        .iter()
        .position(|&f| f == GroupField::DeviceId)
        .ok_or(ReportError::NoDeviceColumn)?;
    let metric_pos: Vec<usize> = columns
        .iter()
        .map(|c| {
            table
                .metrics
                .iter()
                .position(|&m| m == c.metric)
                .ok_or_else(|| ReportError::UnknownMetric(c.metric.name().to_string()))
        })
        .collect::<Result<_, _>>()?;

    let mut groups: BTreeMap<Vec<KeyValue>, Vec<(String, &ComparisonRow)>> = BTreeMap::new();
    for row in &table.rows {
        let mut key = row.key.clone();
        let device = key.remove(device_pos).to_string();
        groups.entry(key).or_default().push((device, row));
    }

    let mut row_fields = table.group_by.clone();
    row_fields.remove(device_pos);
    let mut rows = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        if members.len() < 2 {
            let label = key.iter().map(ToString::to_string).collect::<Vec<_>>().join("/");
            return Err(ReportError::InsufficientDevices(if label.is_empty() {
                "the table".into()
            } else {
                label
            }));
        }
        let cells = columns
            .iter()
            .zip(&metric_pos)
            .map(|(col, &pos)| {
                let mut ranked: Vec<(&str, &AggregateMetric)> = members
                    .iter()
                    .map(|(d, row)| (d.as_str(), &row.cells[pos]))
                    .collect();
                ranked.sort_by(|a, b| {
                    let order = a.1.mean.total_cmp(&b.1.mean);
                    let order = match col.direction {
                        Direction::HigherBetter => order.reverse(),
                        Direction::LowerBetter => order,
                    };
                    order.then_with(|| a.0.cmp(b.0))
                });
                let (best, runner_up) = (ranked[0], ranked[1]);
                if best.1.overlaps(runner_up.1) {
                    RankCell::Tie
                } else {
                    RankCell::Winner(best.0.to_string())
                }
            })
            .collect();
        rows.push(RankRow { key, cells });
    }
    Ok(RankTable {
        row_fields,
        columns: columns.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Markdown,
}

impl OutputFormat {
    pub const ALL: [OutputFormat; 3] = [OutputFormat::Csv, OutputFormat::Json, OutputFormat::Markdown];

    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
            OutputFormat::Markdown => "md",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "markdown" | "md" => Ok(OutputFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Tables that can be serialized by [`emit`].
pub trait Emit {
    fn headers(&self, format: OutputFormat) -> Vec<String>;
    fn text_rows(&self) -> Vec<Vec<String>>;
    fn to_json(&self) -> Value;
}

pub fn emit<T: Emit + ?Sized>(table: &T, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(table.headers(format)).expect("in-memory write");
            for row in table.text_rows() {
                w.write_record(row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
        }
        OutputFormat::Markdown => {
            let esc = |s: &str| s.replace('|', "\\|");
            let headers = table.headers(format);
            let mut out = format!(
                "| {} |\n|{}|\n",
                headers.iter().map(|h| esc(h)).collect::<Vec<_>>().join(" | "),
                headers.iter().map(|_| "---").collect::<Vec<_>>().join("|")
            );
            for row in table.text_rows() {
                out.push_str(&format!(
                    "| {} |\n",
                    row.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | ")
                ));
            }
            out
        }
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(&table.to_json()).expect("json value");
            s.push('\n');
            s
        }
    }
}

fn key_json(fields: &[GroupField], key: &[KeyValue]) -> Value {
    Value::Object(
        fields
            .iter()
            .zip(key)
            .map(|(f, v)| (f.name().to_string(), v.to_json()))
            .collect::<Map<_, _>>(),
    )
}

impl Emit for ComparisonTable {
    fn headers(&self, format: OutputFormat) -> Vec<String> {
        self.group_by
            .iter()
            .map(|f| f.name().to_string())
            .chain(self.metrics.iter().map(|m| match format {
                OutputFormat::Markdown => m.label().to_string(),
                _ => m.name().to_string(),
            }))
            .collect()
    }

    fn text_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|row| {
                row.key
                    .iter()
                    .map(ToString::to_string)
                    .chain(
                        self.metrics
                            .iter()
                            .zip(&row.cells)
                            .map(|(m, agg)| format_interval(agg, m.default_decimals())),
                    )
                    .collect()
            })
            .collect()
    }

    fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let cells: Map<String, Value> = self
                    .metrics
                    .iter()
                    .zip(&row.cells)
                    .map(|(m, agg)| {
                        (
                            m.name().to_string(),
                            json!({
                                "mean": agg.mean,
                                "ci_low": agg.ci_low,
                                "ci_high": agg.ci_high,
                                "n": agg.n,
                                "std_dev": agg.std_dev,
                                "formatted": format_interval(agg, m.default_decimals()),
                            }),
                        )
                    })
                    .collect();
                json!({ "key": key_json(&self.group_by, &row.key), "cells": cells })
            })
            .collect();
        json!({
            "group_by": self.group_by.iter().map(|f| f.name()).collect::<Vec<_>>(),
            "metrics": self.metrics.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "rows": rows,
        })
    }
}

impl Emit for RankTable {
    fn headers(&self, format: OutputFormat) -> Vec<String> {
        self.row_fields
            .iter()
            .map(|f| f.name().to_string())
            .chain(self.columns.iter().map(|c| match format {
                OutputFormat::Markdown => format!("{} {}", c.metric.label(), c.direction.arrow()),
                _ => c.metric.name().to_string(),
            }))
            .collect()
    }

    fn text_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|row| {
                row.key
                    .iter()
                    .map(ToString::to_string)
                    .chain(row.cells.iter().map(ToString::to_string))
                    .collect()
            })
            .collect()
    }

    fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let cells: Map<String, Value> = self
                    .columns
                    .iter()
                    .zip(&row.cells)
                    .map(|(c, cell)| {
                        let v = match cell {
                            RankCell::Winner(d) => json!({"winner": d, "tie": false, "display": d}),
                            RankCell::Tie => json!({"winner": null, "tie": true, "display": TIE_MARKER}),
                        };
                        (c.metric.name().to_string(), v)
                    })
                    .collect();
                json!({ "key": key_json(&self.row_fields, &row.key), "cells": cells })
            })
            .collect();
        json!({
            "row_fields": self.row_fields.iter().map(|f| f.name()).collect::<Vec<_>>(),
            "columns": self.columns.iter().map(|c| json!({
                "metric": c.metric.name(),
                "direction": c.direction,
            })).collect::<Vec<_>>(),
            "rows": rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agg(mean: f64, lo: f64, hi: f64) -> AggregateMetric {
        AggregateMetric {
            mean,
            ci_low: lo,
            ci_high: hi,
            n: 5,
            std_dev: 1.0,
        }
    }

    fn two_device_table(a: AggregateMetric, b: AggregateMetric) -> ComparisonTable {
        ComparisonTable {
            group_by: vec![GroupField::DeviceId, GroupField::ModelId],
            metrics: vec![Metric::F1Percent],
            rows: vec![
                ComparisonRow {
                    key: vec![KeyValue::Text("jetson".into()), KeyValue::Text("resnet".into())],
                    cells: vec![a],
                },
                ComparisonRow {
                    key: vec![KeyValue::Text("rpi".into()), KeyValue::Text("resnet".into())],
                    cells: vec![b],
                },
            ],
        }
    }

    #[test]
    fn interval_cells_match_table_rendering() {
        assert_eq!(
            format_interval(&agg(85.50, 84.12, 86.88), 2),
            "85.50 [84.12, 86.88]"
        );
        assert_eq!(format_interval(&agg(9.86, 9.35, 10.37), 2), "9.86 [9.35, 10.37]");
        let one = AggregateMetric { mean: 5.0, ci_low: 5.0, ci_high: 5.0, n: 1, std_dev: 0.0 };
        assert_eq!(format_interval(&one, 2), "5.00 [5.00, 5.00]");
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(format_fixed(84.125, 2), "84.12");
        assert_eq!(format_fixed(84.135, 2), "84.14");
        assert_eq!(format_fixed(0.5, 0), "0");
        assert_eq!(format_fixed(1.5, 0), "2");
        assert_eq!(format_fixed(2.5, 0), "2");
        assert_eq!(format_fixed(2.5000001, 0), "3");
        assert_eq!(format_fixed(9.995, 2), "10.00");
        assert_eq!(format_fixed(-1.005, 2), "-1.00");
        assert_eq!(format_fixed(-0.001, 2), "0.00");
        assert_eq!(format_fixed(332.24, 0), "332");
        assert_eq!(format_fixed(1e-7, 3), "0.000");
        assert_eq!(format_fixed(123.0, 2), "123.00");
    }

    #[test]
    fn endpoints_widen_instead_of_crossing() {
        // a slightly inconsistent aggregate: low end above the mean
        let weird = agg(1.004, 1.006, 1.01);
        assert_eq!(format_interval(&weird, 2), "1.00 [1.00, 1.01]");
        assert_eq!(round_decimal(1.006, 2, Rounding::Floor), "1.00");
        assert_eq!(round_decimal(1.001, 2, Rounding::Ceil), "1.01");
        assert_eq!(round_decimal(-1.001, 2, Rounding::Floor), "-1.01");
    }

    #[test]
    fn disjoint_intervals_pick_winner() {
        let t = two_device_table(agg(97.4, 97.1, 97.7), agg(96.8, 96.5, 97.0));
        let r = rank_devices(&t, Metric::F1Percent, Direction::HigherBetter).unwrap();
        assert_eq!(r.rows[0].cells[0], RankCell::Winner("jetson".into()));
        let r = rank_devices(&t, Metric::F1Percent, Direction::LowerBetter).unwrap();
        assert_eq!(r.rows[0].cells[0], RankCell::Winner("rpi".into()));
    }

    #[test]
    fn identical_or_overlapping_is_tie() {
        let t = two_device_table(agg(10.0, 9.0, 11.0), agg(10.0, 9.0, 11.0));
        let r = rank_devices(&t, Metric::F1Percent, Direction::HigherBetter).unwrap();
        assert_eq!(r.rows[0].cells[0], RankCell::Tie);
        let t = two_device_table(agg(10.0, 9.5, 10.5), agg(9.8, 9.3, 10.3));
        let r = rank_devices(&t, Metric::F1Percent, Direction::HigherBetter).unwrap();
        assert_eq!(r.rows[0].cells[0], RankCell::Tie);
    }

    #[test]
    fn single_device_cannot_rank() {
        let mut t = two_device_table(agg(1.0, 1.0, 1.0), agg(1.0, 1.0, 1.0));
        t.rows.pop();
        assert!(matches!(
            rank_devices(&t, Metric::F1Percent, Direction::HigherBetter),
            Err(ReportError::InsufficientDevices(_))
        ));
    }

    #[test]
    fn tie_renders_as_tilde() {
        let t = two_device_table(agg(10.0, 9.0, 11.0), agg(10.0, 9.0, 11.0));
        let r = rank_devices(&t, Metric::F1Percent, Direction::HigherBetter).unwrap();
        let md = emit(&r, OutputFormat::Markdown);
        assert!(md.contains("| resnet | ~ |"), "{md}");
        let json: Value = serde_json::from_str(&emit(&r, OutputFormat::Json)).unwrap();
        assert_eq!(json["rows"][0]["cells"]["f1_percent"]["tie"], true);
    }

    #[test]
    fn csv_layout_and_determinism() {
        let t = ComparisonTable {
            group_by: vec![GroupField::DeviceId],
            metrics: vec![Metric::InferenceTimeS],
            rows: vec![ComparisonRow {
                key: vec![KeyValue::Text("rpi".into())],
                cells: vec![agg(9.86, 9.35, 10.37)],
            }],
        };
        let csv = emit(&t, OutputFormat::Csv);
        assert_eq!(csv, "device_id,inference_time_s\nrpi,\"9.86 [9.35, 10.37]\"\n");
        for f in OutputFormat::ALL {
            assert_eq!(emit(&t, f), emit(&t, f));
        }
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("f1".parse::<Metric>().unwrap(), Metric::F1Percent);
        assert_eq!("energy_j".parse::<Metric>().unwrap(), Metric::EnergyJ);
        assert!(matches!("bogus".parse::<Metric>(), Err(ReportError::UnknownMetric(_))));
        assert_eq!("input_size".parse::<GroupField>().unwrap(), GroupField::InputSize);
    }

    proptest! {
        #[test]
        fn rendered_interval_is_ordered(
            mean in -1e4f64..1e4,
            lo_gap in 0.0f64..100.0,
            hi_gap in 0.0f64..100.0,
            decimals in 0usize..4,
        ) {
            let s = format_interval(&agg(mean, mean - lo_gap, mean + hi_gap), decimals);
            let nums: Vec<f64> = s
                .replace(['[', ']', ','], " ")
                .split_whitespace()
                .map(|x| x.parse().unwrap())
                .collect();
            prop_assert!(nums[1] <= nums[0] && nums[0] <= nums[2], "{}", s);
        }

        #[test]
        fn ranking_invariant_under_positive_affine_maps(
            // dyadic values keep the affine images exact
            means in prop::collection::vec(-64i32..64, 2..5),
            halves in prop::collection::vec(0i32..16, 5),
            scale_exp in -3i32..4,
            shift in -32i32..32,
        ) {
            let scale = 2f64.powi(scale_exp);
            let build = |f: &dyn Fn(f64) -> f64| ComparisonTable {
                group_by: vec![GroupField::DeviceId],
                metrics: vec![Metric::EnergyJ],
                rows: means
                    .iter()
                    .zip(&halves)
                    .enumerate()
                    .map(|(i, (&m, &h))| {
                        let (m, h) = (m as f64 / 4.0, h as f64 / 8.0);
                        ComparisonRow {
                            key: vec![KeyValue::Text(format!("dev{i}"))],
                            cells: vec![agg(f(m), f(m - h), f(m + h))],
                        }
                    })
                    .collect(),
            };
            let plain = build(&|x| x);
            let mapped = build(&|x| scale * x + shift as f64);
            for dir in [Direction::HigherBetter, Direction::LowerBetter] {
                prop_assert_eq!(
                    rank_devices(&plain, Metric::EnergyJ, dir).unwrap(),
                    rank_devices(&mapped, Metric::EnergyJ, dir).unwrap()
                );
            }
        }

        #[test]
        fn csv_cells_round_trip(
            names in prop::collection::vec("[a-z ,\"|]{1,8}", 1..5),
            means in prop::collection::vec(0.0f64..1000.0, 5),
        ) {
            let t = ComparisonTable {
                group_by: vec![GroupField::ModelId],
                metrics: vec![Metric::EnergyJ],
                rows: names.iter().zip(&means).map(|(n, &m)| ComparisonRow {
                    key: vec![KeyValue::Text(n.clone())],
                    cells: vec![agg(m, m - 1.0, m + 1.0)],
                }).collect(),
            };
            let text = emit(&t, OutputFormat::Csv);
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let parsed: Vec<Vec<String>> = reader
                .records()
                .map(|r| r.unwrap().iter().map(str::to_string).collect())
                .collect();
            prop_assert_eq!(parsed, t.text_rows());
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use edgebench::metrics::MetricSet;
use edgebench::orchestrator::{
    execute_sweep_with, verify_record, RunError, RunRecord, SweepOptions,
};
use edgebench::protocol::RunConfig;
use edgebench::report::{
    available_metrics, build_comparison, emit, format_fixed, rank_table, Emit, GroupField, Metric,
    OutputFormat, RankColumn, ReportError, DEFAULT_CONFIDENCE,
};
use edgebench::trace::{parse_trace, serialize_trace, TraceFormat};

use crate::manifest::CampaignManifest;
use crate::Failure;

const RECORDS_DIR: &str = "records";
const CAMPAIGN_FILE: &str = "campaign.json";
const FAILURES_FILE: &str = "failures.json";

/// Report settings persisted next to the records so `analyze` regenerates
/// the same files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignInfo {
    pub campaign: String,
    pub meter: String,
    pub run_count: usize,
    pub report_formats: Vec<OutputFormat>,
    pub group_by: Vec<GroupField>,
}

#[derive(Debug, Default)]
pub struct RunOverrides {
    pub keep_going: bool,
    pub repeats: Option<u32>,
    pub cooling: Option<f64>,
    pub formats: Vec<OutputFormat>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

pub fn record_file_name(index: usize) -> String {
    format!("run-{index:04}.json")
}

pub fn trace_file_name(index: usize) -> String {
    format!("run-{index:04}.trace.csv")
}

fn describe(config: &RunConfig) -> String {
    let mut s = format!(
        "{} on {} ({}) input_size={} batch_size={}",
        config.model_id, config.device_id, config.framework_id, config.input_size, config.batch_size
    );
    if let Some(w) = config.token_window {
        s.push_str(&format!(" token_window={w}"));
    }
    s.push_str(&format!(" repeat={}", config.repeat_index));
    s
}

fn metric_summary(m: &MetricSet) -> String {
    Metric::ALL
        .into_iter()
        .filter(|&metric| metric != Metric::SummedPowerW)
        .filter_map(|metric| {
            metric
                .extract(m)
                .map(|v| format!("{}={}", metric.name(), format_fixed(v, metric.default_decimals())))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn clear_stale_records(dir: &Path) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("run-") && (name.ends_with(".json") || name.ends_with(".trace.csv")) {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

pub fn cmd_run(manifest_path: &Path, overrides: RunOverrides) -> Result<(), Failure> {
    let mut manifest = CampaignManifest::load(manifest_path).map_err(Failure::usage)?;
    if let Some(r) = overrides.repeats {
        manifest.sweep.repeats = r;
    }
    if let Some(c) = overrides.cooling {
        manifest.sweep.cooling_seconds = c;
    }
    if let Some(s) = overrides.seed {
        manifest.sweep.base_config.seed = s;
    }
    if !overrides.formats.is_empty() {
        manifest.report_formats = overrides.formats.clone();
    }
    if let Some(dir) = overrides.output_dir {
        manifest.output_dir = dir;
    }
    manifest.validate().map_err(Failure::usage)?;

    let campaign_dir = manifest.output_dir.join(&manifest.campaign);
    let records_dir = campaign_dir.join(RECORDS_DIR);
    fs::create_dir_all(&records_dir)
        .and_then(|_| clear_stale_records(&records_dir))
        .with_context(|| format!("output directory {} is not writable", records_dir.display()))
        .map_err(Failure::usage)?;
    let info = CampaignInfo {
        campaign: manifest.campaign.clone(),
        meter: manifest.meter.to_string(),
        run_count: manifest.sweep.run_count(),
        report_formats: manifest.report_formats.clone(),
        group_by: manifest.group_by.clone(),
    };
    write_json(&campaign_dir.join(CAMPAIGN_FILE), &info).map_err(Failure::usage)?;

    let options = SweepOptions {
        abort_on_error: manifest.abort_on_error,
        timeout: manifest.timeout_seconds.map(Duration::from_secs_f64),
        averaging: manifest.f1_averaging,
    };
    let mut write_error: Option<anyhow::Error> = None;
    let on_run = |index: usize, total: usize, result: &Result<RunRecord, RunError>| {
        let width = total.to_string().len();
        match result {
            Ok(record) => {
                say!(
                    "[{:>width$}/{total}] {}: ok {}",
                    index + 1,
                    describe(&record.config),
                    metric_summary(&record.metrics)
                );
                for w in &record.warnings {
                    say!("    warning: {w}");
                }
                let saved = write_json(&records_dir.join(record_file_name(index)), record).and_then(|_| {
                    let path = records_dir.join(trace_file_name(index));
                    fs::write(&path, serialize_trace(&record.raw_trace, TraceFormat::Watts))
                        .with_context(|| format!("cannot write {}", path.display()))
                });
                if let Err(e) = saved {
                    write_error.get_or_insert(e);
                }
            }
            Err(e) => say!("[{:>width$}/{total}] run failed: {e}", index + 1),
        }
    };
    let outcome = execute_sweep_with(&manifest.sweep, &manifest.meter, &manifest.runner, &options, on_run)
        .map_err(|e| Failure::usage(anyhow!(e)))?;
    if let Some(e) = write_error {
        return Err(Failure::failed(e));
    }

    let failures: Vec<_> = outcome
        .failures
        .iter()
        .map(|f| {
            json!({
                "index": f.index,
                "config": f.config,
                "error": f.error.to_string(),
            })
        })
        .collect();
    write_json(&campaign_dir.join(FAILURES_FILE), &failures).map_err(Failure::failed)?;

    say!(
        "{}: {} of {} runs succeeded{}",
        manifest.campaign,
        outcome.records.len(),
        manifest.sweep.run_count(),
        if outcome.aborted { " (aborted after first failure)" } else { "" }
    );
    for f in &outcome.failures {
        say!("  failed run {}: {}: {}", f.index, describe(&f.config), f.error);
    }

    if !outcome.records.is_empty() {
        for note in write_reports(&campaign_dir, &outcome.records, &info).map_err(Failure::failed)? {
            say!("{note}");
        }
    }
    say!("results in {}", campaign_dir.display());

    if !outcome.failures.is_empty() && !overrides.keep_going {
        return Err(Failure::failed(anyhow!(
            "{} run(s) failed; use --keep-going to accept partial campaigns",
            outcome.failures.len()
        )));
    }
    Ok(())
}

/// Writes comparison and ranking reports. Returns notes for the console.
pub fn write_reports(dir: &Path, records: &[RunRecord], info: &CampaignInfo) -> Result<Vec<String>> {
    let metrics = available_metrics(records);
    let comparison = build_comparison(records, &info.group_by, &metrics, DEFAULT_CONFIDENCE)?;
    let columns: Vec<RankColumn> = metrics
        .iter()
        .map(|&metric| RankColumn {
            metric,
            direction: metric.default_direction(),
        })
        .collect();
    let ranking = match rank_table(&comparison, &columns) {
        Ok(r) => Some(r),
        Err(ReportError::InsufficientDevices(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let mut notes = Vec::new();
    for &format in &info.report_formats {
        let write = |name: &str, table: &dyn Emit| -> Result<PathBuf> {
            let path = dir.join(format!("{name}.{}", format.extension()));
            fs::write(&path, emit(table, format))
                .with_context(|| format!("cannot write {}", path.display()))?;
            Ok(path)
        };
        notes.push(format!("wrote {}", write("comparison", &comparison)?.display()));
        if let Some(r) = &ranking {
            notes.push(format!("wrote {}", write("ranking", r)?.display()));
        }
    }
    if ranking.is_none() {
        notes.push("ranking skipped: every row needs at least two devices".into());
    }
    Ok(notes)
}

fn load_campaign_info(campaign_dir: &Path, records: &[RunRecord]) -> Result<CampaignInfo> {
    let path = campaign_dir.join(CAMPAIGN_FILE);
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        return serde_json::from_str(&text).with_context(|| format!("invalid {}", path.display()));
    }
    Ok(CampaignInfo {
        campaign: campaign_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        meter: records.first().map(|r| r.meter.clone()).unwrap_or_default(),
        run_count: records.len(),
        report_formats: OutputFormat::ALL.to_vec(),
        group_by: GroupField::ALL.to_vec(),
    })
}

pub fn cmd_analyze(dir: &Path) -> Result<(), Failure> {
    let (campaign_dir, records_dir) = if dir.join(RECORDS_DIR).is_dir() {
        (dir.to_path_buf(), dir.join(RECORDS_DIR))
    } else {
        (dir.parent().unwrap_or(dir).to_path_buf(), dir.to_path_buf())
    };
    let entries = fs::read_dir(&records_dir)
        .with_context(|| format!("cannot read directory {}", records_dir.display()))
        .map_err(Failure::usage)?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::usage(anyhow!(
            "no run records found in {}",
            records_dir.display()
        )));
    }

    let mut records = Vec::with_capacity(files.len());
    let mut corrupt = Vec::new();
    for path in &files {
        match check_record(path) {
            Ok(record) => records.push(record),
            Err(e) => corrupt.push(format!("{}: {e}", path.display())),
        }
    }
    if !corrupt.is_empty() {
        for c in &corrupt {
            eprintln!("corrupt record {c}");
        }
        return Err(Failure::failed(anyhow!(
            "{} record(s) fail verification; reports not regenerated",
            corrupt.len()
        )));
    }
    say!("verified {} record(s)", records.len());

    let info = load_campaign_info(&campaign_dir, &records).map_err(Failure::usage)?;
    let notes = write_reports(&campaign_dir, &records, &info).map_err(Failure::failed)?;
    let metrics = available_metrics(&records);
    let comparison = build_comparison(&records, &info.group_by, &metrics, DEFAULT_CONFIDENCE)
        .map_err(|e| Failure::failed(e.into()))?;
    say_raw!("{}", emit(&comparison, OutputFormat::Markdown));
    for note in notes {
        say!("{note}");
    }
    Ok(())
}

fn check_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path)?;
    let record: RunRecord = serde_json::from_str(&text).map_err(|e| anyhow!("unreadable: {e}"))?;
    verify_record(&record).map_err(|e| anyhow!(e))?;
    let sidecar = path.with_extension("trace.csv");
    if sidecar.exists() {
        let trace = parse_trace(&fs::read_to_string(&sidecar)?, TraceFormat::Watts)
            .map_err(|e| anyhow!("trace sidecar unreadable: {e}"))?;
        if trace.samples() != record.raw_trace.samples() {
            return Err(anyhow!("trace sidecar differs from the recorded trace"));
        }
    }
    Ok(record)
}

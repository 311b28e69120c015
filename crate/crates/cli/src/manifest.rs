use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use serde_json::Value;

use edgebench::metrics::Averaging;
use edgebench::orchestrator::{
    MeterSpec, ProcessSpec, RunnerSpec, SweepParam, SweepSpec, SyntheticRunner,
    DEFAULT_COOLING_SECONDS, DEFAULT_REPEATS,
};
use edgebench::protocol::RunConfig;
use edgebench::report::{GroupField, OutputFormat};

fn default_repeats() -> u32 {
    DEFAULT_REPEATS
}
fn default_cooling() -> f64 {
    DEFAULT_COOLING_SECONDS
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_formats() -> Vec<OutputFormat> {
    OutputFormat::ALL.to_vec()
}
fn default_group_by() -> Vec<GroupField> {
    GroupField::ALL.to_vec()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    campaign: String,
    runner: Value,
    meter: String,
    base_config: RunConfig,
    #[serde(default)]
    grid: BTreeMap<SweepParam, Vec<u64>>,
    #[serde(default = "default_repeats")]
    repeats: u32,
    #[serde(default = "default_cooling")]
    cooling_seconds: f64,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default = "default_formats")]
    report_formats: Vec<OutputFormat>,
    #[serde(default = "default_group_by")]
    group_by: Vec<GroupField>,
    #[serde(default)]
    timeout_seconds: Option<f64>,
    #[serde(default)]
    abort_on_error: bool,
    #[serde(default)]
    f1_averaging: Averaging,
}

/// A validated campaign description with paths resolved against the
/// manifest's directory.
#[derive(Debug, Clone)]
pub struct CampaignManifest {
    pub campaign: String,
    pub runner: RunnerSpec,
    pub meter: MeterSpec,
    pub sweep: SweepSpec,
    pub output_dir: PathBuf,
    pub report_formats: Vec<OutputFormat>,
    pub group_by: Vec<GroupField>,
    pub timeout_seconds: Option<f64>,
    pub abort_on_error: bool,
    pub f1_averaging: Averaging,
}

impl CampaignManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawManifest =
            serde_json::from_str(text).map_err(|e| anyhow!("invalid manifest: {e}"))?;
        if raw.campaign.is_empty()
            || raw.campaign.contains(['/', '\\'])
            || raw.campaign.starts_with('.')
        {
            bail!("manifest field `campaign` must be a plain, non-empty name");
        }
        let runner = parse_runner(raw.runner, base)?;
        let meter = match raw
            .meter
            .parse::<MeterSpec>()
            .map_err(|e| anyhow!("manifest field `meter`: {e}"))?
        {
            MeterSpec::Replay(p) => MeterSpec::Replay(resolve(base, p)),
            MeterSpec::Live(p) => MeterSpec::Live(resolve(base, p)),
            sim => sim,
        };
        if raw.report_formats.is_empty() {
            bail!("manifest field `report_formats` must list at least one format");
        }
        if !raw.group_by.contains(&GroupField::DeviceId) {
            bail!("manifest field `group_by` must include `device_id`");
        }
        if let Some(t) = raw.timeout_seconds {
            if !(t.is_finite() && t > 0.0) {
                bail!("manifest field `timeout_seconds` must be positive");
            }
        }
        let sweep = SweepSpec {
            base_config: raw.base_config,
            grid: raw.grid,
            repeats: raw.repeats,
            cooling_seconds: raw.cooling_seconds,
        };
        let manifest = Self {
            campaign: raw.campaign,
            runner,
            meter,
            sweep,
            output_dir: resolve(base, raw.output_dir),
            report_formats: raw.report_formats,
            group_by: raw.group_by,
            timeout_seconds: raw.timeout_seconds,
            abort_on_error: raw.abort_on_error,
            f1_averaging: raw.f1_averaging,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        self.sweep
            .validate()
            .map_err(|e| anyhow!("invalid sweep in manifest: {e}"))
    }
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn parse_runner(value: Value, base: &Path) -> Result<RunnerSpec> {
    let Value::Object(map) = value else {
        bail!("manifest field `runner` must be an object");
    };
    if let Some(stub) = map.get("synthetic") {
        if map.len() > 1 {
            bail!("manifest field `runner` mixes `synthetic` with a command");
        }
        let stub: SyntheticRunner = serde_json::from_value(stub.clone())
            .map_err(|e| anyhow!("manifest field `runner.synthetic`: {e}"))?;
        return Ok(RunnerSpec::Synthetic(stub));
    }
    match map.get("command") {
        Some(Value::String(c)) if !c.trim().is_empty() => {}
        Some(_) => bail!("manifest field `runner.command` must be a non-empty string"),
        None => bail!("manifest field `runner.command` is missing"),
    }
    let mut spec: ProcessSpec = serde_json::from_value(Value::Object(map))
        .map_err(|e| anyhow!("manifest field `runner`: {e}"))?;
    let command = Path::new(&spec.command);
    if command.components().count() > 1 && command.is_relative() {
        spec.command = base.join(command).to_string_lossy().into_owned();
    }
    Ok(RunnerSpec::Process(spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(runner: &str) -> String {
        format!(
            r#"{{
                "campaign": "demo",
                "runner": {runner},
                "meter": "sim:baseline=2.0,inference=3.0,noise=0,rate=16,seed=1",
                "base_config": {{
                    "model_id": "m", "device_id": "d", "framework_id": "f",
                    "input_size": 8, "batch_size": 1, "dataset_ref": "ds"
                }},
                "grid": {{"batch_size": [1, 2]}},
                "repeats": 2,
                "cooling_seconds": 0
            }}"#
        )
    }

    #[test]
    fn parses_synthetic_and_defaults() {
        let m = CampaignManifest::parse(&manifest(r#"{"synthetic": {}}"#), Path::new("/x")).unwrap();
        assert_eq!(m.sweep.run_count(), 4);
        assert_eq!(m.output_dir, PathBuf::from("/x/results"));
        assert_eq!(m.report_formats, OutputFormat::ALL.to_vec());
        assert!(matches!(m.runner, RunnerSpec::Synthetic(_)));
    }

    #[test]
    fn relative_commands_resolve_against_manifest() {
        let m = CampaignManifest::parse(
            &manifest(r#"{"command": "bin/runner.sh", "args": ["-q"]}"#),
            Path::new("/camp"),
        )
        .unwrap();
        let RunnerSpec::Process(p) = m.runner else { panic!() };
        assert_eq!(p.command, "/camp/bin/runner.sh");
        assert_eq!(p.args, vec!["-q"]);
        let m = CampaignManifest::parse(&manifest(r#"{"command": "python3"}"#), Path::new("/camp")).unwrap();
        let RunnerSpec::Process(p) = m.runner else { panic!() };
        assert_eq!(p.command, "python3");
    }

    #[test]
    fn missing_command_names_field() {
        let err = CampaignManifest::parse(&manifest(r#"{"args": ["x"]}"#), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("runner.command"), "{err}");
    }

    #[test]
    fn rejects_unknown_fields_and_bad_meters() {
        let text = manifest(r#"{"synthetic": {}}"#).replace("\"repeats\"", "\"repeat\"");
        assert!(CampaignManifest::parse(&text, Path::new(".")).is_err());
        let text = manifest(r#"{"synthetic": {}}"#).replace("sim:", "usb:");
        let err = CampaignManifest::parse(&text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("meter"), "{err}");
    }
}

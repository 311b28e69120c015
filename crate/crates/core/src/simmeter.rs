//! Simulated power meter and trace replay.
//!
//! The simulator renders a trace for a known phase log: every sample reads
//! `baseline_w + delta[phase]` plus optional seeded Gaussian noise. Replay
//! streams a recorded trace file, optionally in real time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{
    Phase, PhaseLog, PowerSample, PowerTrace, TraceError, TraceFormat, TraceReader,
    DEFAULT_RATE_HZ,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("simulator profile must start with `sim:`")]
    MissingPrefix,
    #[error("bad simulator profile entry `{0}`")]
    BadEntry(String),
    #[error("unknown simulator profile key `{0}`")]
    UnknownKey(String),
    #[error("invalid load profile: {0}")]
    Invalid(String),
}

/// Baseline draw plus per-phase extra load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub baseline_w: f64,
    #[serde(default)]
    pub phase_deltas: BTreeMap<Phase, f64>,
    #[serde(default)]
    pub noise_std_w: f64,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    /// Uniform sample-time jitter in seconds, below one sample period.
    #[serde(default)]
    pub jitter_s: f64,
}

fn default_rate() -> f64 {
    DEFAULT_RATE_HZ
}

impl LoadProfile {
    pub fn new(baseline_w: f64) -> Self {
        Self {
            baseline_w,
            phase_deltas: BTreeMap::new(),
            noise_std_w: 0.0,
            rate_hz: DEFAULT_RATE_HZ,
            jitter_s: 0.0,
        }
    }

    pub fn with_delta(mut self, phase: Phase, watts: f64) -> Self {
        self.phase_deltas.insert(phase, watts);
        self
    }

    pub fn with_noise(mut self, std_w: f64) -> Self {
        self.noise_std_w = std_w;
        self
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Invalid(m.into()));
        if !(self.baseline_w.is_finite() && self.baseline_w >= 0.0) {
            return bad("baseline_w must be non-negative");
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return bad("rate_hz must be positive");
        }
        if !(self.noise_std_w.is_finite() && self.noise_std_w >= 0.0) {
            return bad("noise_std_w must be non-negative");
        }
        if !(self.jitter_s >= 0.0 && self.jitter_s < 1.0 / self.rate_hz) {
            return bad("jitter_s must lie in [0, sample period)");
        }
        if self.phase_deltas.values().any(|d| !d.is_finite()) {
            return bad("phase deltas must be finite");
        }
        Ok(())
    }

    pub fn delta(&self, phase: Phase) -> f64 {
        self.phase_deltas.get(&phase).copied().unwrap_or(0.0)
    }
}

/// A load profile with its generator seed, as written in campaign configs:
/// `sim:baseline=2.0,inference=+3.0,noise=0.05,rate=16,seed=42`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub profile: LoadProfile,
    pub seed: u64,
}

impl FromStr for SimSpec {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.trim().strip_prefix("sim:").ok_or(ProfileError::MissingPrefix)?;
        let mut profile = LoadProfile::new(0.0);
        let mut seed = 0;
        for entry in body.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| ProfileError::BadEntry(entry.into()))?;
            let key = key.trim();
            let value = value.trim();
            let number = || -> Result<f64, ProfileError> {
                value
                    .trim_start_matches('+')
                    .parse()
                    .map_err(|_| ProfileError::BadEntry(entry.into()))
            };
            match key {
                "baseline" => profile.baseline_w = number()?,
                "noise" => profile.noise_std_w = number()?,
                "rate" => profile.rate_hz = number()?,
                "jitter" => profile.jitter_s = number()?,
                "seed" => {
                    seed = value
                        .parse()
                        .map_err(|_| ProfileError::BadEntry(entry.into()))?
                }
                "dataset_load" | "model_load" | "inference" => {
                    let phase: Phase = key.parse().expect("listed phase names parse");
                    profile.phase_deltas.insert(phase, number()?);
                }
                other => return Err(ProfileError::UnknownKey(other.into())),
            }
        }
        profile.validate()?;
        Ok(SimSpec { profile, seed })
    }
}

/// Renders the meter trace the profile would produce over `phases`.
///
/// Samples sit on a `1/rate_hz` grid from `t = 0` up to (excluding) the end
/// of the last phase. Equal seeds give identical traces.
pub fn synth_trace(profile: &LoadProfile, phases: &PhaseLog, seed: u64) -> PowerTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (profile.noise_std_w > 0.0)
        .then(|| Normal::new(0.0, profile.noise_std_w).expect("validated noise std"));
    let end = phases.end();
    let mut samples = Vec::new();
    for k in 0u64.. {
        let mut t = k as f64 / profile.rate_hz;
        if t >= end {
            break;
        }
        if profile.jitter_s > 0.0 {
            t += rng.random_range(0.0..profile.jitter_s);
            if t >= end {
                break;
            }
        }
        let mut watts = profile.baseline_w + phases.phase_at(t).map_or(0.0, |p| profile.delta(p));
        if let Some(n) = &noise {
            watts += n.sample(&mut rng);
        }
        samples.push(PowerSample::new(t, watts.max(0.0)));
    }
    PowerTrace::new(samples, profile.rate_hz, "sim").expect("grid is strictly increasing")
}

/// Stream of samples read from a recorded trace.
///
/// With a finite `speed`, each sample is released no earlier than its
/// offset from the first sample divided by `speed`.
pub struct ReplayStream<R> {
    reader: TraceReader<R>,
    speed: f64,
    started: Option<(Instant, f64)>,
}

impl<R: BufRead> ReplayStream<R> {
    pub fn new(input: R, speed: f64) -> Self {
        Self {
            reader: TraceReader::new(input, TraceFormat::Watts),
            speed,
            started: None,
        }
    }

    pub fn rate_hz(&self) -> f64 {
        self.reader.rate_hz()
    }
}

impl<R: BufRead> Iterator for ReplayStream<R> {
    type Item = Result<PowerSample, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let item = self.reader.next()?;
        if let (Ok(sample), true) = (&item, self.speed.is_finite()) {
            let (origin, t0) = *self.started.get_or_insert((Instant::now(), sample.t));
            let due = Duration::from_secs_f64(((sample.t - t0) / self.speed).max(0.0));
            let elapsed = origin.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
        Some(item)
    }
}

/// Opens a trace file for replay. `f64::INFINITY` replays without pacing.
pub fn replay_trace(
    path: impl AsRef<Path>,
    speed: f64,
) -> Result<ReplayStream<BufReader<File>>, TraceError> {
    if speed.is_nan() || speed <= 0.0 {
        return Err(TraceError::InvalidTrace(format!(
            "replay speed must be positive, got {speed}"
        )));
    }
    let file = File::open(path)?;
    Ok(ReplayStream::new(BufReader::new(file), speed))
}

/// Combines seeds with the splitmix64 finalizer.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

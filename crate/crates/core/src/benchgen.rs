//! Synthetic irregular episodes whose labels depend on observation timing.
//!
//! Each channel is a homogeneous Poisson process on `[0, window)` with
//! standard-normal values. Labels are functionals of the gaps on channel 0,
//! where the gaps include the stretch from 0 to the first observation and
//! from the last observation to the window end:
//!
//! * timing classification: 1 iff the largest gap exceeds the threshold;
//! * elapsed regression: `Σ min(gap, threshold)` in hours.
//!
//! With `mixed` set, both labels additionally move by
//! [`MIXED_VALUE_WEIGHT_HOURS`] times the mean channel-0 value.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Channel, Episode, IrregularSeries, Observation, Schema};
use crate::error::{Error, Result};

pub const RNG_DESCRIPTION: &str =
    "ChaCha8Rng (rand_chacha 0.9), one stream per episode seeded with splitmix64(base_seed + (index + 1) * 0x9E3779B97F4A7C15)";

pub const MIXED_VALUE_WEIGHT_HOURS: f64 = 2.0;

pub const DEFAULT_CHANNELS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    TimingClassification,
    ElapsedRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_channels")]
    pub n_channels: usize,
    pub rate_per_hour: f64,
    pub window_hours: f64,
    pub task: SynthTask,
    pub gap_threshold_hours: f64,
    #[serde(default)]
    pub mixed: bool,
    pub seed: u64,
}

fn default_channels() -> usize {
    DEFAULT_CHANNELS
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_channels: DEFAULT_CHANNELS,
            rate_per_hour: 0.5,
            window_hours: 48.0,
            task: SynthTask::TimingClassification,
            gap_threshold_hours: 6.0,
            mixed: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::Config("need at least one channel".into()));
        }
        if !(self.rate_per_hour.is_finite() && self.rate_per_hour > 0.0) {
            return Err(Error::Config(format!(
                "rate must be positive, got {}",
                self.rate_per_hour
            )));
        }
        if !(self.window_hours.is_finite() && self.window_hours > 0.0) {
            return Err(Error::Config(format!(
                "window must be positive, got {}",
                self.window_hours
            )));
        }
        if !(self.gap_threshold_hours > 0.0 && self.gap_threshold_hours < self.window_hours) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, window)",
                self.gap_threshold_hours
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            channels: (0..self.n_channels)
                .map(|i| Channel::real(format!("ch{i:02}")))
                .collect(),
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn episode_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed.wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Mixes several integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Gaps between consecutive sorted times, bracketed by 0 and `window`.
pub fn gaps(times: &[f64], window: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len() + 1);
    let mut prev = 0.0;
    for &t in times.iter().filter(|&&t| t < window) {
        out.push(t - prev);
        prev = t;
    }
    out.push(window - prev);
    out
}

fn label_from(times: &[f64], values: &[f64], cfg: &SynthConfig) -> f64 {
    let g = gaps(times, cfg.window_hours);
    let shift = if cfg.mixed && !values.is_empty() {
        MIXED_VALUE_WEIGHT_HOURS * values.iter().sum::<f64>() / values.len() as f64
    } else {
        0.0
    };
    match cfg.task {
        SynthTask::TimingClassification => {
            let max_gap = g.iter().cloned().fold(0.0, f64::max);
            if max_gap + shift > cfg.gap_threshold_hours {
                1.0
            } else {
                0.0
            }
        }
        SynthTask::ElapsedRegression => {
            let total: f64 = g.iter().map(|&x| x.min(cfg.gap_threshold_hours)).sum();
            (total + shift).max(0.0)
        }
    }
}

/// Recomputes an episode's label from its raw observations.
pub fn oracle_label(series: &IrregularSeries, cfg: &SynthConfig) -> f64 {
    let ch0: Vec<&Observation> = series
        .observations()
        .iter()
        .filter(|o| o.channel == 0)
        .collect();
    let times: Vec<f64> = ch0.iter().map(|o| o.time).collect();
    let values: Vec<f64> = ch0.iter().map(|o| o.value).collect();
    label_from(&times, &values, cfg)
}

/// Draws one episode from its own seed.
pub fn gen_episode(cfg: &SynthConfig, schema: &Arc<Schema>, seed: u64) -> Result<(IrregularSeries, f64)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = Exp::new(cfg.rate_per_hour).map_err(|e| Error::Config(e.to_string()))?;
    let mut obs = Vec::new();
    for channel in 0..cfg.n_channels {
        let mut t = 0.0;
        loop {
            t += arrivals.sample(&mut rng);
            if t >= cfg.window_hours {
                break;
            }
            let value: f64 = StandardNormal.sample(&mut rng);
            obs.push(Observation {
                time: t,
                channel,
                value,
            });
        }
    }
    let series = IrregularSeries::new(Arc::clone(schema), obs)?;
    let label = oracle_label(&series, cfg);
    Ok((series, label))
}

/// Reproducibility record written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator: String,
    pub rng: String,
    pub config_hash: String,
    pub config: SynthConfig,
    pub n_episodes: usize,
    /// Classification: count of label 1. Regression: 0.
    pub positives: usize,
    /// Classification: positive rate. Regression: mean label (hours).
    pub label_mean: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub schema: Arc<Schema>,
    pub episodes: Vec<Episode>,
    pub manifest: Manifest,
}

pub fn gen_dataset(cfg: &SynthConfig, n_episodes: usize) -> Result<SynthDataset> {
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    let schema = Arc::new(cfg.schema());
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut seeds = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let seed = episode_seed(cfg.seed, i as u64);
        let (series, label) = gen_episode(cfg, &schema, seed)?;
        seeds.push(seed);
        episodes.push(Episode {
            id: format!("ep{i:06}"),
            series,
            label,
        });
    }
    let label_mean = episodes.iter().map(|e| e.label).sum::<f64>() / n_episodes as f64;
    let positives = match cfg.task {
        SynthTask::TimingClassification => episodes.iter().filter(|e| e.label == 1.0).count(),
        SynthTask::ElapsedRegression => 0,
    };
    let manifest = Manifest {
        generator: format!("timeembed {}", env!("CARGO_PKG_VERSION")),
        rng: RNG_DESCRIPTION.to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        n_episodes,
        positives,
        label_mean,
        seeds,
    };
    Ok(SynthDataset {
        schema,
        episodes,
        manifest,
    })
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }
}

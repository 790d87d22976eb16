//! Irregular multivariate series and the transforms that turn them into
//! fixed-grid model inputs.
//!
//! Pipeline: [`fit_norm`] on training episodes, [`apply_norm`] everywhere,
//! [`bin`] onto an hourly grid, then optionally [`attach_mask`] or
//! [`attach_te`] to widen the feature matrix.

mod io;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{te_batch, EncoderConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use io::{load_episodes, write_episodes, write_labels, write_observations};

pub const HOURS_PER_DAY: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelKind {
    Real,
    Categorical { cardinality: usize },
}

impl ChannelKind {
    /// Columns this channel occupies in a binned feature matrix.
    pub fn width(&self) -> usize {
        match *self {
            ChannelKind::Real => 1,
            ChannelKind::Categorical { cardinality } => cardinality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    #[serde(flatten)]
    pub kind: ChannelKind,
}

impl Channel {
    pub fn real(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Real,
        }
    }

    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Categorical { cardinality },
        }
    }
}

/// Ordered channel declarations shared by every series of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub channels: Vec<Channel>,
}

impl Schema {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        let s = Self { channels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, c) in self.channels.iter().enumerate() {
            if c.name.is_empty() || c.name.contains(',') {
                return Err(Error::Config(format!("bad channel name {:?}", c.name)));
            }
            if let Some(prev) = seen.insert(c.name.as_str(), i) {
                return Err(Error::Config(format!(
                    "channel {:?} declared twice (#{prev} and #{i})",
                    c.name
                )));
            }
            if let ChannelKind::Categorical { cardinality } = c.kind {
                if cardinality < 1 {
                    return Err(Error::Config(format!(
                        "categorical channel {:?} needs cardinality >= 1",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    /// Width of the one-hot expanded value block.
    pub fn value_width(&self) -> usize {
        self.channels.iter().map(|c| c.kind.width()).sum()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Schema =
            toml::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub channel: usize,
    pub value: f64,
}

/// Timestamped observations over a fixed channel set, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSeries {
    schema: Arc<Schema>,
    observations: Vec<Observation>,
}

impl IrregularSeries {
    /// Validates every observation and sorts them by time (stable).
    pub fn new(schema: Arc<Schema>, mut observations: Vec<Observation>) -> Result<Self> {
        for (i, o) in observations.iter().enumerate() {
            check_observation(&schema, o).map_err(|e| Error::Row {
                row: i,
                source: Box::new(e),
            })?;
        }
        observations.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Self {
            schema,
            observations,
        })
    }

    pub fn empty(schema: Arc<Schema>) -> Self {
        Self {
            schema,
            observations: Vec::new(),
        }
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Sorted observation times of one channel.
    pub fn channel_times(&self, channel: usize) -> Vec<f64> {
        self.observations
            .iter()
            .filter(|o| o.channel == channel)
            .map(|o| o.time)
            .collect()
    }

    fn with_observations(&self, observations: Vec<Observation>) -> Self {
        Self {
            schema: Arc::clone(&self.schema),
            observations,
        }
    }
}

fn check_observation(schema: &Schema, o: &Observation) -> Result<()> {
    if !o.time.is_finite() || o.time < 0.0 {
        return Err(Error::Input(format!(
            "observation time must be finite and >= 0, got {}",
            o.time
        )));
    }
    let channel = schema
        .channels
        .get(o.channel)
        .ok_or_else(|| Error::Input(format!("unknown channel index {}", o.channel)))?;
    if !o.value.is_finite() {
        return Err(Error::Input(format!(
            "non-finite value {} on channel {:?}",
            o.value, channel.name
        )));
    }
    if let ChannelKind::Categorical { cardinality } = channel.kind {
        if o.value.fract() != 0.0 || o.value < 0.0 || o.value >= cardinality as f64 {
            return Err(Error::Input(format!(
                "categorical value {} outside [0, {cardinality}) on channel {:?}",
                o.value, channel.name
            )));
        }
    }
    Ok(())
}

/// A labeled series. Labels are class indices (as `0.0`/`1.0`) or hours.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub series: IrregularSeries,
    pub label: f64,
}

/// Per-channel statistics of real channels, fitted on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Pooled per-channel mean and population standard deviation.
///
/// Categorical channels get mean 0 and std 1 and are never touched by
/// [`apply_norm`]. Empty or constant channels get std 1.
pub fn fit_norm<'a, I>(train: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a IrregularSeries>,
{
    let mut iter = train.into_iter().peekable();
    let schema = match iter.peek() {
        Some(s) => Arc::clone(s.schema()),
        None => return Err(Error::Input("cannot fit normalization on no series".into())),
    };
    let n = schema.len();
    let mut count = vec![0usize; n];
    let mut sum = vec![0.0; n];
    let mut series_list = Vec::new();
    for s in iter {
        if s.schema().as_ref() != schema.as_ref() {
            return Err(Error::Input("series with differing schemas".into()));
        }
        for o in s.observations() {
            count[o.channel] += 1;
            sum[o.channel] += o.value;
        }
        series_list.push(s);
    }
    let mean: Vec<f64> = (0..n)
        .map(|c| if count[c] > 0 { sum[c] / count[c] as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; n];
    for s in &series_list {
        for o in s.observations() {
            let d = o.value - mean[o.channel];
            sq[o.channel] += d * d;
        }
    }
    let mut out = NormStats {
        mean: vec![0.0; n],
        std: vec![1.0; n],
    };
    for (c, ch) in schema.channels.iter().enumerate() {
        if ch.kind != ChannelKind::Real {
            continue;
        }
        if count[c] == 0 {
            log::warn!("channel {:?} has no training observations; using mean 0, std 1", ch.name);
            continue;
        }
        out.mean[c] = mean[c];
        let std = (sq[c] / count[c] as f64).sqrt();
        out.std[c] = if std > 0.0 && std.is_finite() { std } else { 1.0 };
    }
    Ok(out)
}

/// Standardizes real channels. Not idempotent: apply exactly once.
pub fn apply_norm(series: &IrregularSeries, stats: &NormStats) -> Result<IrregularSeries> {
    let schema = series.schema();
    if stats.mean.len() != schema.len() || stats.std.len() != schema.len() {
        return Err(Error::Shape(format!(
            "stats cover {} channels, series has {}",
            stats.mean.len(),
            schema.len()
        )));
    }
    let obs = series
        .observations()
        .iter()
        .map(|o| {
            let mut o = *o;
            if schema.channels[o.channel].kind == ChannelKind::Real {
                o.value = (o.value - stats.mean[o.channel]) / stats.std[o.channel];
            }
            o
        })
        .collect();
    Ok(series.with_observations(obs))
}

/// Which timestamps a time embedding is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAnchor {
    /// The regular grid, `j * bin_width`. Identical for every episode.
    Grid,
    /// Time of the latest observation (any channel) at or before step `j`;
    /// `0` before the first observation.
    #[default]
    LastObservation,
}

/// Fixed-grid view of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedEpisode {
    pub grid_times: Vec<f64>,
    pub last_obs_times: Vec<f64>,
    /// Feature matrix, steps x features.
    pub x: Matrix,
    /// Observation indicator, steps x channels.
    pub m: Matrix,
    /// Hours since the channel was last observed, steps x channels.
    pub d: Matrix,
    pub window: f64,
    pub bin_width: f64,
    /// No observation fell inside the window.
    pub all_missing: bool,
}

impl BinnedEpisode {
    pub fn steps(&self) -> usize {
        self.grid_times.len()
    }

    pub fn anchor_times(&self, anchor: TimeAnchor) -> &[f64] {
        match anchor {
            TimeAnchor::Grid => &self.grid_times,
            TimeAnchor::LastObservation => &self.last_obs_times,
        }
    }
}

pub fn steps_for(window: f64, bin_width: f64) -> usize {
    (window / bin_width).ceil() as usize
}

/// Puts a (normalized) series on a grid of `ceil(window / bin_width)` steps.
///
/// The last observation in a bin wins. Empty bins forward-fill; bins before
/// a channel's first observation hold 0 (the training mean once normalized)
/// or an all-zero one-hot block. Observations at or after `window` are
/// ignored.
pub fn bin(series: &IrregularSeries, window: f64, bin_width: f64) -> Result<BinnedEpisode> {
    if !(window.is_finite() && window > 0.0 && bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::Config(format!(
            "window ({window}) and bin width ({bin_width}) must be positive"
        )));
    }
    let schema = series.schema();
    let steps = steps_for(window, bin_width);
    let n_ch = schema.len();
    let offsets: Vec<usize> = schema
        .channels
        .iter()
        .scan(0, |acc, c| {
            let o = *acc;
            *acc += c.kind.width();
            Some(o)
        })
        .collect();

    // Last observation per (step, channel); observations are time-sorted.
    let mut latest: Vec<Option<f64>> = vec![None; steps * n_ch];
    let mut latest_time = vec![f64::NEG_INFINITY; steps];
    let mut in_window = 0usize;
    for o in series.observations() {
        if o.time >= window {
            continue;
        }
        let j = ((o.time / bin_width).floor() as usize).min(steps - 1);
        latest[j * n_ch + o.channel] = Some(o.value);
        latest_time[j] = latest_time[j].max(o.time);
        in_window += 1;
    }

    let mut x = Matrix::zeros(steps, schema.value_width());
    let mut m = Matrix::zeros(steps, n_ch);
    let mut d = Matrix::zeros(steps, n_ch);
    let mut carried: Vec<Option<f64>> = vec![None; n_ch];
    let mut last_obs = 0.0;
    let mut last_obs_times = Vec::with_capacity(steps);
    for j in 0..steps {
        if latest_time[j].is_finite() {
            last_obs = latest_time[j];
        }
        last_obs_times.push(last_obs);
        for (c, ch) in schema.channels.iter().enumerate() {
            match latest[j * n_ch + c] {
                Some(v) => {
                    carried[c] = Some(v);
                    m.set(j, c, 1.0);
                }
                None if j > 0 => d.set(j, c, d.get(j - 1, c) + bin_width),
                None => {}
            }
            match (ch.kind, carried[c]) {
                (ChannelKind::Real, Some(v)) => x.set(j, offsets[c], v),
                (ChannelKind::Categorical { .. }, Some(v)) => {
                    x.set(j, offsets[c] + v as usize, 1.0)
                }
                (_, None) => {}
            }
        }
    }

    let all_missing = in_window == 0;
    if all_missing {
        log::debug!("episode has no observations inside the {window}h window");
    }
    Ok(BinnedEpisode {
        grid_times: (0..steps).map(|j| j as f64 * bin_width).collect(),
        last_obs_times,
        x,
        m,
        d,
        window,
        bin_width,
        all_missing,
    })
}

/// Appends one time embedding per step to the features.
pub fn attach_te(ep: &BinnedEpisode, cfg: &EncoderConfig, anchor: TimeAnchor) -> Result<BinnedEpisode> {
    if cfg.max_time() < ep.window {
        return Err(Error::Config(format!(
            "embedding max_time {} is shorter than the {}h window",
            cfg.max_time(),
            ep.window
        )));
    }
    let emb = te_batch(ep.anchor_times(anchor), cfg)?;
    Ok(BinnedEpisode {
        x: ep.x.hcat(&emb),
        ..ep.clone()
    })
}

/// Appends the missingness mask and the `1/window`-scaled time deltas.
pub fn attach_mask(ep: &BinnedEpisode) -> BinnedEpisode {
    let mut scaled = ep.d.clone();
    for v in scaled.as_mut_slice() {
        *v /= ep.window;
    }
    BinnedEpisode {
        x: ep.x.hcat(&ep.m).hcat(&scaled),
        ..ep.clone()
    }
}

/// Keeps each observation independently with probability `keep_fraction`.
pub fn drop_observations(series: &IrregularSeries, keep_fraction: f64, seed: u64) -> Result<IrregularSeries> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    if keep_fraction == 1.0 {
        return Ok(series.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = series
        .observations()
        .iter()
        .filter(|_| rng.random::<f64>() < keep_fraction)
        .copied()
        .collect();
    Ok(series.with_observations(kept))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelUnit {
    ToDays,
    ToHours,
}

pub fn label_convert(label: f64, direction: LabelUnit) -> Result<f64> {
    if !(label.is_finite() && label >= 0.0) {
        return Err(Error::Input(format!("label must be finite and >= 0, got {label}")));
    }
    Ok(match direction {
        LabelUnit::ToDays => label / HOURS_PER_DAY,
        LabelUnit::ToHours => label * HOURS_PER_DAY,
    })
}

/// Fold index per episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, episode: usize) -> usize {
        self.fold_of[episode]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.fold_of
    }

    /// Episode indices in fold `f`, ascending.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == f).collect()
    }

    /// Episode indices outside fold `f`, ascending.
    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != f).collect()
    }
}

/// Seeded k-fold partition keyed by episode id, optionally class-stratified.
///
/// Episodes are ordered by id, shuffled per class, then dealt round-robin
/// with one counter running across classes, so fold sizes differ by at most
/// one and so do per-class counts. The result does not depend on input
/// order.
pub fn split_folds<S: AsRef<str>>(
    ids: &[S],
    classes: Option<&[usize]>,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Input(format!(
            "{} episodes cannot fill {k} folds",
            ids.len()
        )));
    }
    if let Some(c) = classes {
        if c.len() != ids.len() {
            return Err(Error::Shape("one class per episode required".into()));
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..ids.len() {
        let class = classes.map_or(0, |c| c[i]);
        groups.entry(class).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; ids.len()];
    let mut next = 0usize;
    for members in groups.values_mut() {
        members.sort_by(|&a, &b| ids[a].as_ref().cmp(ids[b].as_ref()));
        shuffle(members, &mut rng);
        for &i in members.iter() {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Fisher-Yates with a fixed draw sequence, independent of rand's
/// slice-shuffle implementation.
pub(crate) fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

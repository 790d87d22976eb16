//! Turns raw episodes into model-ready matrices.

use serde::{Deserialize, Serialize};

use crate::dataset::{
    apply_norm, attach_mask, attach_te, bin, fit_norm, label_convert, Episode, IrregularSeries, LabelUnit,
    NormStats, Schema, TimeAnchor,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{ModelSpec, Task, TeMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub window_hours: f64,
    pub bin_hours: f64,
    #[serde(default)]
    pub anchor: TimeAnchor,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_hours: 48.0,
            bin_hours: 1.0,
            anchor: TimeAnchor::LastObservation,
        }
    }
}

impl FeatureConfig {
    pub fn steps(&self) -> usize {
        crate::dataset::steps_for(self.window_hours, self.bin_hours)
    }
}

/// One prepared episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub x: Matrix,
    /// Per-step timestamps for additive embeddings.
    pub times: Vec<f64>,
}

/// Normalization fitted on training episodes plus the spec's input regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    pub features: FeatureConfig,
    pub norm: NormStats,
    pub spec: ModelSpec,
}

impl Pipeline {
    pub fn fit<'a, I>(spec: &ModelSpec, features: FeatureConfig, train: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a IrregularSeries>,
    {
        Ok(Self {
            features,
            norm: fit_norm(train)?,
            spec: spec.clone(),
        })
    }

    /// Per-step width this pipeline produces for `schema`.
    pub fn step_width(&self, schema: &Schema) -> usize {
        self.spec.step_width(schema.value_width(), schema.len())
    }

    pub fn input_dim(&self, schema: &Schema) -> usize {
        self.spec.input_dim(self.features.steps(), self.step_width(schema))
    }

    pub fn prepare(&self, series: &IrregularSeries) -> Result<Prepared> {
        let f = &self.features;
        let ep = bin(&apply_norm(series, &self.norm)?, f.window_hours, f.bin_hours)?;
        let ep = match self.spec.te_mode {
            TeMode::None | TeMode::AddTe => ep,
            TeMode::Mask => attach_mask(&ep),
            TeMode::CatTe => attach_te(&ep, self.spec.te_cfg.as_ref().expect("validated spec"), f.anchor)?,
        };
        let times = ep.anchor_times(f.anchor).to_vec();
        Ok(Prepared { x: ep.x, times })
    }

    pub fn prepare_all<'a, I>(&self, series: I) -> Result<Vec<Prepared>>
    where
        I: IntoIterator<Item = &'a IrregularSeries>,
    {
        series.into_iter().map(|s| self.prepare(s)).collect()
    }
}

/// Training target for a stored label: class index, or days for regression.
pub fn training_target(task: Task, label: f64) -> Result<f64> {
    match task {
        Task::Classification if label == 0.0 || label == 1.0 => Ok(label),
        Task::Classification => Err(Error::Input(format!("class label {label} is not 0 or 1"))),
        Task::Regression => label_convert(label, LabelUnit::ToDays),
    }
}

/// Converts a model score back to the label's unit (hours for regression).
pub fn score_to_label_unit(task: Task, score: f64) -> f64 {
    match task {
        Task::Classification => score,
        Task::Regression => score * crate::dataset::HOURS_PER_DAY,
    }
}

pub fn targets(task: Task, episodes: &[&Episode]) -> Result<Vec<f64>> {
    episodes.iter().map(|e| training_target(task, e.label)).collect()
}

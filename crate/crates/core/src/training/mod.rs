//! Mini-batch training, cross-validated experiments and reports.

mod cv;
mod features;
mod optim;
mod sweep;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvalBatch, Metric};
use crate::models::{backward_into, forward, init_params, loss, ModelSpec, ParamSet, Task};

pub use cv::{aggregate, run_cv, CvConfig, CvOutcome, RunReport, RunRow, RunStatus, SelectedModel, Summary, TestSet};
pub use features::{score_to_label_unit, training_target, FeatureConfig, Pipeline, Prepared};
pub use optim::{opt_step, AdamConfig, OptState};
pub use sweep::{default_fractions, sweep_csv, sweep_dropout, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 40,
            batch_size: 100,
            weight_decay: 1e-2,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        AdamConfig::new(self.lr, self.weight_decay).validate()
    }
}

/// Prepared inputs with training-unit targets.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub inputs: Vec<Prepared>,
    pub targets: Vec<f64>,
}

impl LabeledSet {
    pub fn new(inputs: Vec<Prepared>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!("{} inputs, {} targets", inputs.len(), targets.len())));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParamSet,
    pub history: Vec<EpochStats>,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl Trained {
    pub fn best_val(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e].val_metric)
    }
}

/// AUC-ROC for classification, MAE in hours for regression.
pub fn selection_metric(task: Task) -> Metric {
    match task {
        Task::Classification => Metric::AucRoc,
        Task::Regression => Metric::Mae,
    }
}

pub fn metrics_for(task: Task) -> &'static [Metric] {
    match task {
        Task::Classification => &Metric::CLASSIFICATION,
        Task::Regression => &Metric::REGRESSION,
    }
}

fn better(metric: Metric, a: f64, b: f64) -> bool {
    if metric.higher_is_better() {
        a > b
    } else {
        a < b
    }
}

/// Model scores in label units: positive-class probability, or hours.
pub fn predict(spec: &ModelSpec, params: &ParamSet, inputs: &[Prepared]) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|p| {
            let t = forward(spec, params, &p.x, &p.times)?;
            Ok(score_to_label_unit(spec.task, t.output.score()))
        })
        .collect()
}

/// Metric on scores and training-unit targets.
pub fn score(task: Task, metric: Metric, scores: Vec<f64>, targets: &[f64]) -> Result<f64> {
    let targets = targets.iter().map(|&y| score_to_label_unit(task, y)).collect();
    let batch = match task {
        Task::Classification => EvalBatch::binary(scores, targets)?,
        Task::Regression => EvalBatch::new(scores, targets)?,
    };
    metric.compute(&batch)
}

pub fn evaluate(spec: &ModelSpec, params: &ParamSet, set: &LabeledSet) -> Result<BTreeMap<Metric, f64>> {
    let scores = predict(spec, params, &set.inputs)?;
    metrics_for(spec.task)
        .iter()
        .map(|&m| Ok((m, score(spec.task, m, scores.clone(), &set.targets)?)))
        .collect()
}

fn diverged(e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Diverged(m),
        other => other,
    }
}

/// Trains from a seeded initialization and keeps the parameters of the
/// epoch with the best validation metric, the latest one on ties.
pub fn train_one(spec: &ModelSpec, train: &LabeledSet, val: &LabeledSet, hyper: &Hyper, seed: u64) -> Result<Trained> {
    spec.validate()?;
    hyper.validate()?;
    let first = train
        .inputs
        .first()
        .ok_or_else(|| Error::Input("empty training set".into()))?;
    if val.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let input_dim = spec.input_dim(first.x.rows(), first.x.cols());
    let mut params = init_params(spec, input_dim, crate::benchgen::derive_seed(&[seed, 0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::benchgen::derive_seed(&[seed, 1]));
    let mut state = OptState::new(&params, AdamConfig::new(hyper.lr, hyper.weight_decay));
    let metric = selection_metric(spec.task);
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = params.zeros_like();
    for epoch in 0..hyper.epochs {
        crate::dataset::shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            grads.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = &train.inputs[i];
                let y = train.targets[i];
                let trace = forward(spec, &params, &p.x, &p.times).map_err(diverged)?;
                let l = loss(spec, &trace, y)?;
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("loss {l} at epoch {epoch}")));
                }
                total += l;
                backward_into(spec, &params, &trace, y, scale, &mut grads)?;
            }
            opt_step(&mut params, &grads, &mut state).map_err(diverged)?;
        }
        let scores = predict(spec, &params, &val.inputs).map_err(diverged)?;
        let v = score(spec.task, metric, scores, &val.targets)?;
        log::debug!("epoch {epoch}: train loss {:.5}, val {metric} {v:.5}", total / train.len() as f64);
        history.push(EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_metric: v,
        });
        // Ties go to the later epoch.
        if best_epoch.is_none_or(|b: usize| !better(metric, history[b].val_metric, v)) {
            best_epoch = Some(epoch);
            best = params.clone();
        }
    }
    Ok(Trained {
        params: best,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests;

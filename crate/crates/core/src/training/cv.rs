//! k-fold cross-validation with repeated runs and per-fold model selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{training_target, FeatureConfig, Pipeline};
use super::{better, evaluate, selection_metric, train_one, Hyper, LabeledSet};
use crate::benchgen::derive_seed;
use crate::dataset::{split_folds, Episode, FoldAssignment, IrregularSeries};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::models::{ModelSpec, ParamSet, Task};

/// Held-out episodes. Labels are private to this module and its evaluation
/// calls; callers can only reach the series.
#[derive(Debug, Clone)]
pub struct TestSet {
    episodes: Vec<Episode>,
}

impl TestSet {
    pub fn new(episodes: Vec<Episode>) -> Self {
        Self { episodes }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.episodes.iter().map(|e| e.id.as_str())
    }

    pub fn series(&self) -> impl Iterator<Item = &IrregularSeries> {
        self.episodes.iter().map(|e| &e.series)
    }

    pub(crate) fn targets(&self, task: Task) -> Result<Vec<f64>> {
        self.episodes.iter().map(|e| training_target(task, e.label)).collect()
    }

    /// Prepares the series with `pipeline` and attaches the labels.
    pub(crate) fn labeled(&self, pipeline: &Pipeline, task: Task) -> Result<LabeledSet> {
        LabeledSet::new(pipeline.prepare_all(self.series())?, self.targets(task)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    pub runs: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub features: FeatureConfig,
}

impl CvConfig {
    pub fn new(base_seed: u64) -> Self {
        Self {
            k: 5,
            runs: 10,
            base_seed,
            hyper: Hyper::default(),
            features: FeatureConfig::default(),
        }
    }

    /// Seed of one training execution.
    pub fn run_seed(&self, fold: usize, run: usize) -> u64 {
        derive_seed(&[self.base_seed, fold as u64, run as u64])
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.runs == 0 {
            return Err(Error::Config(format!(
                "need k >= 2 and runs >= 1, got k = {}, runs = {}",
                self.k, self.runs
            )));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub model: String,
    pub fold: usize,
    pub run: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub best_epoch: Option<usize>,
    pub val_metric: Option<f64>,
    pub selected: bool,
    /// Test metrics, present for selected runs only.
    pub test: BTreeMap<Metric, f64>,
}

/// Mean, population standard deviation and standard error of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 when `n < 2`.
    pub stderr: f64,
    pub n: usize,
}

pub fn aggregate(metric: Metric, values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            metric,
            mean: f64::NAN,
            std: f64::NAN,
            stderr: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let stderr = if n < 2 {
        0.0
    } else {
        (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    };
    Summary {
        metric,
        mean,
        std: (ss / n as f64).sqrt(),
        stderr,
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub selection_metric: Metric,
    pub rows: Vec<RunRow>,
    pub failed: usize,
    pub summary: Vec<Summary>,
}

impl RunReport {
    pub fn trainings(&self) -> usize {
        self.rows.len()
    }

    /// Recomputes the summary from the selected rows.
    pub fn recompute_summary(rows: &[RunRow], metrics: &[Metric]) -> Vec<Summary> {
        metrics
            .iter()
            .map(|&m| {
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.selected)
                    .filter_map(|r| r.test.get(&m).copied())
                    .collect();
                aggregate(m, &values)
            })
            .collect()
    }

    /// One JSON object per training execution.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("serializable row"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<RunRow>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Input(format!("report line {}: {e}", i + 1))))
            .collect()
    }

    /// `model,metric,mean,std,stderr,n,failed`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,metric,mean,std,stderr,n,failed\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.model, s.metric, s.mean, s.std, s.stderr, s.n, self.failed
            );
        }
        out
    }
}

/// A run chosen for its fold, with the pipeline it was trained under.
#[derive(Debug, Clone)]
pub struct SelectedModel {
    pub fold: usize,
    pub run: usize,
    pub params: ParamSet,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: RunReport,
    pub selected: Vec<SelectedModel>,
    pub folds: FoldAssignment,
}

fn labeled(pipeline: &Pipeline, task: Task, episodes: &[&Episode]) -> Result<LabeledSet> {
    LabeledSet::new(
        pipeline.prepare_all(episodes.iter().map(|e| &e.series))?,
        super::features::targets(task, episodes)?,
    )
}

/// `k` folds x `runs` trainings on `pool`; the best-validation run of each
/// fold is evaluated once on `test`. Normalization is fitted on the
/// training folds of each split only.
pub fn run_cv(spec: &ModelSpec, pool: &[Episode], test: &TestSet, cfg: &CvConfig) -> Result<CvOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Input("the test split is empty".into()));
    }
    let ids: Vec<&str> = pool.iter().map(|e| e.id.as_str()).collect();
    if let Some(dup) = test.ids().find(|t| ids.contains(t)) {
        return Err(Error::Input(format!("episode {dup:?} is in both the pool and the test split")));
    }
    let classes: Option<Vec<usize>> = match spec.task {
        Task::Classification => Some(
            pool.iter()
                .map(|e| training_target(spec.task, e.label).map(|y| y as usize))
                .collect::<Result<_>>()?,
        ),
        Task::Regression => None,
    };
    let folds = split_folds(&ids, classes.as_deref(), cfg.k, cfg.base_seed)?;
    let metric = selection_metric(spec.task);
    let alias = spec.alias();

    let mut rows = Vec::with_capacity(cfg.k * cfg.runs);
    let mut selected = Vec::new();
    for fold in 0..cfg.k {
        let train_eps: Vec<&Episode> = folds.complement(fold).into_iter().map(|i| &pool[i]).collect();
        let val_eps: Vec<&Episode> = folds.members(fold).into_iter().map(|i| &pool[i]).collect();
        let pipeline = Pipeline::fit(spec, cfg.features, train_eps.iter().map(|e| &e.series))?;
        let train = labeled(&pipeline, spec.task, &train_eps)?;
        let val = labeled(&pipeline, spec.task, &val_eps)?;
        let outcomes: Vec<(u64, Result<super::Trained>)> = (0..cfg.runs)
            .into_par_iter()
            .map(|run| {
                let seed = cfg.run_seed(fold, run);
                (seed, train_one(spec, &train, &val, &cfg.hyper, seed))
            })
            .collect();
        let first_row = rows.len();
        let mut best: Option<(usize, f64, ParamSet)> = None;
        for (run, (seed, outcome)) in outcomes.into_iter().enumerate() {
            let mut row = RunRow {
                model: alias.clone(),
                fold,
                run,
                seed,
                status: RunStatus::Ok,
                best_epoch: None,
                val_metric: None,
                selected: false,
                test: BTreeMap::new(),
            };
            match outcome {
                Ok(t) => {
                    row.best_epoch = t.best_epoch;
                    row.val_metric = t.best_val();
                    if let Some(v) = row.val_metric {
                        if best.as_ref().is_none_or(|(_, b, _)| better(metric, v, *b)) {
                            best = Some((run, v, t.params));
                        }
                    }
                }
                Err(Error::Diverged(reason)) => {
                    log::warn!("{alias} fold {fold} run {run} failed: {reason}");
                    row.status = RunStatus::Failed { reason };
                }
                Err(e) => return Err(e),
            }
            rows.push(row);
        }
        match best {
            Some((run, _, params)) => {
                let test_set = test.labeled(&pipeline, spec.task)?;
                let row = &mut rows[first_row + run];
                row.selected = true;
                row.test = evaluate(spec, &params, &test_set)?;
                selected.push(SelectedModel {
                    fold,
                    run,
                    params,
                    pipeline,
                });
            }
            None => log::warn!("{alias} fold {fold}: no run finished, fold left out"),
        }
    }
    if selected.is_empty() {
        return Err(Error::Diverged(format!("every {alias} run failed")));
    }
    let failed = rows.iter().filter(|r| r.status != RunStatus::Ok).count();
    let summary = RunReport::recompute_summary(&rows, super::metrics_for(spec.task));
    Ok(CvOutcome {
        report: RunReport {
            model: alias,
            selection_metric: metric,
            rows,
            failed,
            summary,
        },
        selected,
        folds,
    })
}

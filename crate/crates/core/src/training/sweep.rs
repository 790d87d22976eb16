//! Re-evaluation of trained models on test data with observations removed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::{aggregate, SelectedModel, TestSet};
use super::{evaluate, metrics_for, LabeledSet};
use crate::benchgen::derive_seed;
use crate::dataset::drop_observations;
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::models::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub metric: Metric,
    /// Mean over models and dropout seeds.
    pub value: f64,
    /// Population standard deviation over models and dropout seeds.
    pub std: f64,
}

/// `1.0, 0.9, ..., 0.1`.
pub fn default_fractions() -> Vec<f64> {
    (1..=10).rev().map(|k| k as f64 / 10.0).collect()
}

/// For each keep fraction and dropout seed, thins every test episode,
/// rebuilds features with each model's own pipeline and re-evaluates.
///
/// An episode's draw sequence depends only on the seed and its position, so
/// smaller fractions keep subsets of what larger ones keep.
pub fn sweep_dropout(
    spec: &ModelSpec,
    models: &[SelectedModel],
    test: &TestSet,
    fractions: &[f64],
    n_seeds: usize,
    base_seed: u64,
) -> Result<Vec<SweepRow>> {
    if models.is_empty() {
        return Err(Error::Input("no trained models to sweep".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("need at least one dropout seed".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("keep fraction {f} is outside (0, 1]")));
    }
    let targets = test.targets(spec.task)?;
    let metrics = metrics_for(spec.task);
    let mut rows = Vec::new();
    for &fraction in fractions {
        let per_seed: Vec<Result<Vec<Vec<f64>>>> = (0..n_seeds)
            .into_par_iter()
            .map(|s| {
                let thinned = test
                    .series()
                    .enumerate()
                    .map(|(i, series)| drop_observations(series, fraction, derive_seed(&[base_seed, s as u64, i as u64])))
                    .collect::<Result<Vec<_>>>()?;
                models
                    .iter()
                    .map(|m| {
                        let set = LabeledSet::new(m.pipeline.prepare_all(&thinned)?, targets.clone())?;
                        let values = evaluate(spec, &m.params, &set)?;
                        Ok(metrics.iter().map(|k| values[k]).collect())
                    })
                    .collect()
            })
            .collect();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
        for seed_rows in per_seed {
            for model_row in seed_rows? {
                for (k, v) in model_row.into_iter().enumerate() {
                    values[k].push(v);
                }
            }
        }
        for (k, &metric) in metrics.iter().enumerate() {
            let s = aggregate(metric, &values[k]);
            rows.push(SweepRow {
                fraction,
                metric,
                value: s.mean,
                std: s.std,
            });
        }
    }
    Ok(rows)
}

/// `fraction,metric,value,std`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,metric,value,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.fraction, r.metric, r.value, r.std));
    }
    out
}

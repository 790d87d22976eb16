//! Evaluation measures: AUC-ROC and average precision for the binary task,
//! MAE, RMSE and explained variance for regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predictions paired with targets.
///
/// For classification, predictions are positive-class probabilities and
/// targets are `0.0` or `1.0`. For regression both are in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBatch {
    predictions: Vec<f64>,
    targets: Vec<f64>,
}

impl EvalBatch {
    pub fn new(predictions: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if predictions.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} targets",
                predictions.len(),
                targets.len()
            )));
        }
        if predictions.is_empty() {
            return Err(Error::Input("empty evaluation batch".into()));
        }
        if predictions.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("evaluation batch".into()));
        }
        Ok(Self {
            predictions,
            targets,
        })
    }

    /// Classification batch: probabilities in [0, 1], targets in {0, 1}.
    pub fn binary(probabilities: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("probabilities must lie in [0, 1]".into()));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Input("binary targets must be 0 or 1".into()));
        }
        Self::new(probabilities, labels)
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    fn positives(&self) -> usize {
        self.targets.iter().filter(|&&y| y == 1.0).count()
    }

    /// Indices sorted by descending prediction, ties broken by index.
    fn order_desc(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.predictions[b].total_cmp(&self.predictions[a]).then(a.cmp(&b)));
        idx
    }
}

/// Mann-Whitney estimate of P(score⁺ > score⁻) + ½ P(tie).
pub fn auc_roc(batch: &EvalBatch) -> Result<f64> {
    let n_pos = batch.positives();
    let n_neg = batch.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC-ROC needs both classes present".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.sort_by(|&a, &b| batch.predictions[a].total_cmp(&batch.predictions[b]));
    // Sum of mid-ranks (1-based) of positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let score = batch.predictions[idx[start]];
        let mut end = start;
        while end < idx.len() && batch.predictions[idx[end]] == score {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = idx[start..end]
            .iter()
            .filter(|&&i| batch.targets[i] == 1.0)
            .count();
        rank_sum += mid_rank * pos_in_group as f64;
        start = end;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Step-wise average precision, `Σ (R_n − R_{n−1}) P_n` over descending
/// distinct score thresholds.
pub fn avg_precision(batch: &EvalBatch) -> Result<f64> {
    let n_pos = batch.positives();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let idx = batch.order_desc();
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let score = batch.predictions[idx[start]];
        let mut end = start;
        while end < idx.len() && batch.predictions[idx[end]] == score {
            if batch.targets[idx[end]] == 1.0 {
                tp += 1;
            }
            end += 1;
        }
        seen = end;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        start = end;
    }
    debug_assert_eq!(seen, batch.len());
    Ok(ap)
}

pub fn mae(batch: &EvalBatch) -> f64 {
    batch
        .predictions
        .iter()
        .zip(&batch.targets)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / batch.len() as f64
}

pub fn rmse(batch: &EvalBatch) -> f64 {
    let mse = batch
        .predictions
        .iter()
        .zip(&batch.targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / batch.len() as f64;
    mse.sqrt()
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// `1 − Var(y − ŷ) / Var(y)` with population variances. Blind to a
/// constant bias in the predictions.
pub fn explained_variance(batch: &EvalBatch) -> Result<f64> {
    let var_y = population_variance(batch.targets.iter().copied());
    if var_y <= 0.0 {
        return Err(Error::UndefinedMetric(
            "explained variance needs non-constant targets".into(),
        ));
    }
    let residuals = batch
        .predictions
        .iter()
        .zip(&batch.targets)
        .map(|(p, y)| y - p);
    Ok(1.0 - population_variance(residuals) / var_y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "AUC-ROC")]
    AucRoc,
    #[serde(rename = "AP")]
    AveragePrecision,
    #[serde(rename = "MAE")]
    Mae,
    #[serde(rename = "RMSE")]
    Rmse,
    #[serde(rename = "EV")]
    ExplainedVariance,
}

impl Metric {
    pub const CLASSIFICATION: [Metric; 2] = [Metric::AucRoc, Metric::AveragePrecision];
    pub const REGRESSION: [Metric; 3] = [Metric::Mae, Metric::Rmse, Metric::ExplainedVariance];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::AucRoc => "AUC-ROC",
            Metric::AveragePrecision => "AP",
            Metric::Mae => "MAE",
            Metric::Rmse => "RMSE",
            Metric::ExplainedVariance => "EV",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        !matches!(self, Metric::Mae | Metric::Rmse)
    }

    pub fn compute(&self, batch: &EvalBatch) -> Result<f64> {
        match self {
            Metric::AucRoc => auc_roc(batch),
            Metric::AveragePrecision => avg_precision(batch),
            Metric::Mae => Ok(mae(batch)),
            Metric::Rmse => Ok(rmse(batch)),
            Metric::ExplainedVariance => explained_variance(batch),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Quadratic-time reference implementations.
    use super::EvalBatch;

    pub fn auc_pairs(b: &EvalBatch) -> f64 {
        let (p, y) = (b.predictions(), b.targets());
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    pairs += 1.0;
                    if p[i] > p[j] {
                        wins += 1.0;
                    } else if p[i] == p[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    pub fn ap_thresholds(b: &EvalBatch) -> f64 {
        let (p, y) = (b.predictions(), b.targets());
        let mut thresholds: Vec<f64> = p.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let n_pos = y.iter().filter(|&&v| v == 1.0).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let mut tp = 0.0;
            let mut predicted = 0.0;
            for i in 0..p.len() {
                if p[i] >= t {
                    predicted += 1.0;
                    if y[i] == 1.0 {
                        tp += 1.0;
                    }
                }
            }
            let recall = tp / n_pos;
            ap += (recall - prev_recall) * (tp / predicted);
            prev_recall = recall;
        }
        ap
    }
}

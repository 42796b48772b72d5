//! Metric kernels for the three simulation tasks and run aggregation.
//!
//! * discrimination: Overlap Ratio
//! * ranking: nDCG@k and Hit Rate@k under the single-relevant-item convention
//! * rating: micro RMSE and macro Jensen–Shannon divergence (base 2)
//!
//! Every kernel asserts its output range before returning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("positive set is empty")]
    EmptyPositives,
    #[error("positive item {0:?} is not in the ranking")]
    PositiveAbsent(String),
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("prediction and truth key sets differ")]
    KeyMismatch,
    #[error("empty input")]
    Empty,
    #[error("distribution lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid probability vector: {0}")]
    NotNormalized(String),
}

/// Tolerance on probability vectors summing to one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// `|selected ∩ positives| / |positives|`.
pub fn overlap_ratio(selected: &BTreeSet<String>, positives: &BTreeSet<String>) -> Result<f64, MetricError> {
    if positives.is_empty() {
        return Err(MetricError::EmptyPositives);
    }
    let hits = selected.intersection(positives).count();
    let value = hits as f64 / positives.len() as f64;
    debug_assert!((0.0..=1.0).contains(&value));
    Ok(value)
}

/// 1-based rank of `positive` within `permutation`.
pub fn rank_of(permutation: &[String], positive: &str) -> Result<usize, MetricError> {
    permutation
        .iter()
        .position(|id| id == positive)
        .map(|idx| idx + 1)
        .ok_or_else(|| MetricError::PositiveAbsent(positive.to_string()))
}

/// nDCG@k with one relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(permutation: &[String], positive: &str, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    let rank = rank_of(permutation, positive)?;
    let value = if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
    debug_assert!((0.0..=1.0).contains(&value));
    Ok(value)
}

/// 1 iff the positive is ranked within the top `k` (inclusive).
pub fn hit_rate_at_k(permutation: &[String], positive: &str, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    let rank = rank_of(permutation, positive)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

pub fn rmse(predictions: &BTreeMap<String, f64>, truths: &BTreeMap<String, f64>) -> Result<f64, MetricError> {
    if truths.is_empty() {
        return Err(MetricError::Empty);
    }
    if predictions.len() != truths.len() || !predictions.keys().eq(truths.keys()) {
        return Err(MetricError::KeyMismatch);
    }
    let sum_sq: f64 = predictions
        .values()
        .zip(truths.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let value = (sum_sq / truths.len() as f64).sqrt();
    debug_assert!(value >= 0.0);
    Ok(value)
}

fn check_distribution(p: &[f64]) -> Result<(), MetricError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MetricError::NotNormalized("negative or non-finite entry".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(MetricError::NotNormalized(format!("sums to {total}")));
    }
    Ok(())
}

/// Base-2 Jensen–Shannon divergence, with `0 · log(0/x) = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::LengthMismatch(p.len(), q.len()));
    }
    if p.is_empty() {
        return Err(MetricError::Empty);
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        // Both halves share m, so summing them per coordinate keeps the
        // expression symmetric in (a, b) bit for bit.
        let mut term = 0.0;
        if a > 0.0 {
            term += a * (a / m).log2();
        }
        if b > 0.0 {
            term += b * (b / m).log2();
        }
        total += term;
    }
    let value = (0.5 * total).clamp(0.0, 1.0);
    Ok(value)
}

/// Rating-scale bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    pub const ONE_TO_FIVE: RatingScale = RatingScale { min: 1.0, max: 5.0 };

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.min, self.max)
    }

    /// Integer rating levels `min..=max`, used as histogram bins.
    pub fn levels(&self) -> Vec<i64> {
        (self.min.ceil() as i64..=self.max.floor() as i64).collect()
    }

    /// Bin index for a rating: nearest integer level, clamped to the scale.
    pub fn bin(&self, value: f64) -> usize {
        let level = self.clamp(value).round() as i64;
        (level - self.min.ceil() as i64).max(0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JsdMode {
    /// Per truth group: predicted histogram vs a point mass at the group value,
    /// averaged over non-empty groups.
    #[default]
    PerGroup,
    /// One divergence between the pooled predicted and truth histograms.
    Global,
}

fn histogram(values: impl Iterator<Item = f64>, scale: &RatingScale) -> Vec<f64> {
    let mut counts = vec![0.0; scale.levels().len()];
    let mut n = 0.0;
    for v in values {
        counts[scale.bin(v)] += 1.0;
        n += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

pub fn macro_rating_jsd(
    predictions: &BTreeMap<String, f64>,
    truths: &BTreeMap<String, f64>,
    scale: &RatingScale,
    mode: JsdMode,
) -> Result<f64, MetricError> {
    if truths.is_empty() {
        return Err(MetricError::Empty);
    }
    if predictions.len() != truths.len() || !predictions.keys().eq(truths.keys()) {
        return Err(MetricError::KeyMismatch);
    }
    match mode {
        JsdMode::Global => {
            let p = histogram(predictions.values().copied(), scale);
            let q = histogram(truths.values().copied(), scale);
            jsd(&p, &q)
        }
        JsdMode::PerGroup => {
            let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (id, truth) in truths {
                groups.entry(scale.bin(*truth)).or_default().push(predictions[id]);
            }
            let levels = scale.levels().len();
            let mut sum = 0.0;
            for (bin, preds) in &groups {
                let p = histogram(preds.iter().copied(), scale);
                let mut point = vec![0.0; levels];
                point[*bin] = 1.0;
                sum += jsd(&p, &point)?;
            }
            Ok(sum / groups.len() as f64)
        }
    }
}

/// Per-run values of one metric with their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
    #[serde(default)]
    pub config_digest: String,
    #[serde(default)]
    pub failures: usize,
}

/// Mean and sample standard deviation (`n − 1`; zero for a single run).
pub fn aggregate_runs(metric: &str, per_run: &[f64]) -> Result<MetricReport, MetricError> {
    if per_run.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = per_run.len();
    let constant = per_run.iter().all(|v| *v == per_run[0]);
    let mean = if constant { per_run[0] } else { per_run.iter().sum::<f64>() / n as f64 };
    let std = if n > 1 && !constant {
        (per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MetricReport {
        metric: metric.to_string(),
        per_run: per_run.to_vec(),
        mean,
        std,
        n_runs: n,
        config_digest: String::new(),
        failures: 0,
    })
}

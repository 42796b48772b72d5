//! Negative samplers and robustness probes.

mod debias;
mod probes;

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, ItemStats};

pub use debias::{debias_negatives, mean_stats, within_tolerance};
pub use probes::{
    attribute_probe_config, standard_attribute_masks, popularity_probe, position_probe, AttributeCell, AttributeProbePlan,
    AttributeSampling, LabeledInstances, PopularityProbeSpec,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplingError {
    #[error("universe has {available} items but {needed} were requested")]
    UniverseTooSmall { needed: usize, available: usize },
    #[error("de-bias tolerance unmet after {attempts} draws: {detail}")]
    ToleranceUnmet { attempts: usize, detail: String },
    #[error("sampler configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    Debias,
    PopularityStratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    #[default]
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// Relative tolerance on mean popularity.
    pub popularity_tolerance: f64,
    /// Absolute tolerance on mean rating.
    pub rating_tolerance: f64,
    pub max_resamples: usize,
    /// Fail instead of returning a warning-flagged best effort.
    pub strict: bool,
    pub stratum: Stratum,
    /// Items at or above this popularity quantile form the head.
    pub head_quantile: f64,
    /// Items at or below this popularity quantile form the tail.
    pub tail_quantile: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            kind: SamplerKind::Uniform,
            popularity_tolerance: 0.10,
            rating_tolerance: 0.25,
            max_resamples: 200,
            strict: false,
            stratum: Stratum::Head,
            head_quantile: 0.8,
            tail_quantile: 0.2,
        }
    }
}

impl SamplerSpec {
    pub fn uniform() -> Self {
        SamplerSpec::default()
    }

    pub fn debias() -> Self {
        SamplerSpec { kind: SamplerKind::Debias, ..SamplerSpec::default() }
    }

    pub fn stratified(stratum: Stratum) -> Self {
        SamplerSpec { kind: SamplerKind::PopularityStratified, stratum, ..SamplerSpec::default() }
    }

    /// Short label used in report cells and CSV rows.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.stratum) {
            (SamplerKind::Uniform, _) => "uniform",
            (SamplerKind::Debias, _) => "debias",
            (SamplerKind::PopularityStratified, Stratum::Head) => "head",
            (SamplerKind::PopularityStratified, Stratum::Tail) => "tail",
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if !(self.popularity_tolerance > 0.0 && self.rating_tolerance > 0.0) {
            return Err(SamplingError::Config("tolerances must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.head_quantile) || !(0.0..=1.0).contains(&self.tail_quantile) {
            return Err(SamplingError::Config("stratum quantiles must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws `k` negatives from `universe` (the user's uninteracted items).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        positives: &[ItemId],
        universe: &[ItemId],
        stats: &ItemStats,
        k: usize,
        rng: &mut R,
    ) -> Result<SampleOutcome, SamplingError> {
        self.validate()?;
        match self.kind {
            SamplerKind::Uniform => uniform_negatives(universe, k, rng).map(SampleOutcome::clean),
            SamplerKind::Debias => debias_negatives(positives, universe, stats, k, self, rng),
            SamplerKind::PopularityStratified => stratified_negatives(universe, stats, k, self, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub items: Vec<ItemId>,
    /// Set when the sampler could not satisfy its contract and fell back.
    pub warning: Option<String>,
}

impl SampleOutcome {
    fn clean(items: Vec<ItemId>) -> Self {
        SampleOutcome { items, warning: None }
    }
}

fn check_size(universe: &[ItemId], k: usize) -> Result<(), SamplingError> {
    if universe.len() < k {
        return Err(SamplingError::UniverseTooSmall { needed: k, available: universe.len() });
    }
    Ok(())
}

/// `k` distinct items drawn uniformly without replacement.
pub fn uniform_negatives<R: Rng + ?Sized>(universe: &[ItemId], k: usize, rng: &mut R) -> Result<Vec<ItemId>, SamplingError> {
    check_size(universe, k)?;
    Ok(rand::seq::index::sample(rng, universe.len(), k).into_iter().map(|i| universe[i].clone()).collect())
}

/// Uniform draw restricted to the head or tail popularity stratum. When the
/// stratum is too small the draw is topped up with the items nearest to it
/// and flagged.
pub fn stratified_negatives<R: Rng + ?Sized>(
    universe: &[ItemId],
    stats: &ItemStats,
    k: usize,
    spec: &SamplerSpec,
    rng: &mut R,
) -> Result<SampleOutcome, SamplingError> {
    check_size(universe, k)?;
    let in_stratum = |id: &ItemId| match spec.stratum {
        Stratum::Head => stats.quantile_of(id) >= spec.head_quantile,
        Stratum::Tail => stats.quantile_of(id) <= spec.tail_quantile,
    };
    let pool: Vec<ItemId> = universe.iter().filter(|id| in_stratum(id)).cloned().collect();
    if pool.len() >= k {
        return uniform_negatives(&pool, k, rng).map(SampleOutcome::clean);
    }
    let mut items = pool.clone();
    let taken: HashSet<&ItemId> = pool.iter().collect();
    let mut rest: Vec<&ItemId> = universe.iter().filter(|id| !taken.contains(id)).collect();
    // nearest to the stratum first; ids break ties
    rest.sort_by(|a, b| {
        let (qa, qb) = (stats.quantile_of(a), stats.quantile_of(b));
        let ord = match spec.stratum {
            Stratum::Head => qb.total_cmp(&qa),
            Stratum::Tail => qa.total_cmp(&qb),
        };
        ord.then_with(|| a.cmp(b))
    });
    items.extend(rest.into_iter().take(k - pool.len()).cloned());
    Ok(SampleOutcome {
        items,
        warning: Some(format!(
            "{} stratum holds {} of {k} requested items; topped up with nearest quantiles",
            spec.label(),
            pool.len()
        )),
    })
}

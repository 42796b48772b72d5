use serde::{Deserialize, Serialize};

use super::{SamplerSpec, SamplingError};
use crate::dataset::{ItemStats, SplitDataset};
use crate::profile::GeneratorKind;
use crate::seed::SeedTree;
use crate::tasks::{
    build_discrimination_instance, build_ranking_instance, Attribute, AttributeMask, TaskError, TaskInstance, TaskKind,
};

/// Variants of a ranking instance with the positive placed at each 1-based
/// position. Distractors keep their relative presentation order.
pub fn position_probe(instance: &TaskInstance, positions: &[usize]) -> Result<Vec<TaskInstance>, SamplingError> {
    let positive = instance
        .single_positive()
        .ok_or_else(|| SamplingError::Config("position probe needs exactly one positive".into()))?;
    let pos_idx = instance.candidates.iter().position(|c| c == positive).expect("positive is a candidate");
    let c = instance.candidates.len();
    let distractors: Vec<usize> = instance.presentation_order.iter().copied().filter(|&i| i != pos_idx).collect();
    positions
        .iter()
        .map(|&p| {
            if p == 0 || p > c {
                return Err(SamplingError::Config(format!("position {p} outside [1, {c}]")));
            }
            let mut order = distractors.clone();
            order.insert(p - 1, pos_idx);
            let mut v = instance.clone();
            v.presentation_order = order;
            Ok(v.with_label(format!("position={p}")))
        })
        .collect()
}

/// Shape of the instances built for each popularity strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopularityProbeSpec {
    pub kind: TaskKind,
    pub positives: usize,
    pub candidates: usize,
}

impl Default for PopularityProbeSpec {
    fn default() -> Self {
        PopularityProbeSpec { kind: TaskKind::Ranking, positives: 1, candidates: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstances {
    pub label: String,
    pub sampler: SamplerSpec,
    pub instances: Vec<TaskInstance>,
    /// Reasons instances could not be built.
    pub skipped: Vec<String>,
}

/// One labeled instance set per strategy. All strategies share `seed`, so
/// the positives are identical and only the negatives differ.
pub fn popularity_probe(
    user: &str,
    split: &SplitDataset,
    stats: &ItemStats,
    strategies: &[SamplerSpec],
    spec: &PopularityProbeSpec,
    seed: SeedTree,
) -> Result<Vec<LabeledInstances>, TaskError> {
    if strategies.is_empty() {
        return Err(TaskError::Config("popularity probe needs at least one strategy".into()));
    }
    strategies
        .iter()
        .map(|sampler| {
            let built = match spec.kind {
                TaskKind::Discrimination => {
                    build_discrimination_instance(user, split, stats, spec.positives, spec.candidates, sampler, seed)?
                }
                TaskKind::Ranking => build_ranking_instance(user, split, stats, spec.candidates, sampler, seed)?,
                TaskKind::Rating => return Err(TaskError::Config("rating instances have no negatives to sample".into())),
            };
            let label = sampler.label().to_string();
            let (instances, skipped) = match built {
                crate::tasks::BuildOutcome::Built(i) => (vec![i.with_label(label.clone())], vec![]),
                crate::tasks::BuildOutcome::Skip(reason) => (vec![], vec![reason]),
            };
            Ok(LabeledInstances { label, sampler: sampler.clone(), instances, skipped })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSampling {
    Random,
    Debias,
}

impl AttributeSampling {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributeSampling::Random => "random",
            AttributeSampling::Debias => "debias",
        }
    }

    pub fn sampler(self) -> SamplerSpec {
        match self {
            AttributeSampling::Random => SamplerSpec::uniform(),
            AttributeSampling::Debias => SamplerSpec::debias(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCell {
    pub mask: AttributeMask,
    pub sampling: AttributeSampling,
    pub positives: usize,
    pub candidates: usize,
}

impl AttributeCell {
    pub fn label(&self) -> String {
        format!("{}/{}/{}:{}", self.mask.label(), self.sampling.as_str(), self.positives, self.candidates)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeProbePlan {
    pub generator: GeneratorKind,
    pub cells: Vec<AttributeCell>,
}

/// The discrimination settings every mask is evaluated under.
pub const ATTRIBUTE_SETTINGS: [(usize, usize); 2] = [(3, 10), (3, 6)];

/// Pairs the empty profile with every mask × sampling × setting cell.
pub fn attribute_probe_config(
    masks: &[AttributeMask],
    samplings: &[AttributeSampling],
) -> Result<AttributeProbePlan, SamplingError> {
    if masks.is_empty() || samplings.is_empty() {
        return Err(SamplingError::Config("attribute probe needs masks and samplings".into()));
    }
    if masks.iter().any(AttributeMask::is_empty) {
        return Err(SamplingError::Config("empty attribute mask".into()));
    }
    let mut cells = Vec::new();
    for &sampling in samplings {
        for &(positives, candidates) in &ATTRIBUTE_SETTINGS {
            for mask in masks {
                cells.push(AttributeCell { mask: mask.clone(), sampling, positives, candidates });
            }
        }
    }
    Ok(AttributeProbePlan { generator: GeneratorKind::Empty, cells })
}

/// The seven metadata masks: each attribute alone, two pairs and all four.
pub fn standard_attribute_masks() -> Vec<AttributeMask> {
    use Attribute::*;
    vec![
        AttributeMask::of(&[Title]),
        AttributeMask::of(&[Genre]),
        AttributeMask::of(&[Rating]),
        AttributeMask::of(&[Popularity]),
        AttributeMask::of(&[Title, Genre]),
        AttributeMask::of(&[Rating, Popularity]),
        AttributeMask::full(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn ranking(order: Vec<usize>) -> TaskInstance {
        TaskInstance {
            kind: TaskKind::Ranking,
            user_id: "u".into(),
            candidates: (0..10).map(|i| format!("c{i}")).collect(),
            positives: BTreeSet::from(["c0".to_string()]),
            presentation_order: order,
            attribute_mask: AttributeMask::full(),
            instance_seed: 0,
            truths: BTreeMap::new(),
            label: None,
            sampler_warning: None,
        }
    }

    #[test]
    fn positions_exact() {
        let src = ranking(vec![3, 0, 1, 2, 4, 5, 6, 7, 8, 9]);
        let variants = position_probe(&src, &[1, 5, 10]).unwrap();
        assert_eq!(variants.len(), 3);
        for (v, p) in variants.iter().zip([1, 5, 10]) {
            assert_eq!(v.candidates, src.candidates);
            assert_eq!(v.presented()[p - 1], "c0");
            let rest: Vec<String> = v.presented().into_iter().filter(|c| c != "c0").collect();
            assert_eq!(rest, ["c3", "c1", "c2", "c4", "c5", "c6", "c7", "c8", "c9"]);
        }
        assert!(position_probe(&src, &[11]).is_err());
        assert!(position_probe(&src, &[0]).is_err());
    }

    #[test]
    fn first_position_is_identity() {
        let src = ranking((0..10).collect());
        let v = position_probe(&src, &[1]).unwrap().remove(0);
        assert_eq!(v.presentation_order, src.presentation_order);
    }

    #[test]
    fn attribute_grid() {
        let plan = attribute_probe_config(&standard_attribute_masks(), &[AttributeSampling::Random, AttributeSampling::Debias]).unwrap();
        assert_eq!(plan.cells.len(), 28);
        assert_eq!(plan.generator, GeneratorKind::Empty);
        let labels: BTreeSet<String> = plan.cells.iter().map(AttributeCell::label).collect();
        assert_eq!(labels.len(), 28);
        assert!(labels.contains("popularity/random/3:10"));
        assert!(attribute_probe_config(&[AttributeMask::of(&[])], &[AttributeSampling::Random]).is_err());
        assert!(attribute_probe_config(&[], &[AttributeSampling::Random]).is_err());
    }
}

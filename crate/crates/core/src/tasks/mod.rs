//! Simulation tasks: instance construction, agent prompting and decisions.

mod render;
mod run;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Interaction, ItemId, ItemStats, SplitDataset, UserId};
use crate::llm::GatewayError;
use crate::sampling::{SamplerSpec, SamplingError};
use crate::seed::SeedTree;

pub use render::{render_agent_prompt, render_profile, PopularityRendering, RenderContext};
pub use run::{
    run_task, score_decision, AgentDecision, AgentRunner, DecisionPayload, DecisionRecord, LlmAgent, TaskScore,
};

pub const DEFAULT_CANDIDATES: usize = 10;
pub const DEFAULT_RATING_ITEMS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("task configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Discrimination,
    Ranking,
    Rating,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Discrimination, TaskKind::Ranking, TaskKind::Rating];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Discrimination => "discrimination",
            TaskKind::Ranking => "ranking",
            TaskKind::Rating => "rating",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown task family {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Title,
    Genre,
    Rating,
    Popularity,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Title, Attribute::Genre, Attribute::Rating, Attribute::Popularity];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Title => "title",
            Attribute::Genre => "genre",
            Attribute::Rating => "rating",
            Attribute::Popularity => "popularity",
        }
    }

    /// Field label used on rendered candidate lines.
    pub fn label(self) -> &'static str {
        match self {
            Attribute::Title => "title:",
            Attribute::Genre => "genres:",
            Attribute::Rating => "rating:",
            Attribute::Popularity => "popularity:",
        }
    }
}

/// Which item metadata fields the agent sees.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeMask(pub BTreeSet<Attribute>);

impl AttributeMask {
    pub fn full() -> Self {
        AttributeMask(Attribute::ALL.into_iter().collect())
    }

    pub fn of(attrs: &[Attribute]) -> Self {
        AttributeMask(attrs.iter().copied().collect())
    }

    pub fn contains(&self, attr: Attribute) -> bool {
        self.0.contains(&attr)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `title+genre` style label; `all` for the full mask.
    pub fn label(&self) -> String {
        if *self == AttributeMask::full() {
            return "all".into();
        }
        self.0.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+")
    }
}

impl Default for AttributeMask {
    fn default() -> Self {
        AttributeMask::full()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub user_id: UserId,
    /// Candidates in construction order (positives first).
    pub candidates: Vec<ItemId>,
    pub positives: BTreeSet<ItemId>,
    /// `presentation_order[j]` is the index into `candidates` shown at position `j`.
    pub presentation_order: Vec<usize>,
    pub attribute_mask: AttributeMask,
    pub instance_seed: u64,
    /// Ground-truth ratings; filled for rating instances.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub truths: BTreeMap<ItemId, f64>,
    /// Strategy, mask or position label for probe breakdowns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler_warning: Option<String>,
}

impl TaskInstance {
    /// Candidates in the order the agent sees them.
    pub fn presented(&self) -> Vec<ItemId> {
        self.presentation_order.iter().map(|&i| self.candidates[i].clone()).collect()
    }

    /// Short content digest identifying the instance in logs.
    pub fn instance_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("instance serializes");
        hex::encode(&Sha256::digest(bytes)[..8])
    }

    pub fn single_positive(&self) -> Option<&ItemId> {
        (self.positives.len() == 1).then(|| self.positives.iter().next()).flatten()
    }

    /// Structural invariants shared by every builder and probe.
    pub fn validate(&self) -> Result<(), TaskError> {
        let unique: HashSet<&ItemId> = self.candidates.iter().collect();
        if unique.len() != self.candidates.len() {
            return Err(TaskError::Config("duplicate candidates".into()));
        }
        if !self.positives.iter().all(|p| unique.contains(p)) {
            return Err(TaskError::Config("positives must be candidates".into()));
        }
        let mut order = self.presentation_order.clone();
        order.sort_unstable();
        if order != (0..self.candidates.len()).collect::<Vec<_>>() {
            return Err(TaskError::Config("presentation order is not a permutation".into()));
        }
        if self.kind == TaskKind::Rating && !self.candidates.iter().all(|c| self.truths.contains_key(c)) {
            return Err(TaskError::Config("rating instance without a truth per candidate".into()));
        }
        if self.kind == TaskKind::Ranking && self.positives.len() != 1 {
            return Err(TaskError::Config("ranking instances carry exactly one positive".into()));
        }
        Ok(())
    }

    pub fn with_mask(mut self, mask: AttributeMask) -> Self {
        self.attribute_mask = mask;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// A built instance or the reason none could be built for this user.
#[derive(Debug, Clone, PartialEq)]
pub enum BuildOutcome {
    Built(TaskInstance),
    Skip(String),
}

impl BuildOutcome {
    pub fn instance(self) -> Option<TaskInstance> {
        match self {
            BuildOutcome::Built(i) => Some(i),
            BuildOutcome::Skip(_) => None,
        }
    }
}

/// Which part of the user's history supplies positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Portion {
    Train,
    Test,
}

fn portion_items<'a>(split: &'a SplitDataset, user: &str, portion: Portion) -> Vec<&'a Interaction> {
    let events = match portion {
        Portion::Train => split.train(user),
        Portion::Test => split.test(user),
    };
    // first occurrence wins when an item repeats
    let mut seen = HashSet::new();
    events.iter().filter(|e| seen.insert(e.item_id.as_str())).collect()
}

fn shuffled_order(n: usize, seed: SeedTree) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.child("order").rng());
    order
}

#[allow(clippy::too_many_arguments)]
fn build_choice(
    kind: TaskKind,
    user: &str,
    split: &SplitDataset,
    stats: &ItemStats,
    p: usize,
    c: usize,
    sampler: &SamplerSpec,
    seed: SeedTree,
    portion: Portion,
) -> Result<BuildOutcome, TaskError> {
    if p == 0 || c <= p {
        return Err(TaskError::Config(format!("need 0 < P < C, got P={p} C={c}")));
    }
    let pool = portion_items(split, user, portion);
    if pool.len() < p {
        return Ok(BuildOutcome::Skip(format!("user {user} has {} eligible items, {p} needed", pool.len())));
    }
    let positives: Vec<ItemId> = rand::seq::index::sample(&mut seed.child("positives").rng(), pool.len(), p)
        .into_iter()
        .map(|i| pool[i].item_id.clone())
        .collect();
    let universe = split.uninteracted(user);
    let negatives = sampler.sample(&positives, &universe, stats, c - p, &mut seed.child("negatives").rng())?;
    let mut candidates = positives.clone();
    candidates.extend(negatives.items);
    let instance = TaskInstance {
        kind,
        user_id: user.to_string(),
        presentation_order: shuffled_order(candidates.len(), seed),
        candidates,
        positives: positives.into_iter().collect(),
        attribute_mask: AttributeMask::full(),
        instance_seed: seed.value(),
        truths: BTreeMap::new(),
        label: None,
        sampler_warning: negatives.warning,
    };
    instance.validate()?;
    Ok(BuildOutcome::Built(instance))
}

/// `p` test positives among `c` candidates.
pub fn build_discrimination_instance(
    user: &str,
    split: &SplitDataset,
    stats: &ItemStats,
    p: usize,
    c: usize,
    sampler: &SamplerSpec,
    seed: SeedTree,
) -> Result<BuildOutcome, TaskError> {
    build_choice(TaskKind::Discrimination, user, split, stats, p, c, sampler, seed, Portion::Test)
}

/// One test positive among `c` candidates.
pub fn build_ranking_instance(
    user: &str,
    split: &SplitDataset,
    stats: &ItemStats,
    c: usize,
    sampler: &SamplerSpec,
    seed: SeedTree,
) -> Result<BuildOutcome, TaskError> {
    build_choice(TaskKind::Ranking, user, split, stats, 1, c, sampler, seed, Portion::Test)
}

fn build_rating(user: &str, split: &SplitDataset, n: usize, seed: SeedTree, portion: Portion) -> Result<BuildOutcome, TaskError> {
    if n == 0 {
        return Err(TaskError::Config("rating instances need at least one item".into()));
    }
    let pool = portion_items(split, user, portion);
    if pool.is_empty() {
        return Ok(BuildOutcome::Skip(format!("user {user} has no eligible items")));
    }
    let take = n.min(pool.len());
    let picked: Vec<&Interaction> =
        rand::seq::index::sample(&mut seed.child("positives").rng(), pool.len(), take).into_iter().map(|i| pool[i]).collect();
    let candidates: Vec<ItemId> = picked.iter().map(|e| e.item_id.clone()).collect();
    let truths = picked.iter().map(|e| (e.item_id.clone(), e.rating)).collect();
    let instance = TaskInstance {
        kind: TaskKind::Rating,
        user_id: user.to_string(),
        presentation_order: shuffled_order(candidates.len(), seed),
        positives: candidates.iter().cloned().collect(),
        candidates,
        attribute_mask: AttributeMask::full(),
        instance_seed: seed.value(),
        truths,
        label: None,
        sampler_warning: None,
    };
    instance.validate()?;
    Ok(BuildOutcome::Built(instance))
}

/// `min(n, |test|)` test items with their ground-truth ratings.
pub fn build_rating_instance(user: &str, split: &SplitDataset, n: usize, seed: SeedTree) -> Result<BuildOutcome, TaskError> {
    build_rating(user, split, n, seed, Portion::Test)
}

/// Instance of the given family drawn from the train portion only, used as
/// a counterfactual probe during profile construction.
pub fn build_probe_instance(
    kind: TaskKind,
    user: &str,
    split: &SplitDataset,
    stats: &ItemStats,
    candidates: usize,
    seed: SeedTree,
) -> Result<BuildOutcome, TaskError> {
    let sampler = SamplerSpec::uniform();
    match kind {
        TaskKind::Discrimination => {
            let train = portion_items(split, user, Portion::Train).len();
            let p = 3.min(train).min(candidates.saturating_sub(1)).max(1);
            build_choice(kind, user, split, stats, p, candidates, &sampler, seed, Portion::Train)
        }
        TaskKind::Ranking => build_choice(kind, user, split, stats, 1, candidates, &sampler, seed, Portion::Train),
        TaskKind::Rating => build_rating(user, split, candidates, seed, Portion::Train),
    }
}

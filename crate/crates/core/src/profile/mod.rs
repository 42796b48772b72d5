//! Profile generation: the three-stage task-aligned generator, the baseline
//! generators, and the newline-delimited profile store.

mod baselines;
mod counterfactual;
mod stages;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, UserId};
use crate::llm::{GatewayError, ModelParams, PromptExecutor, RoleProfile, DEFAULT_PARSE_ATTEMPTS};
use crate::tasks::{TaskError, TaskKind};

pub use baselines::{baseline_agent4rec_style, baseline_recagent_style, baseline_recent_interaction, empty_profile, RECAGENT_ROLES};
pub use counterfactual::{counterfactual_map, change_predicate, CounterfactualOptions, CounterfactualOutcome};
pub use stages::{
    build_context, consolidate, extract_raw_attributes, generate_profile, instantiate_decision_path, perturb_trait,
    render_history, shares_content_word, PerturbMode,
};
pub use store::{ProfileStore, StoreHeader, STORE_FORMAT_VERSION};

/// Attribute keys that must never appear in a profile.
pub const BANNED_ATTRIBUTE_KEYS: [&str; 4] = ["gender", "age", "location", "occupation"];

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("insufficient history for user {0}")]
    InsufficientHistory(UserId),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: u8, message: String },
    #[error("{generator} baseline failed: {message}")]
    Baseline { generator: GeneratorKind, message: String },
    #[error("perturbation failed: {0}")]
    Perturbation(String),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("profile store: {0}")]
    Store(String),
    #[error("profile store i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ProfileError {
    pub(crate) fn stage(stage: u8, message: impl fmt::Display) -> Self {
        ProfileError::Stage { stage, message: message.to_string() }
    }

    /// True when the underlying failure was the LLM backend rather than the data.
    pub fn is_backend(&self) -> bool {
        match self {
            ProfileError::Stage { message, .. } | ProfileError::Baseline { message, .. } => {
                message.starts_with("backend") || message.starts_with("replay cache miss")
            }
            _ => false,
        }
    }
}

impl From<DatasetError> for ProfileError {
    fn from(e: DatasetError) -> Self {
        ProfileError::Stage { stage: 1, message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitSource {
    Extracted,
    Consolidated,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitStatus {
    Active,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitDescriptor {
    pub text: String,
    pub source: TraitSource,
    pub status: TraitStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl TraitDescriptor {
    pub fn new(text: impl Into<String>, source: TraitSource) -> Self {
        TraitDescriptor { text: text.into(), source, status: TraitStatus::Active, rationale: None }
    }
}

/// Case-folded exact-string dedup, first spelling wins.
pub fn dedup_traits(traits: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    traits
        .into_iter()
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty() && seen.insert(t.to_lowercase()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAttributePool {
    pub pools: Vec<Vec<String>>,
    pub union: Vec<String>,
}

impl RawAttributePool {
    pub fn from_pools(pools: Vec<Vec<String>>) -> Self {
        let union = dedup_traits(pools.iter().flatten().cloned());
        RawAttributePool { pools, union }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub dataset_info: String,
    pub task_desc: String,
    pub exemplar: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathOrigin {
    HeuristicTemplate,
    LlmGenerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    #[default]
    Heuristic,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionStep {
    pub id: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionPath {
    pub task_family: TaskKind,
    pub steps: Vec<DecisionStep>,
    pub origin: PathOrigin,
}

pub const MAX_PATH_STEPS: usize = 6;

impl DecisionPath {
    /// Built-in templates.
    pub fn heuristic(family: TaskKind) -> Self {
        let steps: &[(&str, &str)] = match family {
            TaskKind::Discrimination => &[
                ("hard-filter", "Discard candidates that clash with firm dislikes or requirements."),
                ("preference-match", "Compare the remaining candidates against stated tastes."),
                ("final-select", "Choose the requested number of items."),
            ],
            TaskKind::Ranking => &[
                ("hard-filter", "Push candidates that clash with firm dislikes to the bottom."),
                ("pairwise-trade-off", "Weigh competing candidates against each other on the user's tastes."),
                ("order", "Produce the final order from most to least preferred."),
            ],
            TaskKind::Rating => &[
                ("anchor-baseline", "Start from the user's usual score for items like this one."),
                ("trait-adjustment", "Move the score up or down for matching or clashing tastes."),
                ("final-rating", "Settle on a score within the scale."),
            ],
        };
        DecisionPath {
            task_family: family,
            steps: steps
                .iter()
                .map(|(name, desc)| DecisionStep { id: name.to_string(), name: name.to_string(), description: desc.to_string() })
                .collect(),
            origin: PathOrigin::HeuristicTemplate,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps.is_empty() || self.steps.len() > MAX_PATH_STEPS {
            return Err(format!("a decision path has 1 to {MAX_PATH_STEPS} steps, got {}", self.steps.len()));
        }
        let ids: HashSet<&str> = self.steps.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != self.steps.len() {
            return Err("decision step ids must be unique".into());
        }
        Ok(())
    }

    pub fn has_step(&self, id: &str) -> bool {
        self.steps.iter().any(|s| s.id == id)
    }
}

/// One original-versus-counterfactual agent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualTrial {
    pub instance_id: String,
    pub step_id: String,
    pub perturbed_text: String,
    pub changed: bool,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBinding {
    #[serde(rename = "trait")]
    pub descriptor: TraitDescriptor,
    pub step_ids: BTreeSet<String>,
    /// Trials whose change predicate fired.
    pub evidence: Vec<CounterfactualTrial>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    TaskAligned,
    SemanticMerge,
    RecentInteraction,
    RecagentStyle,
    Agent4recStyle,
    Empty,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 6] = [
        GeneratorKind::TaskAligned,
        GeneratorKind::SemanticMerge,
        GeneratorKind::RecentInteraction,
        GeneratorKind::RecagentStyle,
        GeneratorKind::Agent4recStyle,
        GeneratorKind::Empty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::TaskAligned => "task_aligned",
            GeneratorKind::SemanticMerge => "semantic_merge",
            GeneratorKind::RecentInteraction => "recent_interaction",
            GeneratorKind::RecagentStyle => "recagent_style",
            GeneratorKind::Agent4recStyle => "agent4rec_style",
            GeneratorKind::Empty => "empty",
        }
    }

    /// Generators that produce a separate profile per task family.
    pub fn is_task_specific(self) -> bool {
        matches!(self, GeneratorKind::TaskAligned | GeneratorKind::SemanticMerge)
    }

    pub fn uses_llm(self) -> bool {
        !matches!(self, GeneratorKind::RecentInteraction | GeneratorKind::Empty)
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GeneratorKind::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown generator {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecentItem {
    pub item_id: String,
    pub title: String,
    pub genres: Vec<String>,
    pub rating: f64,
}

/// Generator-specific payload rendered alongside the traits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileDetails {
    #[default]
    None,
    RecentItems { items: Vec<RecentItem> },
    Roles(RoleProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ProfileMeta {
    pub user_id: UserId,
    /// Optional non-demographic tags.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAlignedProfile {
    pub meta: ProfileMeta,
    /// Task family the profile is aligned to; `None` for task-agnostic baselines.
    pub task_family: Option<TaskKind>,
    pub generator: GeneratorKind,
    pub traits: Vec<TraitDescriptor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub background_traits: Vec<TraitDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_path: Option<DecisionPath>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub policies: Vec<PolicyBinding>,
    #[serde(default)]
    pub details: ProfileDetails,
    pub provenance: Provenance,
}

impl TaskAlignedProfile {
    pub fn new(user_id: &str, generator: GeneratorKind, task_family: Option<TaskKind>) -> Self {
        TaskAlignedProfile {
            meta: ProfileMeta { user_id: user_id.to_string(), tags: BTreeMap::new() },
            task_family,
            generator,
            traits: Vec::new(),
            background_traits: Vec::new(),
            decision_path: None,
            policies: Vec::new(),
            details: ProfileDetails::None,
            provenance: Provenance::default(),
        }
    }

    pub fn user_id(&self) -> &str {
        &self.meta.user_id
    }

    pub fn add_tag(&mut self, key: &str, value: &str) -> Result<(), ProfileError> {
        if is_demographic_key(key) {
            return Err(ProfileError::Invalid(format!("demographic key {key:?} is not allowed")));
        }
        self.meta.tags.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if let Some(key) = self.meta.tags.keys().find(|k| is_demographic_key(k)) {
            return Err(ProfileError::Invalid(format!("demographic key {key:?} is not allowed")));
        }
        if self.traits.iter().chain(&self.background_traits).any(|t| t.text.trim().is_empty()) {
            return Err(ProfileError::Invalid("empty trait text".into()));
        }
        let active: HashSet<String> = self.traits.iter().map(|t| t.text.to_lowercase()).collect();
        if active.len() != self.traits.len() {
            return Err(ProfileError::Invalid("duplicate active traits".into()));
        }
        for binding in &self.policies {
            if !active.contains(&binding.descriptor.text.to_lowercase()) {
                return Err(ProfileError::Invalid(format!("policy for inactive trait {:?}", binding.descriptor.text)));
            }
            if binding.step_ids.is_empty() || binding.evidence.is_empty() {
                return Err(ProfileError::Invalid("policy binding without steps or evidence".into()));
            }
            let path = self.decision_path.as_ref().ok_or_else(|| ProfileError::Invalid("policies without a path".into()))?;
            if let Some(step) = binding.step_ids.iter().find(|s| !path.has_step(s)) {
                return Err(ProfileError::Invalid(format!("policy references unknown step {step:?}")));
            }
        }
        Ok(())
    }
}

fn is_demographic_key(key: &str) -> bool {
    let k = key.trim().to_lowercase();
    BANNED_ATTRIBUTE_KEYS.iter().any(|b| k == *b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Diversify {
    /// Same prompt, distinct request seeds.
    #[default]
    Seed,
    /// Distinct prompt framings as well as distinct seeds.
    Paraphrase,
}

/// Knobs of the task-aligned generator and the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub history_window: usize,
    pub n_init: usize,
    pub diversify: Diversify,
    pub delta: f64,
    pub path_mode: PathMode,
    pub perturbation: PerturbMode,
    pub probes_per_step: usize,
    pub probe_candidates: usize,
    pub skip_stage3: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            history_window: 15,
            n_init: 3,
            diversify: Diversify::Seed,
            delta: 0.5,
            path_mode: PathMode::Heuristic,
            perturbation: PerturbMode::Negate,
            probes_per_step: 1,
            probe_candidates: 10,
            skip_stage3: false,
        }
    }
}

/// Shared LLM plumbing for a generation run.
#[derive(Clone, Copy)]
pub struct PipelineContext<'a> {
    pub executor: &'a dyn PromptExecutor,
    pub model: &'a ModelParams,
    pub parse_attempts: usize,
}

impl<'a> PipelineContext<'a> {
    pub fn new(executor: &'a dyn PromptExecutor, model: &'a ModelParams) -> Self {
        PipelineContext { executor, model, parse_attempts: DEFAULT_PARSE_ATTEMPTS }
    }
}

pub(crate) fn gateway_message(e: &GatewayError) -> String {
    match e {
        GatewayError::Backend { .. } => format!("backend: {e}"),
        other => other.to_string(),
    }
}

pub(crate) fn task_message(e: &TaskError) -> String {
    match e {
        TaskError::Gateway(g) => gateway_message(g),
        other => other.to_string(),
    }
}

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::counterfactual::{counterfactual_map, CounterfactualOptions};
use super::{
    dedup_traits, gateway_message, DecisionPath, DecisionStep, Diversify, GenerationContext, GeneratorConfig,
    GeneratorKind, PathMode, PathOrigin, PipelineContext, ProfileError, RawAttributePool, TaskAlignedProfile,
    TraitDescriptor, TraitSource, MAX_PATH_STEPS,
};
use crate::dataset::{recent_window, Interaction, Item, ItemId, ItemStats, SplitDataset};
use crate::llm::{execute_structured, execute_structured_with, ResponseSchema, StructuredValue};
use crate::metrics::RatingScale;
use crate::prompts::template;
use crate::seed::SeedTree;
use crate::tasks::{build_probe_instance, BuildOutcome, LlmAgent, PopularityRendering, RenderContext, TaskKind};

const FRAMINGS: [&str; 3] = [
    "Study the history below and work out what drives this user's choices.",
    "Read the history below as a record of habits and explain the habits it reveals.",
    "Look at the history below and describe the tastes that would produce it.",
];

const CATEGORY_SAMPLE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    #[default]
    Negate,
    Weaken,
}

fn fmt_rating(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn item_phrase(item: Option<&Item>, id: &str) -> String {
    match item {
        Some(i) if !i.genres.is_empty() => format!("{} [{}]", i.title, i.genres.join(", ")),
        Some(i) => i.title.clone(),
        None => format!("unknown:{id}"),
    }
}

/// One line per interaction: title, categories, rating and a review excerpt.
pub fn render_history(window: &[Interaction], items: &BTreeMap<ItemId, Item>, scale: RatingScale) -> String {
    let mut out = String::new();
    for event in window {
        write!(out, "- {} rated {} of {}", item_phrase(items.get(&event.item_id), &event.item_id), fmt_rating(event.rating), fmt_rating(scale.max))
            .unwrap();
        if let Some(review) = event.review_text.as_deref().map(str::trim).filter(|r| !r.is_empty()) {
            let excerpt: String = review.chars().take(200).collect();
            write!(out, ", review: \"{excerpt}\"").unwrap();
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

/// Stage 1: `n` independent trait-list generations and their union.
#[allow(clippy::too_many_arguments)]
pub fn extract_raw_attributes(
    user: &str,
    window: &[Interaction],
    split: &SplitDataset,
    domain: &str,
    n: usize,
    diversify: Diversify,
    pc: &PipelineContext<'_>,
    seed: SeedTree,
) -> Result<RawAttributePool, ProfileError> {
    if window.is_empty() {
        return Err(ProfileError::InsufficientHistory(user.to_string()));
    }
    if n == 0 {
        return Err(ProfileError::stage(1, "at least one generation is required"));
    }
    let t = template("stage1_extract");
    let history = render_history(window, &split.items, split.rating_scale);
    let (min, max) = (fmt_rating(split.rating_scale.min), fmt_rating(split.rating_scale.max));
    let mut pools = Vec::with_capacity(n);
    for j in 0..n {
        let framing = match diversify {
            Diversify::Seed => FRAMINGS[0],
            Diversify::Paraphrase => FRAMINGS[j % FRAMINGS.len()],
        };
        let vars = [
            ("domain", domain),
            ("framing", framing),
            ("dataset_name", split.name.as_str()),
            ("scale_min", min.as_str()),
            ("scale_max", max.as_str()),
            ("history", history.as_str()),
        ];
        let request = pc.model.request(
            "stage1-extract",
            t.render_system(&vars),
            t.render_user(&vars),
            seed.child_index("generation", j as u64).value(),
        );
        let out = execute_structured(pc.executor, &request, &ResponseSchema::TraitList { max_items: None }, pc.parse_attempts)
            .map_err(|e| ProfileError::stage(1, format!("generation {j} failed: {}", gateway_message(&e))))?;
        let StructuredValue::Traits(traits) = out.value else { unreachable!("trait schema") };
        pools.push(traits);
    }
    Ok(RawAttributePool::from_pools(pools))
}

fn category_vocabulary(split: &SplitDataset) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for item in split.items.values() {
        for g in &item.genres {
            *counts.entry(g.as_str()).or_default() += 1;
        }
    }
    let mut labels: Vec<(&str, usize)> = counts.into_iter().collect();
    labels.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    labels.into_iter().take(CATEGORY_SAMPLE).map(|(l, _)| l.to_string()).collect()
}

fn task_description(family: TaskKind, scale: RatingScale) -> String {
    match family {
        TaskKind::Discrimination => "Discrimination: the user sees a pool of candidate items, a few of which they actually \
            interacted with, and must pick exactly those. The profile must separate items this user would choose from \
            plausible distractors."
            .to_string(),
        TaskKind::Ranking => "Ranking: the user sees a pool of candidate items, one of which they actually chose, and must \
            order the whole pool by preference. The profile must support fine-grained comparisons between items."
            .to_string(),
        TaskKind::Rating => format!(
            "Rating: the user sees items they consumed and must score each from {} to {} as they would. The profile must \
             capture how generous or harsh this user is and which item properties move their scores.",
            fmt_rating(scale.min),
            fmt_rating(scale.max)
        ),
    }
}

/// The ⟨dataset info, task description, exemplar⟩ context for Stage 2.
pub fn build_context(split: &SplitDataset, family: TaskKind, user: &str, domain: &str, seed: SeedTree) -> GenerationContext {
    let mut extra_keys: Vec<&str> = split.items.values().flat_map(|i| i.extra.keys().map(String::as_str)).collect();
    extra_keys.sort_unstable();
    extra_keys.dedup();
    let mut fields = vec!["item_id", "title", "genres"];
    fields.extend(extra_keys);
    let mut dataset_info = format!(
        "Dataset {}: {} {domain} items with the fields {}. Interactions record a rating from {} to {} and a timestamp.",
        split.name,
        split.items.len(),
        fields.join(", "),
        fmt_rating(split.rating_scale.min),
        fmt_rating(split.rating_scale.max),
    );
    let vocabulary = category_vocabulary(split);
    if !vocabulary.is_empty() {
        write!(dataset_info, "\nCategory labels: {}.", vocabulary.join(", ")).unwrap();
    }

    let train = split.train(user);
    let exemplar = if train.is_empty() {
        "No example is available for this user.".to_string()
    } else {
        use rand::Rng;
        let pick = &train[seed.child("exemplar").rng().random_range(0..train.len())];
        let phrase = item_phrase(split.items.get(&pick.item_id), &pick.item_id);
        let id = &pick.item_id;
        match family {
            TaskKind::Discrimination => {
                format!("Input: a candidate pool that includes [{id}] {phrase}.\nExpected output: a list containing \"{id}\", an item this user chose.")
            }
            TaskKind::Ranking => {
                format!("Input: a candidate pool that includes [{id}] {phrase}.\nExpected output: a full ranking with \"{id}\" placed first.")
            }
            TaskKind::Rating => format!(
                "Input: [{id}] {phrase}.\nExpected output: {{\"{id}\": {}}}",
                fmt_rating(pick.rating)
            ),
        }
    };
    GenerationContext { dataset_info, task_desc: task_description(family, split.rating_scale), exemplar }
}

/// Stage 2: context-conditioned consolidation with the compactness bound.
pub fn consolidate(
    pool: &RawAttributePool,
    context: &GenerationContext,
    domain: &str,
    pc: &PipelineContext<'_>,
    seed: SeedTree,
) -> Result<Vec<TraitDescriptor>, ProfileError> {
    if pool.union.is_empty() {
        return Err(ProfileError::stage(2, "empty attribute pool"));
    }
    let t = template("stage2_consolidate");
    let listing: String = pool.union.iter().map(|a| format!("- {a}\n")).collect();
    let size = pool.union.len().to_string();
    let vars = [
        ("domain", domain),
        ("dataset_info", context.dataset_info.as_str()),
        ("task_desc", context.task_desc.as_str()),
        ("exemplar", context.exemplar.as_str()),
        ("pool_size", size.as_str()),
        ("pool", listing.trim_end()),
    ];
    let request = pc.model.request("stage2-consolidate", t.render_system(&vars), t.render_user(&vars), seed.value());
    let schema = ResponseSchema::TraitList { max_items: Some(pool.union.len()) };
    let out = execute_structured(pc.executor, &request, &schema, pc.parse_attempts)
        .map_err(|e| ProfileError::stage(2, gateway_message(&e)))?;
    for note in &out.notes {
        log::info!("stage 2: {note}");
    }
    let StructuredValue::Traits(traits) = out.value else { unreachable!("trait schema") };
    let traits = dedup_traits(traits);
    let vocabulary: HashSet<String> = context.dataset_info.to_lowercase().split(|c: char| !c.is_alphanumeric()).map(String::from).collect();
    let grounded = traits.iter().filter(|t| content_words(t).iter().any(|w| vocabulary.contains(w))).count();
    log::debug!("stage 2: {grounded}/{} traits reuse dataset vocabulary", traits.len());
    Ok(traits.into_iter().map(|t| TraitDescriptor::new(t, TraitSource::Consolidated)).collect())
}

fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.trim().to_lowercase().chars() {
        if c.is_alphanumeric() {
            s.push(c);
        } else if !s.ends_with('-') {
            s.push('-');
        }
    }
    s.trim_matches('-').to_string()
}

/// Stage 3a: the decision path. LLM mode falls back to the template (with a
/// note) when the model cannot produce a valid path.
pub fn instantiate_decision_path(
    family: TaskKind,
    mode: PathMode,
    context: &GenerationContext,
    pc: &PipelineContext<'_>,
    seed: SeedTree,
) -> (DecisionPath, Option<String>) {
    if mode == PathMode::Heuristic {
        return (DecisionPath::heuristic(family), None);
    }
    let t = template("stage3_path");
    let max = MAX_PATH_STEPS.to_string();
    let vars = [
        ("task_desc", context.task_desc.as_str()),
        ("exemplar", context.exemplar.as_str()),
        ("min_steps", "2"),
        ("max_steps", max.as_str()),
    ];
    let request = pc.model.request("stage3-path", t.render_system(&vars), t.render_user(&vars), seed.value());
    let schema = ResponseSchema::DecisionPath { min_steps: 2, max_steps: MAX_PATH_STEPS };
    match execute_structured(pc.executor, &request, &schema, pc.parse_attempts) {
        Ok(out) => {
            let StructuredValue::DecisionPath(specs) = out.value else { unreachable!("path schema") };
            let mut used = HashSet::new();
            let steps = specs
                .into_iter()
                .enumerate()
                .map(|(j, s)| {
                    let mut id = slug(&s.name);
                    if id.is_empty() || !used.insert(id.clone()) {
                        id = format!("step-{}", j + 1);
                        used.insert(id.clone());
                    }
                    DecisionStep { id, name: s.name, description: s.description }
                })
                .collect();
            (DecisionPath { task_family: family, steps, origin: PathOrigin::LlmGenerated }, None)
        }
        Err(e) => {
            let note = format!("decision path fell back to the template: {e}");
            log::warn!("{note}");
            (DecisionPath::heuristic(family), Some(note))
        }
    }
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "are", "but", "not", "this", "that", "very", "more", "less", "they", "their", "them",
    "than", "has", "have", "from", "into", "about", "user", "who", "its", "any", "all", "only", "over", "does", "doesn",
];

fn content_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3 && !STOPWORDS.contains(w))
        .map(String::from)
        .collect()
}

/// True when the two texts share at least one content word.
pub fn shares_content_word(a: &str, b: &str) -> bool {
    let left: HashSet<String> = content_words(a).into_iter().collect();
    content_words(b).iter().any(|w| left.contains(w))
}

/// Stage 3b: a minimal negation or weakening of one trait.
pub fn perturb_trait(
    descriptor: &TraitDescriptor,
    mode: PerturbMode,
    pc: &PipelineContext<'_>,
    seed: SeedTree,
) -> Result<TraitDescriptor, ProfileError> {
    let t = template("stage3_perturb");
    let instruction = match mode {
        PerturbMode::Negate => "Rewrite the statement so that it says the opposite.",
        PerturbMode::Weaken => "Rewrite the statement so that the preference is clearly weaker but still present.",
    };
    let vars = [("trait", descriptor.text.as_str()), ("instruction", instruction)];
    let request = pc.model.request("stage3-perturb", t.render_system(&vars), t.render_user(&vars), seed.value());
    let original = descriptor.text.trim().to_lowercase();
    let check = |value: &StructuredValue| -> Result<(), String> {
        let StructuredValue::Traits(list) = value else { return Err("expected one statement".into()) };
        let text = list[0].trim();
        if text.to_lowercase() == original {
            return Err("the rewritten statement is identical to the original".into());
        }
        if !shares_content_word(&descriptor.text, text) {
            return Err("the rewritten statement must keep the original subject words".into());
        }
        Ok(())
    };
    let out = execute_structured_with(pc.executor, &request, &ResponseSchema::TraitList { max_items: Some(1) }, pc.parse_attempts, check)
        .map_err(|e| ProfileError::Perturbation(format!("{:?}: {}", descriptor.text, gateway_message(&e))))?;
    let StructuredValue::Traits(mut list) = out.value else { unreachable!("trait schema") };
    Ok(TraitDescriptor { text: list.remove(0), ..descriptor.clone() })
}

/// Full three-stage generation for one user and task family.
#[allow(clippy::too_many_arguments)]
pub fn generate_profile(
    user: &str,
    split: &SplitDataset,
    stats: &ItemStats,
    config: &GeneratorConfig,
    family: TaskKind,
    domain: &str,
    pc: &PipelineContext<'_>,
    seed: SeedTree,
    config_digest: &str,
) -> Result<TaskAlignedProfile, ProfileError> {
    let train = split.train(user);
    let window = recent_window(train, config.history_window).map_err(|e| match e {
        crate::dataset::DatasetError::InsufficientHistory => ProfileError::InsufficientHistory(user.to_string()),
        other => ProfileError::stage(1, other),
    })?;
    let seeds = [
        ("stage1", seed.child("stage1")),
        ("context", seed.child("context")),
        ("stage2", seed.child("stage2")),
        ("path", seed.child("path")),
        ("probes", seed.child("probes")),
        ("perturb", seed.child("perturb")),
    ];
    let s = |name: &str| seeds.iter().find(|(n, _)| *n == name).map(|(_, v)| *v).expect("known seed label");

    let pool = extract_raw_attributes(user, window, split, domain, config.n_init, config.diversify, pc, s("stage1"))?;
    let context = build_context(split, family, user, domain, s("context"));
    let traits = consolidate(&pool, &context, domain, pc, s("stage2"))?;

    let mut profile = TaskAlignedProfile::new(user, GeneratorKind::SemanticMerge, Some(family));
    profile.traits = traits;
    profile.provenance.config_digest = config_digest.to_string();
    profile.provenance.seeds.insert("profile".into(), seed.value());
    for (name, value) in &seeds {
        profile.provenance.seeds.insert(name.to_string(), value.value());
    }
    if config.skip_stage3 {
        profile.validate()?;
        return Ok(profile);
    }

    let (path, note) = instantiate_decision_path(family, config.path_mode, &context, pc, s("path"));
    profile.provenance.notes.extend(note);
    let wanted = path.steps.len() * config.probes_per_step.max(1);
    let mut probes = Vec::with_capacity(wanted);
    for k in 0..wanted {
        match build_probe_instance(family, user, split, stats, config.probe_candidates, s("probes").child_index("probe", k as u64)) {
            Ok(BuildOutcome::Built(instance)) => probes.push(instance),
            Ok(BuildOutcome::Skip(reason)) => log::debug!("probe {k} for {user} skipped: {reason}"),
            Err(e) => log::debug!("probe {k} for {user} failed: {e}"),
        }
    }
    if probes.is_empty() {
        return Err(ProfileError::stage(3, format!("no probe instance could be built for user {user}")));
    }
    let ctx = RenderContext {
        items: &split.items,
        stats,
        scale: split.rating_scale,
        popularity: PopularityRendering::Count,
        model: pc.model,
        domain,
    };
    let agent = LlmAgent { executor: pc.executor, ctx, repair: true, parse_attempts: pc.parse_attempts };
    profile.decision_path = Some(path.clone());
    let perturb_seed = s("perturb");
    let perturb = |idx: usize, t: &TraitDescriptor| perturb_trait(t, config.perturbation, pc, perturb_seed.child_index("trait", idx as u64));
    let options = CounterfactualOptions { delta: config.delta, probes_per_step: config.probes_per_step.max(1) };
    let outcome = counterfactual_map(&profile, &path, &probes, &agent, &perturb, &options)?;

    profile.generator = GeneratorKind::TaskAligned;
    profile.traits = outcome.active;
    profile.background_traits = outcome.background;
    profile.policies = outcome.bindings;
    profile.provenance.notes.extend(outcome.notes);
    profile.validate()?;
    Ok(profile)
}

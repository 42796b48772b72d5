use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use super::{write_json, Environment, ExperimentError};
use crate::profile::{
    baseline_agent4rec_style, baseline_recagent_style, baseline_recent_interaction, empty_profile, generate_profile,
    GeneratorConfig, GeneratorKind, PipelineContext, ProfileError, ProfileStore, StoreHeader, TaskAlignedProfile,
};
use crate::seed::SeedTree;
use crate::tasks::TaskKind;

type Key = (String, Option<TaskKind>);

/// Profiles of one generator keyed by user and task family.
#[derive(Debug, Clone, Default)]
pub struct ProfileSet {
    pub generator: Option<GeneratorKind>,
    profiles: BTreeMap<Key, TaskAlignedProfile>,
}

impl ProfileSet {
    pub fn from_profiles(generator: GeneratorKind, profiles: Vec<TaskAlignedProfile>) -> Self {
        let profiles = profiles.into_iter().map(|p| ((p.meta.user_id.clone(), p.task_family), p)).collect();
        ProfileSet { generator: Some(generator), profiles }
    }

    /// The family-specific profile, else the task-agnostic one.
    pub fn get(&self, user: &str, family: TaskKind) -> Option<&TaskAlignedProfile> {
        self.profiles
            .get(&(user.to_string(), Some(family)))
            .or_else(|| self.profiles.get(&(user.to_string(), None)))
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationFailure {
    pub user_id: String,
    pub task_family: Option<TaskKind>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub generator: GeneratorKind,
    pub store: String,
    pub planned: usize,
    pub profiles: usize,
    /// Users without enough history.
    pub skipped: usize,
    pub failures: Vec<GenerationFailure>,
}

fn family_label(f: Option<TaskKind>) -> &'static str {
    f.map_or("any", TaskKind::as_str)
}

fn generate_one(
    env: &Environment,
    kind: GeneratorKind,
    pipeline: &GeneratorConfig,
    user: &str,
    family: Option<TaskKind>,
    digest: &str,
) -> Result<TaskAlignedProfile, ProfileError> {
    let pc = PipelineContext { parse_attempts: env.config.backend.parse_attempts, ..PipelineContext::new(&*env.executor, &env.model) };
    let seed = SeedTree::new(env.config.seed)
        .child("profiles")
        .child(kind.as_str())
        .child(&format!("user:{user}"))
        .child(family_label(family));
    let domain = env.config.domain.as_str();
    let (split, window) = (&env.split, pipeline.history_window);
    let mut profile = match kind {
        GeneratorKind::TaskAligned | GeneratorKind::SemanticMerge => {
            let cfg = GeneratorConfig { skip_stage3: pipeline.skip_stage3 || kind == GeneratorKind::SemanticMerge, ..pipeline.clone() };
            let family = family.expect("task-specific generators run per family");
            generate_profile(user, split, &env.stats, &cfg, family, domain, &pc, seed, digest)?
        }
        GeneratorKind::RecentInteraction => baseline_recent_interaction(user, split, window)?,
        GeneratorKind::RecagentStyle => baseline_recagent_style(user, split, window, domain, &pc, seed)?,
        GeneratorKind::Agent4recStyle => baseline_agent4rec_style(user, split, window, domain, &pc, seed)?,
        GeneratorKind::Empty => empty_profile(user),
    };
    profile.provenance.config_digest = digest.to_string();
    Ok(profile)
}

/// Generates (or resumes) the profile store `profiles/<store_name>.ndjson`.
pub(crate) fn generate_store(
    env: &Environment,
    kind: GeneratorKind,
    pipeline: &GeneratorConfig,
    store_name: &str,
) -> Result<(ProfileSet, GenerationSummary), ExperimentError> {
    let digest = env.config.profile_digest(pipeline);
    let path = env.out.join("profiles").join(format!("{store_name}.ndjson"));
    let store_err = |e: ProfileError| ExperimentError::Data(format!("{}: {e}", path.display()));
    let (store, existing) = ProfileStore::open(&path, StoreHeader::new(kind, &digest)).map_err(store_err)?;
    let done: BTreeSet<Key> = existing.iter().map(|p| (p.meta.user_id.clone(), p.task_family)).collect();
    let families: Vec<Option<TaskKind>> = if kind.is_task_specific() {
        env.config.tasks.families.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    let units: Vec<Key> = env.users.iter().flat_map(|u| families.iter().map(move |f| (u.clone(), *f))).collect();
    let todo: Vec<&Key> = units.iter().filter(|k| !done.contains(*k)).collect();
    if !done.is_empty() {
        log::info!("{store_name}: resuming with {} of {} profiles present", done.len(), units.len());
    }

    let outcomes: Vec<(&Key, Result<(), ProfileError>)> = env.pool.install(|| {
        todo.par_iter()
            .map(|key| {
                let result = generate_one(env, kind, pipeline, &key.0, key.1, &digest).and_then(|p| store.append(&[p]));
                (*key, result)
            })
            .collect()
    });
    let profiles = store.finalize().map_err(store_err)?;

    // earlier sessions' failures are retried, so only this session's outcomes count
    let mut skipped = 0;
    let mut failures = Vec::new();
    for (key, result) in outcomes {
        match result {
            Ok(()) => {}
            Err(ProfileError::InsufficientHistory(_)) => skipped += 1,
            Err(e) => {
                log::warn!("{store_name}: user {} ({}) failed: {e}", key.0, family_label(key.1));
                failures.push(GenerationFailure { user_id: key.0.clone(), task_family: key.1, message: e.to_string() });
            }
        }
    }
    let summary = GenerationSummary {
        generator: kind,
        store: format!("{store_name}.ndjson"),
        planned: units.len(),
        profiles: profiles.len(),
        skipped,
        failures,
    };
    write_json(&env.out.join("profiles").join(format!("{store_name}.summary.json")), &summary)?;
    let attempted = units.len() - skipped;
    let failed = summary.failures.len();
    if attempted > 0 && failed as f64 / attempted as f64 > env.config.failure_ceiling {
        return Err(ExperimentError::Backend(format!(
            "{store_name}: {failed} of {attempted} profiles failed, above the {:.0}% ceiling; rerun to resume",
            env.config.failure_ceiling * 100.0
        )));
    }
    Ok((ProfileSet::from_profiles(kind, profiles), summary))
}

/// One store per configured generator.
pub fn cmd_generate_profiles(env: &Environment) -> Result<Vec<GenerationSummary>, ExperimentError> {
    let pipeline = env.config.generator.pipeline.clone();
    env.config
        .generator
        .kinds
        .iter()
        .map(|&kind| generate_store(env, kind, &pipeline, kind.as_str()).map(|(_, s)| s))
        .collect()
}

/// Loads or generates the store for every configured generator.
pub(crate) fn load_profiles(env: &Environment) -> Result<Vec<ProfileSet>, ExperimentError> {
    let pipeline = env.config.generator.pipeline.clone();
    env.config.generator.kinds.iter().map(|&kind| generate_store(env, kind, &pipeline, kind.as_str()).map(|(p, _)| p)).collect()
}

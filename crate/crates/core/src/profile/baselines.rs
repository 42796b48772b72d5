use super::{
    gateway_message, GeneratorKind, PipelineContext, ProfileDetails, ProfileError, RecentItem, TaskAlignedProfile,
    TraitDescriptor, TraitSource,
};
use super::stages::render_history;
use crate::dataset::{recent_window, Interaction, SplitDataset};
use crate::llm::{execute_structured, ResponseSchema, StructuredValue};
use crate::prompts::template;
use crate::seed::SeedTree;

pub const RECAGENT_ROLES: [&str; 5] = ["watcher", "explorer", "critic", "chatter", "poster"];

fn window<'a>(user: &str, split: &'a SplitDataset, k: usize) -> Result<&'a [Interaction], ProfileError> {
    recent_window(split.train(user), k).map_err(|_| ProfileError::InsufficientHistory(user.to_string()))
}

/// The last `k` train interactions, passed to the agent verbatim.
pub fn baseline_recent_interaction(user: &str, split: &SplitDataset, k: usize) -> Result<TaskAlignedProfile, ProfileError> {
    let events = window(user, split, k)?;
    let items = events
        .iter()
        .map(|e| {
            let item = split.items.get(&e.item_id);
            RecentItem {
                item_id: e.item_id.clone(),
                title: item.map(|i| i.title.clone()).unwrap_or_else(|| format!("unknown:{}", e.item_id)),
                genres: item.map(|i| i.genres.clone()).unwrap_or_default(),
                rating: e.rating,
            }
        })
        .collect();
    let mut profile = TaskAlignedProfile::new(user, GeneratorKind::RecentInteraction, None);
    profile.details = ProfileDetails::RecentItems { items };
    Ok(profile)
}

fn baseline_error(generator: GeneratorKind, e: &crate::llm::GatewayError) -> ProfileError {
    ProfileError::Baseline { generator, message: gateway_message(e) }
}

/// Personality, interests, behaviour and one of five platform roles.
pub fn baseline_recagent_style(
    user: &str,
    split: &SplitDataset,
    k: usize,
    domain: &str,
    pc: &PipelineContext<'_>,
    seed: SeedTree,
) -> Result<TaskAlignedProfile, ProfileError> {
    let history = render_history(window(user, split, k)?, &split.items, split.rating_scale);
    let roles = RECAGENT_ROLES.join(", ");
    let t = template("baseline_recagent");
    let vars = [("domain", domain), ("history", history.as_str()), ("roles", roles.as_str())];
    let request = pc.model.request("baseline-recagent", t.render_system(&vars), t.render_user(&vars), seed.value());
    let schema = ResponseSchema::RoleProfile { roles: RECAGENT_ROLES.iter().map(|r| r.to_string()).collect() };
    let out = execute_structured(pc.executor, &request, &schema, pc.parse_attempts)
        .map_err(|e| baseline_error(GeneratorKind::RecagentStyle, &e))?;
    let StructuredValue::RoleProfile(roles) = out.value else { unreachable!("role schema") };
    let mut profile = TaskAlignedProfile::new(user, GeneratorKind::RecagentStyle, None);
    profile.details = ProfileDetails::Roles(roles);
    profile.provenance.seeds.insert("profile".into(), seed.value());
    Ok(profile)
}

/// Taste and rationale pairs.
pub fn baseline_agent4rec_style(
    user: &str,
    split: &SplitDataset,
    k: usize,
    domain: &str,
    pc: &PipelineContext<'_>,
    seed: SeedTree,
) -> Result<TaskAlignedProfile, ProfileError> {
    let history = render_history(window(user, split, k)?, &split.items, split.rating_scale);
    let t = template("baseline_agent4rec");
    let vars = [("domain", domain), ("history", history.as_str())];
    let request = pc.model.request("baseline-agent4rec", t.render_system(&vars), t.render_user(&vars), seed.value());
    let out = execute_structured(pc.executor, &request, &ResponseSchema::TastePairs, pc.parse_attempts)
        .map_err(|e| baseline_error(GeneratorKind::Agent4recStyle, &e))?;
    let StructuredValue::TastePairs(pairs) = out.value else { unreachable!("taste schema") };
    let mut profile = TaskAlignedProfile::new(user, GeneratorKind::Agent4recStyle, None);
    let mut seen = std::collections::HashSet::new();
    for (taste, rationale) in pairs {
        if seen.insert(taste.to_lowercase()) {
            let mut d = TraitDescriptor::new(taste, TraitSource::Baseline);
            d.rationale = Some(rationale);
            profile.traits.push(d);
        }
    }
    profile.provenance.seeds.insert("profile".into(), seed.value());
    Ok(profile)
}

pub fn empty_profile(user: &str) -> TaskAlignedProfile {
    TaskAlignedProfile::new(user, GeneratorKind::Empty, None)
}

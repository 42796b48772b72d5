use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Attribute, TaskInstance, TaskKind};
use crate::dataset::{Item, ItemId, ItemStats};
use crate::llm::{ModelParams, PromptRequest};
use crate::metrics::RatingScale;
use crate::profile::{ProfileDetails, TaskAlignedProfile, TraitStatus};
use crate::prompts::template;
use crate::seed::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PopularityRendering {
    /// Raw train interaction count.
    #[default]
    Count,
    /// Popularity quantile in [0, 1].
    Quantile,
}

/// Everything besides the profile and the instance that shapes an agent prompt.
#[derive(Clone, Copy)]
pub struct RenderContext<'a> {
    pub items: &'a BTreeMap<ItemId, Item>,
    pub stats: &'a ItemStats,
    pub scale: RatingScale,
    pub popularity: PopularityRendering,
    pub model: &'a ModelParams,
    /// Noun for the catalogue, e.g. `movie`.
    pub domain: &'a str,
}

fn fmt_scale(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// The profile section of the agent's system message. Empty for the empty
/// profile.
pub fn render_profile(profile: &TaskAlignedProfile) -> String {
    let mut out = String::new();
    let mut active: Vec<_> = profile.traits.iter().filter(|t| t.status == TraitStatus::Active).collect();
    active.sort_by(|a, b| a.text.cmp(&b.text));
    if !active.is_empty() {
        out.push_str("\nAbout you:\n");
        for t in active {
            match &t.rationale {
                Some(r) => writeln!(out, "- {} (because {})", t.text, r).unwrap(),
                None => writeln!(out, "- {}", t.text).unwrap(),
            }
        }
    }
    let mut background: Vec<_> = profile.background_traits.iter().map(|t| t.text.as_str()).collect();
    background.sort_unstable();
    if !background.is_empty() {
        out.push_str("\nWeaker tendencies that rarely decide your choices:\n");
        for t in background {
            writeln!(out, "- {t}").unwrap();
        }
    }
    if let Some(path) = &profile.decision_path {
        out.push_str("\nHow you decide, step by step:\n");
        for (idx, step) in path.steps.iter().enumerate() {
            writeln!(out, "{}. {}: {}", idx + 1, step.name, step.description).unwrap();
            let mut bound: Vec<&str> = profile
                .policies
                .iter()
                .filter(|p| p.step_ids.contains(&step.id))
                .map(|p| p.descriptor.text.as_str())
                .collect();
            bound.sort_unstable();
            if !bound.is_empty() {
                writeln!(out, "   At this step, rely on: {}", bound.join("; ")).unwrap();
            }
        }
    }
    match &profile.details {
        ProfileDetails::None => {}
        ProfileDetails::RecentItems { items } => {
            out.push_str("\nItems you interacted with recently, oldest first:\n");
            for item in items {
                let genres = if item.genres.is_empty() { String::new() } else { format!(" [{}]", item.genres.join(", ")) };
                writeln!(out, "- {}{}, you gave it {}", item.title, genres, fmt_scale(item.rating)).unwrap();
            }
        }
        ProfileDetails::Roles(r) => {
            writeln!(out, "\nPersonality - {}", r.personality).unwrap();
            writeln!(out, "Interests - {}", r.interests).unwrap();
            writeln!(out, "Behaviour - {}", r.behaviour).unwrap();
            writeln!(out, "Your role on the platform - {}", r.role).unwrap();
        }
    }
    out.trim_end().to_string()
}

fn candidate_line(id: &str, instance: &TaskInstance, ctx: &RenderContext<'_>) -> String {
    let item = ctx.items.get(id);
    let mut fields = Vec::new();
    for attr in &instance.attribute_mask.0 {
        let value = match attr {
            Attribute::Title => item.map(|i| i.title.clone()).unwrap_or_else(|| format!("unknown:{id}")),
            Attribute::Genre => {
                let genres = item.map(|i| i.genres.join(", ")).unwrap_or_default();
                if genres.is_empty() { "none listed".to_string() } else { genres }
            }
            Attribute::Rating => {
                if ctx.stats.cold_items.contains(id) || !ctx.stats.mean_rating.contains_key(id) {
                    "no ratings yet".to_string()
                } else {
                    format!("{:.2} average", ctx.stats.mean_rating_of(id))
                }
            }
            Attribute::Popularity => match ctx.popularity {
                PopularityRendering::Count => format!("{} interactions", ctx.stats.popularity_of(id)),
                PopularityRendering::Quantile => format!("{:.2} quantile", ctx.stats.quantile_of(id)),
            },
        };
        fields.push(format!("{} {}", attr.label(), value));
    }
    if fields.is_empty() {
        format!("- [{id}]")
    } else {
        format!("- [{id}] {}", fields.join(" | "))
    }
}

/// Builds the agent prompt for one instance. Identical inputs give a
/// byte-identical request.
pub fn render_agent_prompt(profile: &TaskAlignedProfile, instance: &TaskInstance, ctx: &RenderContext<'_>) -> PromptRequest {
    let presented = instance.presented();
    let profile_text = render_profile(profile);
    let system = template("agent_system").render_system(&[("domain", ctx.domain), ("profile", &profile_text)]);
    let candidates: Vec<String> = presented.iter().map(|id| candidate_line(id, instance, ctx)).collect();
    let candidates = candidates.join("\n");
    let count = presented.len().to_string();
    let positives = instance.positives.len().to_string();
    let example_id = presented.first().cloned().unwrap_or_default();
    let (scale_min, scale_max) = (fmt_scale(ctx.scale.min), fmt_scale(ctx.scale.max));
    let vars = [
        ("count", count.as_str()),
        ("positives", positives.as_str()),
        ("candidates", candidates.as_str()),
        ("example_id", example_id.as_str()),
        ("scale_min", scale_min.as_str()),
        ("scale_max", scale_max.as_str()),
    ];
    let (name, tag) = match instance.kind {
        TaskKind::Discrimination => ("agent_discrimination", "agent-discrimination"),
        TaskKind::Ranking => ("agent_ranking", "agent-ranking"),
        TaskKind::Rating => ("agent_rating", "agent-rating"),
    };
    let user = template(name).render_user(&vars);
    let seed = SeedTree::new(instance.instance_seed).child("request").value();
    ctx.model.request(tag, system.trim_end().to_string(), user, seed)
}

//! Versioned prompt templates shipped with the crate.
//!
//! Each asset starts with a `version: N` line followed by `[system]` and/or
//! `[user]` sections. Placeholders are `{name}`; braces that do not enclose a
//! known placeholder are kept verbatim, so JSON examples need no escaping.

use std::collections::BTreeMap;
use std::sync::OnceLock;

const ASSETS: &[(&str, &str)] = &[
    ("stage1_extract", include_str!("../prompts/stage1_extract.txt")),
    ("stage2_consolidate", include_str!("../prompts/stage2_consolidate.txt")),
    ("stage3_path", include_str!("../prompts/stage3_path.txt")),
    ("stage3_perturb", include_str!("../prompts/stage3_perturb.txt")),
    ("baseline_recagent", include_str!("../prompts/baseline_recagent.txt")),
    ("baseline_agent4rec", include_str!("../prompts/baseline_agent4rec.txt")),
    ("agent_system", include_str!("../prompts/agent_system.txt")),
    ("agent_discrimination", include_str!("../prompts/agent_discrimination.txt")),
    ("agent_ranking", include_str!("../prompts/agent_ranking.txt")),
    ("agent_rating", include_str!("../prompts/agent_rating.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub version: u32,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn render_system(&self, vars: &[(&str, &str)]) -> String {
        render(&self.system, vars)
    }

    pub fn render_user(&self, vars: &[(&str, &str)]) -> String {
        render(&self.user, vars)
    }
}

fn parse_asset(name: &'static str, text: &str) -> PromptTemplate {
    let mut lines = text.lines();
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix("version:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| panic!("prompt asset {name} lacks a version line"));
    let mut system = Vec::new();
    let mut user = Vec::new();
    let mut section: Option<&mut Vec<&str>> = None;
    for line in lines {
        match line.trim_end() {
            "[system]" => section = Some(&mut system),
            "[user]" => section = Some(&mut user),
            _ => {
                if let Some(target) = section.as_mut() {
                    target.push(line);
                }
            }
        }
    }
    PromptTemplate { name, version, system: system.join("\n").trim().to_string(), user: user.join("\n").trim().to_string() }
}

fn registry() -> &'static BTreeMap<&'static str, PromptTemplate> {
    static REGISTRY: OnceLock<BTreeMap<&'static str, PromptTemplate>> = OnceLock::new();
    REGISTRY.get_or_init(|| ASSETS.iter().map(|&(name, text)| (name, parse_asset(name, text))).collect())
}

/// Looks up a bundled template. Panics on unknown names, which are programmer errors.
pub fn template(name: &str) -> &'static PromptTemplate {
    registry().get(name).unwrap_or_else(|| panic!("no prompt template named {name}"))
}

/// `name → version` for every bundled template.
pub fn versions() -> BTreeMap<String, u32> {
    registry().iter().map(|(k, t)| (k.to_string(), t.version)).collect()
}

/// Single-pass `{name}` substitution; substituted text is never rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(after.len());
        let value = (ident_len > 0 && after[ident_len..].starts_with('}'))
            .then(|| vars.iter().find(|(k, _)| *k == &after[..ident_len]))
            .flatten();
        match value {
            Some((_, v)) => {
                out.push_str(v);
                rest = &after[ident_len + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

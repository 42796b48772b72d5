//! Local validation of structured model output.
//!
//! Prompts ask for small JSON documents; the parsers here also accept the
//! plain-text shapes models commonly fall back to (comma lists, bullet
//! lines, `id: value` lines). A failed parse triggers a corrective re-prompt.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{GatewayError, PromptExecutor, PromptRequest};
use crate::metrics::RatingScale;

pub const DEFAULT_PARSE_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseSchema {
    /// Non-empty list of trait strings, optionally capped.
    TraitList { max_items: Option<usize> },
    /// Personality / interests / behaviour texts plus a role from a closed set.
    RoleProfile { roles: Vec<String> },
    /// At least one `(taste, rationale)` pair.
    TastePairs,
    DecisionPath { min_steps: usize, max_steps: usize },
    /// Subset of `candidates` (given in presentation order).
    SelectionSet { candidates: Vec<String>, repair: bool },
    /// Permutation of `candidates` (given in presentation order).
    Ranking { candidates: Vec<String>, repair: bool },
    /// One rating per candidate within `scale`.
    RatingMap { candidates: Vec<String>, scale: RatingScale, repair: bool },
    FreeText,
}

impl ResponseSchema {
    pub fn kind(&self) -> &'static str {
        match self {
            ResponseSchema::TraitList { .. } => "trait_list",
            ResponseSchema::RoleProfile { .. } | ResponseSchema::TastePairs => "profile",
            ResponseSchema::DecisionPath { .. } => "decision_path",
            ResponseSchema::SelectionSet { .. } => "selection_set",
            ResponseSchema::Ranking { .. } => "ranking",
            ResponseSchema::RatingMap { .. } => "rating_map",
            ResponseSchema::FreeText => "free_text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub personality: String,
    pub interests: String,
    pub behaviour: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StructuredValue {
    Traits(Vec<String>),
    RoleProfile(RoleProfile),
    TastePairs(Vec<(String, String)>),
    DecisionPath(Vec<StepSpec>),
    Selection(BTreeSet<String>),
    Ranking(Vec<String>),
    Ratings(BTreeMap<String, f64>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOutput {
    pub value: StructuredValue,
    /// Raw text of the accepted attempt.
    pub raw: String,
    pub repaired: bool,
    /// Notes such as collapsed duplicates or dropped ids.
    pub notes: Vec<String>,
    /// Raw text of every attempt, the accepted one last.
    pub attempts: Vec<String>,
}

struct Parsed {
    value: StructuredValue,
    repaired: bool,
    notes: Vec<String>,
}

impl Parsed {
    fn clean(value: StructuredValue) -> Self {
        Parsed { value, repaired: false, notes: Vec::new() }
    }
}

/// First JSON value embedded in `text`, skipping prose and code fences.
fn extract_json(text: &str) -> Option<Value> {
    for (idx, ch) in text.char_indices() {
        if ch == '{' || ch == '[' {
            let mut stream = serde_json::Deserializer::from_str(&text[idx..]).into_iter::<Value>();
            if let Some(Ok(value)) = stream.next() {
                return Some(value);
            }
        }
    }
    None
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn normalize_id(raw: &str) -> String {
    raw.trim().trim_matches(|c: char| matches!(c, '[' | ']' | '"' | '\'' | '`' | '.' | ',' | ';' | ':' | '(' | ')')).to_string()
}

/// Unwraps `{"<key>": [...]}` to the array, or returns the value itself.
fn unwrap_list<'a>(value: &'a Value, keys: &[&str]) -> Option<&'a Vec<Value>> {
    match value {
        Value::Array(items) => Some(items),
        Value::Object(map) => keys.iter().find_map(|k| map.get(*k)).and_then(Value::as_array).or_else(|| {
            // single-key object whose value is a list
            if map.len() == 1 {
                map.values().next().and_then(Value::as_array)
            } else {
                None
            }
        }),
        _ => None,
    }
}

fn bullet_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter_map(|l| {
            let stripped = l
                .strip_prefix("- ")
                .or_else(|| l.strip_prefix("* "))
                .or_else(|| l.strip_prefix("• "))
                .or_else(|| {
                    let digits = l.chars().take_while(char::is_ascii_digit).count();
                    (digits > 0).then(|| &l[digits..]).and_then(|rest| rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")))
                })?;
            let s = stripped.trim();
            (!s.is_empty()).then(|| s.to_string())
        })
        .collect()
}

fn parse_traits(text: &str, max_items: Option<usize>) -> Result<Parsed, String> {
    let raw: Vec<String> = match extract_json(text) {
        Some(value) => {
            let list = unwrap_list(&value, &["traits", "attributes", "descriptors"]).ok_or("expected a JSON list of traits")?;
            list.iter()
                .filter_map(|v| {
                    as_text(v).or_else(|| ["trait", "text", "descriptor"].iter().find_map(|k| v.get(*k).and_then(as_text)))
                })
                .collect()
        }
        None => bullet_lines(text),
    };
    let mut seen = HashSet::new();
    let mut traits = Vec::new();
    let mut notes = Vec::new();
    for t in raw.into_iter().filter(|t| !t.is_empty()) {
        if seen.insert(t.to_lowercase()) {
            traits.push(t);
        } else {
            notes.push(format!("collapsed duplicate trait {t:?}"));
        }
    }
    if traits.is_empty() {
        return Err("no traits found; reply with a JSON list of strings".into());
    }
    if let Some(max) = max_items {
        if traits.len() > max {
            return Err(format!("{} traits returned but at most {max} are allowed", traits.len()));
        }
    }
    Ok(Parsed { value: StructuredValue::Traits(traits), repaired: false, notes })
}

fn parse_role_profile(text: &str, roles: &[String]) -> Result<Parsed, String> {
    let value = extract_json(text).ok_or("expected a JSON object")?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    let field = |keys: &[&str]| -> Result<String, String> {
        keys.iter()
            .find_map(|k| obj.get(*k))
            .map(|v| match v {
                Value::Array(items) => items.iter().filter_map(as_text).collect::<Vec<_>>().join(", "),
                other => as_text(other).unwrap_or_default(),
            })
            .ok_or_else(|| format!("missing field {:?}", keys[0]))
    };
    let role_raw = field(&["role"])?;
    let role = roles
        .iter()
        .find(|r| r.eq_ignore_ascii_case(role_raw.trim()))
        .ok_or_else(|| format!("role {role_raw:?} is not one of {}", roles.join(", ")))?;
    Ok(Parsed::clean(StructuredValue::RoleProfile(RoleProfile {
        personality: field(&["personality"])?,
        interests: field(&["interests", "interest"])?,
        behaviour: field(&["behaviour", "behavior", "behaviour_features", "behavior_features"])?,
        role: role.clone(),
    })))
}

fn parse_taste_pairs(text: &str) -> Result<Parsed, String> {
    let value = extract_json(text).ok_or("expected a JSON list of {taste, rationale} objects")?;
    let list = unwrap_list(&value, &["tastes", "pairs"]).ok_or("expected a JSON list")?;
    let mut pairs = Vec::new();
    for (idx, entry) in list.iter().enumerate() {
        let taste = entry.get("taste").and_then(as_text).unwrap_or_default();
        let rationale = entry.get("rationale").or_else(|| entry.get("reason")).and_then(as_text).unwrap_or_default();
        if taste.is_empty() || rationale.is_empty() {
            return Err(format!("entry {} needs both a taste and a rationale", idx + 1));
        }
        pairs.push((taste, rationale));
    }
    if pairs.is_empty() {
        return Err("at least one taste is required".into());
    }
    Ok(Parsed::clean(StructuredValue::TastePairs(pairs)))
}

fn parse_path(text: &str, min: usize, max: usize) -> Result<Parsed, String> {
    let value = extract_json(text).ok_or("expected a JSON list of steps")?;
    let list = unwrap_list(&value, &["steps", "path", "decision_path"]).ok_or("expected a JSON list of steps")?;
    let mut steps = Vec::new();
    let mut names = HashSet::new();
    for entry in list {
        let (name, description) = match entry {
            Value::String(s) => (s.trim().to_string(), String::new()),
            other => (
                other.get("name").and_then(as_text).unwrap_or_default(),
                other.get("description").and_then(as_text).unwrap_or_default(),
            ),
        };
        if name.is_empty() {
            return Err("every step needs a name".into());
        }
        if !names.insert(name.to_lowercase()) {
            return Err(format!("duplicate step {name:?}"));
        }
        steps.push(StepSpec { name, description });
    }
    if steps.len() < min || steps.len() > max {
        return Err(format!("{} steps returned; between {min} and {max} are required", steps.len()));
    }
    Ok(Parsed::clean(StructuredValue::DecisionPath(steps)))
}

/// Candidate ids mentioned in `text`, in order of appearance.
fn ids_from_text(text: &str, candidates: &[String]) -> Vec<String> {
    let known: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    text.split(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | '>' | '|'))
        .map(normalize_id)
        .filter(|t| known.contains(t.as_str()))
        .collect()
}

fn id_list(text: &str, keys: &[&str], candidates: &[String]) -> Result<(Vec<String>, bool), String> {
    match extract_json(text) {
        Some(value) => {
            let list = unwrap_list(&value, keys).ok_or("expected a JSON list of candidate ids")?;
            Ok((list.iter().filter_map(as_text).map(|s| normalize_id(&s)).collect(), true))
        }
        None => Ok((ids_from_text(text, candidates), false)),
    }
}

fn parse_selection(text: &str, candidates: &[String], repair: bool) -> Result<Parsed, String> {
    let (ids, from_json) = id_list(text, &["selected", "selection", "items"], candidates)?;
    if !from_json && ids.is_empty() {
        return Err("no candidate ids found; reply with a JSON list of ids".into());
    }
    let known: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    let mut notes = Vec::new();
    let mut selected = BTreeSet::new();
    for id in ids {
        if known.contains(id.as_str()) {
            selected.insert(id);
        } else if repair {
            notes.push(format!("dropped unknown id {id:?}"));
        } else {
            return Err(format!("{id:?} is not a candidate"));
        }
    }
    let repaired = !notes.is_empty();
    Ok(Parsed { value: StructuredValue::Selection(selected), repaired, notes })
}

/// Dedupe keep-first, drop unknown ids, append missing ids in presentation order.
pub(crate) fn repair_ranking(ids: &[String], candidates: &[String]) -> (Vec<String>, Vec<String>) {
    let known: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut notes = Vec::new();
    for id in ids {
        if !known.contains(id.as_str()) {
            notes.push(format!("dropped unknown id {id:?}"));
        } else if !seen.insert(id.as_str()) {
            notes.push(format!("dropped duplicate {id:?}"));
        } else {
            order.push(id.clone());
        }
    }
    for c in candidates {
        if !seen.contains(c.as_str()) {
            notes.push(format!("appended missing {c:?}"));
            order.push(c.clone());
        }
    }
    (order, notes)
}

fn parse_ranking(text: &str, candidates: &[String], repair: bool) -> Result<Parsed, String> {
    let (ids, _) = id_list(text, &["ranking", "order", "ranked"], candidates)?;
    let known: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    if !ids.iter().any(|id| known.contains(id.as_str())) {
        return Err("no candidate ids found; reply with a JSON list ranking every id".into());
    }
    let (order, notes) = repair_ranking(&ids, candidates);
    if !notes.is_empty() && !repair {
        return Err(format!("not a permutation of the candidates: {}", notes.join("; ")));
    }
    Ok(Parsed { value: StructuredValue::Ranking(order), repaired: !notes.is_empty(), notes })
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_ratings(text: &str, candidates: &[String], scale: &RatingScale, repair: bool) -> Result<Parsed, String> {
    let mut raw: Vec<(String, f64)> = Vec::new();
    match extract_json(text) {
        Some(Value::Object(map)) => {
            let inner = map.get("ratings").cloned().unwrap_or(Value::Object(map));
            match inner {
                Value::Object(entries) => {
                    for (k, v) in entries {
                        let r = number(&v).ok_or_else(|| format!("rating for {k:?} is not a number"))?;
                        raw.push((normalize_id(&k), r));
                    }
                }
                Value::Array(list) => collect_rating_array(&list, &mut raw)?,
                _ => return Err("expected a JSON object mapping ids to ratings".into()),
            }
        }
        Some(Value::Array(list)) => collect_rating_array(&list, &mut raw)?,
        Some(_) => return Err("expected a JSON object mapping ids to ratings".into()),
        None => {
            for line in text.lines() {
                let mut parts = line.splitn(2, [':', '=']);
                let (Some(k), Some(v)) = (parts.next(), parts.next()) else { continue };
                let id = normalize_id(k.trim_start_matches(['-', '*', ' ']));
                if let Ok(r) = v.trim().trim_end_matches(['.', ',']).parse::<f64>() {
                    raw.push((id, r));
                }
            }
        }
    }
    let known: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    let mut notes = Vec::new();
    let mut ratings = BTreeMap::new();
    for (id, r) in raw {
        if !r.is_finite() {
            return Err(format!("rating for {id:?} is not finite"));
        }
        if !known.contains(id.as_str()) {
            if !repair {
                return Err(format!("{id:?} is not a candidate"));
            }
            notes.push(format!("dropped unknown id {id:?}"));
            continue;
        }
        if ratings.contains_key(&id) {
            if !repair {
                return Err(format!("{id:?} rated twice"));
            }
            notes.push(format!("ignored repeated rating for {id:?}"));
            continue;
        }
        let value = if scale.contains(r) {
            r
        } else if repair {
            let clamped = scale.clamp(r);
            notes.push(format!("clamped {id:?} from {r} to {clamped}"));
            clamped
        } else {
            return Err(format!("rating {r} for {id:?} outside [{}, {}]", scale.min, scale.max));
        };
        ratings.insert(id, value);
    }
    let missing: Vec<&String> = candidates.iter().filter(|c| !ratings.contains_key(*c)).collect();
    if !missing.is_empty() {
        return Err(format!(
            "missing ratings for {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ));
    }
    Ok(Parsed { value: StructuredValue::Ratings(ratings), repaired: !notes.is_empty(), notes })
}

fn collect_rating_array(list: &[Value], out: &mut Vec<(String, f64)>) -> Result<(), String> {
    for entry in list {
        let id = entry.get("id").or_else(|| entry.get("item")).and_then(as_text).ok_or("entry without id")?;
        let r = entry.get("rating").and_then(number).ok_or_else(|| format!("entry {id:?} without numeric rating"))?;
        out.push((normalize_id(&id), r));
    }
    Ok(())
}

fn parse(text: &str, schema: &ResponseSchema) -> Result<Parsed, String> {
    match schema {
        ResponseSchema::TraitList { max_items } => parse_traits(text, *max_items),
        ResponseSchema::RoleProfile { roles } => parse_role_profile(text, roles),
        ResponseSchema::TastePairs => parse_taste_pairs(text),
        ResponseSchema::DecisionPath { min_steps, max_steps } => parse_path(text, *min_steps, *max_steps),
        ResponseSchema::SelectionSet { candidates, repair } => parse_selection(text, candidates, *repair),
        ResponseSchema::Ranking { candidates, repair } => parse_ranking(text, candidates, *repair),
        ResponseSchema::RatingMap { candidates, scale, repair } => parse_ratings(text, candidates, scale, *repair),
        ResponseSchema::FreeText => {
            let t = text.trim();
            if t.is_empty() {
                Err("empty reply".into())
            } else {
                Ok(Parsed::clean(StructuredValue::Text(t.to_string())))
            }
        }
    }
}

/// Parses one completion against a schema without any retry.
pub fn parse_structured(text: &str, schema: &ResponseSchema) -> Result<StructuredOutput, String> {
    parse(text, schema).map(|p| StructuredOutput {
        value: p.value,
        raw: text.to_string(),
        repaired: p.repaired,
        notes: p.notes,
        attempts: vec![text.to_string()],
    })
}

fn corrective(user_message: &str, error: &str) -> String {
    format!(
        "{user_message}\n\nFORMAT CORRECTION: your previous reply could not be used ({error}). \
         Reply again using exactly the requested output format and nothing else."
    )
}

/// Executes `request` and validates the completion, re-prompting with a
/// corrective instruction up to `max_attempts` times in total.
pub fn execute_structured(
    executor: &dyn PromptExecutor,
    request: &PromptRequest,
    schema: &ResponseSchema,
    max_attempts: usize,
) -> Result<StructuredOutput, GatewayError> {
    execute_structured_with(executor, request, schema, max_attempts, |_| Ok(()))
}

/// [`execute_structured`] with an extra semantic check on the parsed value;
/// a failed check counts as a malformed attempt.
pub fn execute_structured_with(
    executor: &dyn PromptExecutor,
    request: &PromptRequest,
    schema: &ResponseSchema,
    max_attempts: usize,
    check: impl Fn(&StructuredValue) -> Result<(), String>,
) -> Result<StructuredOutput, GatewayError> {
    let mut attempts = Vec::new();
    let mut current = request.clone();
    let mut last_error = String::new();
    for _ in 0..max_attempts.max(1) {
        let response = executor.execute(&current)?;
        attempts.push(response.text.clone());
        match parse(&response.text, schema).and_then(|p| check(&p.value).map(|_| p)) {
            Ok(parsed) => {
                for note in &parsed.notes {
                    log::debug!("{}: {note}", request.tag);
                }
                return Ok(StructuredOutput {
                    value: parsed.value,
                    raw: response.text,
                    repaired: parsed.repaired,
                    notes: parsed.notes,
                    attempts,
                });
            }
            Err(error) => {
                log::debug!("{}: invalid {} output: {error}", request.tag, schema.kind());
                current.user_message = corrective(&request.user_message, &error);
                last_error = error;
            }
        }
    }
    Err(GatewayError::MalformedOutput { tag: request.tag.clone(), attempts, last_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn selection_from_plain_text() {
        let out = parse_structured("c2, c7", &ResponseSchema::SelectionSet { candidates: ids(10), repair: true }).unwrap();
        assert_eq!(out.value, StructuredValue::Selection(["c2".to_string(), "c7".to_string()].into()));
        assert!(!out.repaired);
    }

    #[test]
    fn selection_drops_unknown_with_flag() {
        let schema = ResponseSchema::SelectionSet { candidates: ids(3), repair: true };
        let out = parse_structured(r#"{"selected": ["c1", "c9"]}"#, &schema).unwrap();
        assert_eq!(out.value, StructuredValue::Selection(["c1".to_string()].into()));
        assert!(out.repaired);
        let strict = ResponseSchema::SelectionSet { candidates: ids(3), repair: false };
        assert!(parse_structured(r#"["c1", "c9"]"#, &strict).is_err());
        let empty = parse_structured("[]", &strict).unwrap();
        assert_eq!(empty.value, StructuredValue::Selection(BTreeSet::new()));
    }

    #[test]
    fn ranking_repair_dedupes_and_appends() {
        let cands = ids(10);
        let reply = r#"["c3","c1","c3","c2","c4","c5","c6","c7","c8","c10"]"#;
        let out = parse_structured(reply, &ResponseSchema::Ranking { candidates: cands.clone(), repair: true }).unwrap();
        let StructuredValue::Ranking(order) = out.value else { panic!() };
        assert_eq!(order[0], "c3");
        assert_eq!(order.last().unwrap(), "c9");
        assert_eq!(order.len(), 10);
        assert!(out.repaired);
        assert!(parse_structured(reply, &ResponseSchema::Ranking { candidates: cands, repair: false }).is_err());
    }

    #[test]
    fn exact_permutation_is_not_repaired() {
        let cands = ids(4);
        let out = parse_structured("c4 > c2 > c1 > c3", &ResponseSchema::Ranking { candidates: cands, repair: false }).unwrap();
        assert_eq!(out.value, StructuredValue::Ranking(vec!["c4".into(), "c2".into(), "c1".into(), "c3".into()]));
        assert!(!out.repaired);
    }

    #[test]
    fn ratings_clamp_with_flag() {
        let schema = ResponseSchema::RatingMap { candidates: ids(2), scale: RatingScale::ONE_TO_FIVE, repair: true };
        let out = parse_structured(r#"{"c1": 6, "c2": "3"}"#, &schema).unwrap();
        let StructuredValue::Ratings(r) = out.value else { panic!() };
        assert_eq!(r["c1"], 5.0);
        assert_eq!(r["c2"], 3.0);
        assert!(out.repaired);
        assert!(parse_structured("c1: 4\nc2: 2", &schema).is_ok());
        assert!(parse_structured(r#"{"c1": 4}"#, &schema).is_err());
    }

    #[test]
    fn traits_collapse_duplicates_and_respect_cap() {
        let out = parse_structured(r#"["A", "a", "b"]"#, &ResponseSchema::TraitList { max_items: Some(2) }).unwrap();
        assert_eq!(out.value, StructuredValue::Traits(vec!["A".into(), "b".into()]));
        assert_eq!(out.notes.len(), 1);
        assert!(parse_structured(r#"["a", "b", "c"]"#, &ResponseSchema::TraitList { max_items: Some(2) }).is_err());
        let bullets = parse_structured("- likes jazz\n- night owl\n", &ResponseSchema::TraitList { max_items: None }).unwrap();
        assert_eq!(bullets.value, StructuredValue::Traits(vec!["likes jazz".into(), "night owl".into()]));
        assert!(parse_structured("[]", &ResponseSchema::TraitList { max_items: None }).is_err());
    }

    #[test]
    fn role_profile_closed_set() {
        let roles: Vec<String> = ["watcher", "explorer", "critic", "chatter", "poster"].iter().map(|s| s.to_string()).collect();
        let schema = ResponseSchema::RoleProfile { roles };
        let ok = r#"{"personality":"calm","interests":"","behaviour":"rates often","role":"Critic"}"#;
        let out = parse_structured(ok, &schema).unwrap();
        let StructuredValue::RoleProfile(p) = out.value else { panic!() };
        assert_eq!(p.role, "critic");
        assert_eq!(p.interests, "");
        let bad = r#"{"personality":"calm","interests":"x","behaviour":"y","role":"lurker"}"#;
        assert!(parse_structured(bad, &schema).is_err());
    }

    #[test]
    fn taste_pairs_need_rationale() {
        assert!(parse_structured(r#"[{"taste":"noir"}]"#, &ResponseSchema::TastePairs).is_err());
        let out = parse_structured(r#"{"tastes":[{"taste":"noir","rationale":"rates noir 5"}]}"#, &ResponseSchema::TastePairs).unwrap();
        assert_eq!(out.value, StructuredValue::TastePairs(vec![("noir".into(), "rates noir 5".into())]));
    }

    #[test]
    fn path_bounds() {
        let schema = ResponseSchema::DecisionPath { min_steps: 2, max_steps: 6 };
        assert!(parse_structured(r#"[{"name":"only"}]"#, &schema).is_err());
        assert!(parse_structured(r#"["a","b"]"#, &schema).is_ok());
        assert!(parse_structured(r#"["a","A"]"#, &schema).is_err());
    }

    #[test]
    fn json_inside_prose_and_fences() {
        let text = "Sure! Here you go:\n```json\n{\"selected\": [\"c1\"]}\n```";
        let out = parse_structured(text, &ResponseSchema::SelectionSet { candidates: ids(2), repair: false }).unwrap();
        assert_eq!(out.value, StructuredValue::Selection(["c1".to_string()].into()));
    }

    #[test]
    fn retries_with_correction_then_fails() {
        let calls = Arc::new(AtomicUsize::new(0));
        let seen = calls.clone();
        let backend = ScriptedBackend::from_responder(move |_: &PromptRequest| {
            seen.fetch_add(1, Ordering::SeqCst);
            Some("no idea".to_string())
        });
        let req = PromptRequest::new("m", "agent-ranking", "s", "rank these");
        let err = execute_structured(&backend, &req, &ResponseSchema::Ranking { candidates: ids(3), repair: true }, 3).unwrap_err();
        match err {
            GatewayError::MalformedOutput { attempts, .. } => assert_eq!(attempts.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn corrective_prompt_recovers() {
        let backend = ScriptedBackend::from_responder(|r: &PromptRequest| {
            Some(if r.user_message.contains("FORMAT CORRECTION") { "[\"c2\",\"c1\"]".into() } else { "hmm".into() })
        });
        let req = PromptRequest::new("m", "agent-ranking", "s", "rank");
        let out = execute_structured(&backend, &req, &ResponseSchema::Ranking { candidates: ids(2), repair: false }, 3).unwrap();
        assert_eq!(out.attempts.len(), 2);
        assert_eq!(out.value, StructuredValue::Ranking(vec!["c2".into(), "c1".into()]));
    }
}

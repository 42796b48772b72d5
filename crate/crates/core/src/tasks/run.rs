use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{render_agent_prompt, RenderContext, TaskError, TaskInstance, TaskKind};
use crate::dataset::ItemId;
use crate::llm::{execute_structured, PromptExecutor, ResponseSchema, StructuredValue};
use crate::metrics::{hit_rate_at_k, ndcg_at_k, overlap_ratio, MetricError};
use crate::profile::TaskAlignedProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum DecisionPayload {
    Selection(BTreeSet<ItemId>),
    Ranking(Vec<ItemId>),
    Ratings(BTreeMap<ItemId, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub payload: DecisionPayload,
    pub raw_response: String,
    pub repair_applied: bool,
    pub attempts: usize,
}

/// Executes a task for a profile. Implemented by the LLM agent and by test doubles.
pub trait AgentRunner: Sync {
    fn run(&self, profile: &TaskAlignedProfile, instance: &TaskInstance) -> Result<AgentDecision, TaskError>;
}

/// Profile-conditioned LLM agent.
pub struct LlmAgent<'a> {
    pub executor: &'a dyn PromptExecutor,
    pub ctx: RenderContext<'a>,
    pub repair: bool,
    pub parse_attempts: usize,
}

impl AgentRunner for LlmAgent<'_> {
    fn run(&self, profile: &TaskAlignedProfile, instance: &TaskInstance) -> Result<AgentDecision, TaskError> {
        run_task(profile, instance, &self.ctx, self.executor, self.repair, self.parse_attempts)
    }
}

/// Renders, executes and validates one decision. With `repair` the ranking
/// is deduped keep-first with missing ids appended in presentation order,
/// unknown selections are dropped and off-scale ratings are clamped.
pub fn run_task(
    profile: &TaskAlignedProfile,
    instance: &TaskInstance,
    ctx: &RenderContext<'_>,
    executor: &dyn PromptExecutor,
    repair: bool,
    parse_attempts: usize,
) -> Result<AgentDecision, TaskError> {
    let request = render_agent_prompt(profile, instance, ctx);
    let candidates = instance.presented();
    let schema = match instance.kind {
        TaskKind::Discrimination => ResponseSchema::SelectionSet { candidates, repair },
        TaskKind::Ranking => ResponseSchema::Ranking { candidates, repair },
        TaskKind::Rating => ResponseSchema::RatingMap { candidates, scale: ctx.scale, repair },
    };
    let out = execute_structured(executor, &request, &schema, parse_attempts)?;
    let payload = match out.value {
        StructuredValue::Selection(s) => DecisionPayload::Selection(s),
        StructuredValue::Ranking(r) => DecisionPayload::Ranking(r),
        StructuredValue::Ratings(r) => DecisionPayload::Ratings(r),
        other => unreachable!("schema {:?} produced {other:?}", schema.kind()),
    };
    Ok(AgentDecision { payload, raw_response: out.raw, repair_applied: out.repaired, attempts: out.attempts.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskScore {
    Overlap(f64),
    Ranking { ndcg5: f64, ndcg10: f64, hr3: f64 },
    /// Rating scores are pooled per run before RMSE and JSD are taken.
    Rating { predictions: BTreeMap<ItemId, f64>, truths: BTreeMap<ItemId, f64> },
}

pub fn score_decision(instance: &TaskInstance, decision: &AgentDecision) -> Result<TaskScore, MetricError> {
    match (&decision.payload, instance.kind) {
        (DecisionPayload::Selection(s), TaskKind::Discrimination) => Ok(TaskScore::Overlap(overlap_ratio(s, &instance.positives)?)),
        (DecisionPayload::Ranking(r), TaskKind::Ranking) => {
            let positive = instance.single_positive().ok_or(MetricError::EmptyPositives)?;
            Ok(TaskScore::Ranking {
                ndcg5: ndcg_at_k(r, positive, 5)?,
                ndcg10: ndcg_at_k(r, positive, 10)?,
                hr3: hit_rate_at_k(r, positive, 3)?,
            })
        }
        (DecisionPayload::Ratings(r), TaskKind::Rating) => {
            Ok(TaskScore::Rating { predictions: r.clone(), truths: instance.truths.clone() })
        }
        _ => Err(MetricError::KeyMismatch),
    }
}

/// One line of a decision log: the instance, the outcome and, on success,
/// everything needed to recompute its metrics offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub run: usize,
    pub user_id: String,
    pub instance_id: String,
    pub instance: TaskInstance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<DecisionPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    pub repair_applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DecisionRecord {
    pub fn new(run: usize, instance: &TaskInstance, outcome: &Result<AgentDecision, TaskError>) -> Self {
        let (payload, raw_response, repair_applied, error) = match outcome {
            Ok(d) => (Some(d.payload.clone()), Some(d.raw_response.clone()), d.repair_applied, None),
            Err(e) => (None, None, false, Some(e.to_string())),
        };
        DecisionRecord {
            run,
            user_id: instance.user_id.clone(),
            instance_id: instance.instance_id(),
            instance: instance.clone(),
            payload,
            raw_response,
            repair_applied,
            error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Item, ItemStats};
    use crate::llm::{GatewayError, ModelParams, PromptRequest, ScriptedBackend};
    use crate::metrics::RatingScale;
    use crate::profile::GeneratorKind;
    use crate::tasks::{AttributeMask, PopularityRendering};

    fn instance(kind: TaskKind, n: usize) -> TaskInstance {
        let candidates: Vec<String> = (1..=n).map(|i| format!("c{i}")).collect();
        let positives = match kind {
            TaskKind::Rating => candidates.iter().cloned().collect(),
            _ => BTreeSet::from(["c1".to_string()]),
        };
        let truths = if kind == TaskKind::Rating { candidates.iter().map(|c| (c.clone(), 4.0)).collect() } else { BTreeMap::new() };
        TaskInstance {
            kind,
            user_id: "u".into(),
            presentation_order: (0..n).collect(),
            candidates,
            positives,
            attribute_mask: AttributeMask::full(),
            instance_seed: 1,
            truths,
            label: None,
            sampler_warning: None,
        }
    }

    fn run_with(reply: &'static str, inst: &TaskInstance, repair: bool) -> Result<AgentDecision, TaskError> {
        let items: BTreeMap<ItemId, Item> = inst.candidates.iter().map(|c| (c.clone(), Item::placeholder(c))).collect();
        let stats = ItemStats::default();
        let model = ModelParams::default();
        let ctx = RenderContext {
            items: &items,
            stats: &stats,
            scale: RatingScale::ONE_TO_FIVE,
            popularity: PopularityRendering::Count,
            model: &model,
            domain: "movie",
        };
        let backend = ScriptedBackend::from_responder(move |_: &PromptRequest| Some(reply.to_string()));
        let profile = TaskAlignedProfile::new("u", GeneratorKind::Empty, None);
        run_task(&profile, inst, &ctx, &backend, repair, 3)
    }

    #[test]
    fn exact_permutation_not_repaired() {
        let inst = instance(TaskKind::Ranking, 3);
        let d = run_with(r#"["c2","c1","c3"]"#, &inst, true).unwrap();
        assert!(!d.repair_applied);
        assert_eq!(d.payload, DecisionPayload::Ranking(vec!["c2".into(), "c1".into(), "c3".into()]));
        let score = score_decision(&inst, &d).unwrap();
        assert_eq!(score, TaskScore::Ranking { ndcg5: 1.0 / 3f64.log2(), ndcg10: 1.0 / 3f64.log2(), hr3: 1.0 });
    }

    #[test]
    fn omission_repaired_and_flagged() {
        let inst = instance(TaskKind::Ranking, 3);
        let d = run_with(r#"["c3","c1"]"#, &inst, true).unwrap();
        assert!(d.repair_applied);
        assert_eq!(d.payload, DecisionPayload::Ranking(vec!["c3".into(), "c1".into(), "c2".into()]));
        let strict = run_with(r#"["c3","c1"]"#, &inst, false).unwrap_err();
        assert!(matches!(strict, TaskError::Gateway(GatewayError::MalformedOutput { .. })));
    }

    #[test]
    fn rating_clamped() {
        let inst = instance(TaskKind::Rating, 2);
        let d = run_with(r#"{"c1": 6, "c2": 4}"#, &inst, true).unwrap();
        assert!(d.repair_applied);
        assert_eq!(d.payload, DecisionPayload::Ratings(BTreeMap::from([("c1".into(), 5.0), ("c2".into(), 4.0)])));
    }

    #[test]
    fn record_keeps_errors() {
        let inst = instance(TaskKind::Discrimination, 3);
        let outcome = run_with("gibberish", &inst, true);
        let rec = DecisionRecord::new(1, &inst, &outcome);
        assert!(rec.error.is_some());
        assert!(rec.payload.is_none());
    }
}

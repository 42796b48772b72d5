//! Counterfactual trait-to-step mapping.
//!
//! Step `j` owns `probes_per_step` probe instances, assigned round-robin:
//! step `j` gets `probes[(j * per_step + i) % probes.len()]`. For every trait
//! the agent runs once with the original profile and once with only that
//! trait perturbed, on the same instance. A trait is bound to every step
//! whose probe output changed; a trait that never changes anything is
//! demoted to background. Traits whose perturbation failed stay active and
//! unbound.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    task_message, CounterfactualTrial, DecisionPath, PolicyBinding, ProfileError, TaskAlignedProfile, TraitDescriptor,
    TraitStatus,
};
use crate::tasks::{AgentDecision, AgentRunner, DecisionPayload, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterfactualOptions {
    /// Rating change threshold; a change must exceed it.
    pub delta: f64,
    pub probes_per_step: usize,
}

impl Default for CounterfactualOptions {
    fn default() -> Self {
        CounterfactualOptions { delta: 0.5, probes_per_step: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CounterfactualOutcome {
    pub active: Vec<TraitDescriptor>,
    pub background: Vec<TraitDescriptor>,
    pub bindings: Vec<PolicyBinding>,
    /// Every trial run, fired or not.
    pub trials: Vec<(String, CounterfactualTrial)>,
    pub notes: Vec<String>,
}

fn fmt_set(s: &BTreeSet<String>) -> String {
    format!("{{{}}}", s.iter().cloned().collect::<Vec<_>>().join(", "))
}

/// `Some(summary)` when the counterfactual decision differs from the original.
pub fn change_predicate(original: &AgentDecision, counterfactual: &AgentDecision, delta: f64) -> Option<String> {
    match (&original.payload, &counterfactual.payload) {
        (DecisionPayload::Selection(a), DecisionPayload::Selection(b)) => {
            (a != b).then(|| format!("selection {} -> {}", fmt_set(a), fmt_set(b)))
        }
        (DecisionPayload::Ranking(a), DecisionPayload::Ranking(b)) => {
            (a != b).then(|| format!("order [{}] -> [{}]", a.join(", "), b.join(", ")))
        }
        (DecisionPayload::Ratings(a), DecisionPayload::Ratings(b)) => {
            let moved: Vec<String> = a
                .iter()
                .filter_map(|(item, &r)| {
                    let r2 = *b.get(item)?;
                    ((r2 - r).abs() > delta).then(|| format!("{item}: {r} -> {r2}"))
                })
                .collect();
            (!moved.is_empty()).then(|| format!("ratings {}", moved.join("; ")))
        }
        _ => None,
    }
}

fn with_trait(base: &TaskAlignedProfile, index: usize, replacement: &TraitDescriptor) -> TaskAlignedProfile {
    let mut p = base.clone();
    p.traits[index] = replacement.clone();
    p
}

pub fn counterfactual_map(
    base: &TaskAlignedProfile,
    path: &DecisionPath,
    probes: &[TaskInstance],
    runner: &dyn AgentRunner,
    perturb: &dyn Fn(usize, &TraitDescriptor) -> Result<TraitDescriptor, ProfileError>,
    options: &CounterfactualOptions,
) -> Result<CounterfactualOutcome, ProfileError> {
    if probes.is_empty() {
        return Err(ProfileError::stage(3, "no probe instances"));
    }
    path.validate().map_err(|e| ProfileError::stage(3, e))?;
    let per_step = options.probes_per_step.max(1);
    let assignment: Vec<(usize, Vec<usize>)> = (0..path.steps.len())
        .map(|j| (j, (0..per_step).map(|i| (j * per_step + i) % probes.len()).collect()))
        .collect();

    let mut outcome = CounterfactualOutcome::default();
    let mut originals: BTreeMap<usize, AgentDecision> = BTreeMap::new();
    let used: BTreeSet<usize> = assignment.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    for &idx in &used {
        match runner.run(base, &probes[idx]) {
            Ok(d) => {
                originals.insert(idx, d);
            }
            Err(e) => {
                let note = format!("probe {} skipped: {}", probes[idx].instance_id(), task_message(&e));
                log::warn!("{note}");
                outcome.notes.push(note);
            }
        }
    }
    if originals.is_empty() {
        return Err(ProfileError::stage(3, "every probe instance failed"));
    }

    for (t_idx, descriptor) in base.traits.iter().enumerate() {
        let perturbed = match perturb(t_idx, descriptor) {
            Ok(p) => p,
            Err(e) => {
                let note = format!("trait {:?} untested: {e}", descriptor.text);
                log::warn!("{note}");
                outcome.notes.push(note);
                outcome.active.push(descriptor.clone());
                continue;
            }
        };
        let variant = with_trait(base, t_idx, &perturbed);
        let mut fired = Vec::new();
        let mut ran = 0;
        for (step_idx, probe_ids) in &assignment {
            let step_id = &path.steps[*step_idx].id;
            for idx in probe_ids {
                let Some(original) = originals.get(idx) else { continue };
                let cf = match runner.run(&variant, &probes[*idx]) {
                    Ok(d) => d,
                    Err(e) => {
                        outcome.notes.push(format!(
                            "counterfactual run for {:?} on {} skipped: {}",
                            descriptor.text,
                            probes[*idx].instance_id(),
                            task_message(&e)
                        ));
                        continue;
                    }
                };
                ran += 1;
                let change = change_predicate(original, &cf, options.delta);
                let trial = CounterfactualTrial {
                    instance_id: probes[*idx].instance_id(),
                    step_id: step_id.clone(),
                    perturbed_text: perturbed.text.clone(),
                    changed: change.is_some(),
                    summary: change.unwrap_or_else(|| "no change".into()),
                };
                outcome.trials.push((descriptor.text.clone(), trial.clone()));
                if trial.changed {
                    fired.push(trial);
                }
            }
        }
        if !fired.is_empty() {
            let mut active = descriptor.clone();
            active.status = TraitStatus::Active;
            outcome.bindings.push(PolicyBinding {
                descriptor: active.clone(),
                step_ids: fired.iter().map(|t| t.step_id.clone()).collect(),
                evidence: fired,
            });
            outcome.active.push(active);
        } else if ran > 0 {
            let mut demoted = descriptor.clone();
            demoted.status = TraitStatus::Background;
            outcome.background.push(demoted);
        } else {
            outcome.notes.push(format!("trait {:?} untested: no counterfactual run completed", descriptor.text));
            outcome.active.push(descriptor.clone());
        }
    }
    Ok(outcome)
}

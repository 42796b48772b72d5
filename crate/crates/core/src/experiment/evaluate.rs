use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{generate_store, load_profiles, ProfileSet};
use super::{slug, write_file, write_json, Environment, ExperimentError};
use crate::metrics::{aggregate_runs, macro_rating_jsd, rmse, JsdMode, MetricReport};
use crate::profile::{empty_profile, GeneratorConfig, GeneratorKind};
use crate::sampling::{attribute_probe_config, popularity_probe, position_probe, SamplerSpec};
use crate::seed::SeedTree;
use crate::tasks::{
    build_discrimination_instance, build_ranking_instance, build_rating_instance, run_task, score_decision, AttributeMask,
    BuildOutcome, DecisionRecord, RenderContext, TaskError, TaskKind, TaskScore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Position,
    Popularity,
    Attributes,
    HistorySweep,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Position => "position",
            ProbeKind::Popularity => "popularity",
            ProbeKind::Attributes => "attributes",
            ProbeKind::HistorySweep => "history-sweep",
        }
    }
}

impl FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [ProbeKind::Position, ProbeKind::Popularity, ProbeKind::Attributes, ProbeKind::HistorySweep]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown probe {s:?}"))
    }
}

/// Per-run instance accounting: `planned = scored + skipped + errors`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub planned: usize,
    pub scored: usize,
    pub skipped: usize,
    pub errors: usize,
}

impl Accounting {
    fn add(&mut self, other: Accounting) {
        self.planned += other.planned;
        self.scored += other.scored;
        self.skipped += other.skipped;
        self.errors += other.errors;
    }

    pub fn balanced(&self) -> bool {
        self.planned == self.scored + self.skipped + self.errors
    }
}

/// One report cell: a generator evaluated on one task setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub config_digest: String,
    pub dataset: String,
    /// `eval` or the probe name.
    pub experiment: String,
    pub generator: GeneratorKind,
    pub task: TaskKind,
    /// `P:C` for choice tasks, `n=N` for rating.
    pub setting: String,
    pub strategy: String,
    pub mask: String,
    /// Probe variable, e.g. `position=3` or `window=10`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsd_mode: Option<JsdMode>,
    pub metrics: Vec<MetricReport>,
    pub accounting: Vec<Accounting>,
    /// Instances whose sampler fell back to a best-effort draw.
    pub sampler_warnings: usize,
}

impl CellReport {
    pub fn id(&self) -> String {
        slug(&[
            &self.experiment,
            self.generator.as_str(),
            self.task.as_str(),
            &self.setting,
            &self.strategy,
            &self.mask,
            self.label.as_deref().unwrap_or(""),
        ])
    }

    pub fn total(&self) -> Accounting {
        let mut t = Accounting::default();
        self.accounting.iter().for_each(|a| t.add(*a));
        t
    }
}

struct CellSpec {
    experiment: String,
    generator: GeneratorKind,
    task: TaskKind,
    setting: String,
    strategy: String,
    mask: String,
    label: Option<String>,
}

type Builder<'a> = dyn Fn(SeedTree, &str) -> Vec<Result<BuildOutcome, TaskError>> + Sync + 'a;

fn metric_names(task: TaskKind, mode: JsdMode) -> Vec<&'static str> {
    match task {
        TaskKind::Discrimination => vec!["overlap"],
        TaskKind::Ranking => vec!["ndcg@5", "ndcg@10", "hr@3"],
        TaskKind::Rating => vec![
            "rmse",
            match mode {
                JsdMode::PerGroup => "jsd_per_group",
                JsdMode::Global => "jsd_global",
            },
        ],
    }
}

#[derive(Default)]
struct UserOutcome {
    records: Vec<DecisionRecord>,
    scores: Vec<(usize, TaskScore)>,
    accounting: Accounting,
    warnings: usize,
}

fn run_user(
    env: &Environment,
    spec: &CellSpec,
    profiles: Option<&ProfileSet>,
    build: &Builder<'_>,
    run: usize,
    run_seed: SeedTree,
    user: &str,
) -> UserOutcome {
    let mut out = UserOutcome::default();
    let ctx = RenderContext {
        items: &env.split.items,
        stats: &env.stats,
        scale: env.split.rating_scale,
        popularity: env.config.tasks.popularity,
        model: &env.model,
        domain: &env.config.domain,
    };
    let empty = empty_profile(user);
    for (k, built) in build(run_seed, user).into_iter().enumerate() {
        out.accounting.planned += 1;
        let instance = match built {
            Ok(BuildOutcome::Built(i)) => i,
            Ok(BuildOutcome::Skip(reason)) => {
                log::debug!("{user}: {reason}");
                out.accounting.skipped += 1;
                continue;
            }
            Err(e) => {
                log::warn!("{user}: instance construction failed: {e}");
                out.accounting.errors += 1;
                continue;
            }
        };
        let profile = match (spec.generator, profiles) {
            (GeneratorKind::Empty, _) => &empty,
            (_, Some(set)) => match set.get(user, spec.task) {
                Some(p) => p,
                None => {
                    out.accounting.skipped += 1;
                    continue;
                }
            },
            (_, None) => &empty,
        };
        out.warnings += usize::from(instance.sampler_warning.is_some());
        let outcome = run_task(profile, &instance, &ctx, &*env.executor, env.config.tasks.repair, env.config.backend.parse_attempts);
        let mut record = DecisionRecord::new(run, &instance, &outcome);
        match outcome.map_err(|e| e.to_string()).and_then(|d| score_decision(&instance, &d).map_err(|e| e.to_string())) {
            Ok(score) => {
                out.accounting.scored += 1;
                out.scores.push((k, score));
            }
            Err(message) => {
                out.accounting.errors += 1;
                record.error.get_or_insert(message);
            }
        }
        out.records.push(record);
    }
    out
}

fn run_metrics(task: TaskKind, mode: JsdMode, env: &Environment, users: &[(&str, UserOutcome)]) -> BTreeMap<&'static str, f64> {
    let names = metric_names(task, mode);
    let mut values = BTreeMap::new();
    let all: Vec<(&str, usize, &TaskScore)> =
        users.iter().flat_map(|(u, o)| o.scores.iter().map(move |(k, s)| (*u, *k, s))).collect();
    if all.is_empty() {
        return values;
    }
    let mean = |f: &dyn Fn(&TaskScore) -> f64| all.iter().map(|(_, _, s)| f(s)).sum::<f64>() / all.len() as f64;
    match task {
        TaskKind::Discrimination => {
            values.insert(names[0], mean(&|s| if let TaskScore::Overlap(v) = s { *v } else { 0.0 }));
        }
        TaskKind::Ranking => {
            let pick = |i: usize| {
                mean(&|s| match s {
                    TaskScore::Ranking { ndcg5, ndcg10, hr3 } => [*ndcg5, *ndcg10, *hr3][i],
                    _ => 0.0,
                })
            };
            for (i, name) in names.iter().enumerate() {
                values.insert(*name, pick(i));
            }
        }
        TaskKind::Rating => {
            // pooled per run so RMSE is micro-averaged over every rated item
            let mut preds = BTreeMap::new();
            let mut truths = BTreeMap::new();
            for (user, k, s) in &all {
                if let TaskScore::Rating { predictions, truths: t } = s {
                    for (item, v) in predictions {
                        preds.insert(format!("{user}/{k}/{item}"), *v);
                    }
                    for (item, v) in t {
                        truths.insert(format!("{user}/{k}/{item}"), *v);
                    }
                }
            }
            match (rmse(&preds, &truths), macro_rating_jsd(&preds, &truths, &env.split.rating_scale, mode)) {
                (Ok(r), Ok(j)) => {
                    values.insert(names[0], r);
                    values.insert(names[1], j);
                }
                (r, j) => log::warn!("rating metrics unavailable: {:?} {:?}", r.err(), j.err()),
            }
        }
    }
    values
}

fn evaluate_cell(
    env: &Environment,
    spec: CellSpec,
    profiles: Option<&ProfileSet>,
    build: &Builder<'_>,
) -> Result<(CellReport, Vec<DecisionRecord>), ExperimentError> {
    let mode = env.config.tasks.jsd_mode;
    let names = metric_names(spec.task, mode);
    let mut per_metric: BTreeMap<&str, Vec<f64>> = names.iter().map(|n| (*n, Vec::new())).collect();
    let mut accounting = Vec::new();
    let mut records = Vec::new();
    let mut warnings = 0;
    for run in 0..env.config.runs {
        let run_seed = SeedTree::new(env.config.seed).child_index("run", run as u64);
        let outcomes: Vec<(&str, UserOutcome)> = env.pool.install(|| {
            env.users.par_iter().map(|u| (u.as_str(), run_user(env, &spec, profiles, build, run, run_seed, u))).collect()
        });
        let mut acct = Accounting::default();
        for (_, o) in &outcomes {
            acct.add(o.accounting);
            warnings += o.warnings;
        }
        for (name, value) in run_metrics(spec.task, mode, env, &outcomes) {
            per_metric.get_mut(name).expect("known metric").push(value);
        }
        accounting.push(acct);
        records.extend(outcomes.into_iter().flat_map(|(_, o)| o.records));
    }
    let failures: usize = accounting.iter().map(|a| a.errors).sum();
    let metrics = names
        .iter()
        .filter_map(|name| {
            let values = &per_metric[name];
            aggregate_runs(name, values).ok().map(|mut r| {
                r.config_digest = env.digest.clone();
                r.failures = failures;
                r
            })
        })
        .collect();
    let report = CellReport {
        config_digest: env.digest.clone(),
        dataset: env.dataset_name().to_string(),
        experiment: spec.experiment,
        generator: spec.generator,
        task: spec.task,
        setting: spec.setting,
        strategy: spec.strategy,
        mask: spec.mask,
        label: spec.label,
        jsd_mode: (spec.task == TaskKind::Rating).then_some(mode),
        metrics,
        accounting,
        sampler_warnings: warnings,
    };
    Ok((report, records))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes report, decision log and plot rows for a batch of cells.
fn emit(env: &Environment, plot: &str, cells: Vec<(CellReport, Vec<DecisionRecord>)>) -> Result<Vec<CellReport>, ExperimentError> {
    let mut csv = String::from("experiment,dataset,generator,task,setting,strategy,mask,label,run,metric,value\n");
    let mut reports = Vec::new();
    let (mut scored, mut errors) = (0, 0);
    for (report, records) in cells {
        let id = report.id();
        let mut log = String::new();
        for r in &records {
            log.push_str(&serde_json::to_string(r).expect("record serializes"));
            log.push('\n');
        }
        write_file(&env.out.join("decisions").join(format!("{id}.ndjson")), log)?;
        write_json(&env.out.join("reports").join(format!("{id}.json")), &report)?;
        for m in &report.metrics {
            for (run, v) in m.per_run.iter().enumerate() {
                let fields = [
                    report.experiment.as_str(),
                    &report.dataset,
                    report.generator.as_str(),
                    report.task.as_str(),
                    &report.setting,
                    &report.strategy,
                    &report.mask,
                    report.label.as_deref().unwrap_or(""),
                ];
                let fields: Vec<String> = fields.iter().map(|f| csv_field(f)).collect();
                writeln!(csv, "{},{},{},{v}", fields.join(","), run + 1, csv_field(&m.metric)).unwrap();
            }
        }
        let total = report.total();
        scored += total.scored;
        errors += total.errors;
        reports.push(report);
    }
    write_file(&env.out.join("plots").join(format!("{plot}.csv")), csv)?;
    if scored == 0 && errors > 0 {
        return Err(ExperimentError::Backend(format!("all {errors} decisions failed; see the decision logs")));
    }
    Ok(reports)
}

fn instance_seed(run_seed: SeedTree, user: &str, label: &str, k: usize) -> SeedTree {
    run_seed.child(&format!("user:{user}")).child_index(label, k as u64)
}

fn family_settings(env: &Environment, family: TaskKind) -> Vec<(String, usize)> {
    let t = &env.config.tasks;
    match family {
        TaskKind::Discrimination => t.discrimination_positives.iter().map(|&p| (format!("{p}:{}", t.candidates), p)).collect(),
        TaskKind::Ranking => vec![(format!("1:{}", t.candidates), 1)],
        TaskKind::Rating => vec![(format!("n={}", t.rating_items), t.rating_items)],
    }
}

fn build_family(
    env: &Environment,
    family: TaskKind,
    p: usize,
    sampler: &SamplerSpec,
    mask: &AttributeMask,
    seed: SeedTree,
    user: &str,
) -> Result<BuildOutcome, TaskError> {
    let c = env.config.tasks.candidates;
    let built = match family {
        TaskKind::Discrimination => build_discrimination_instance(user, &env.split, &env.stats, p, c, sampler, seed)?,
        TaskKind::Ranking => build_ranking_instance(user, &env.split, &env.stats, c, sampler, seed)?,
        TaskKind::Rating => build_rating_instance(user, &env.split, p, seed)?,
    };
    Ok(match built {
        BuildOutcome::Built(i) => BuildOutcome::Built(i.with_mask(mask.clone())),
        skip => skip,
    })
}

fn family_cells(
    env: &Environment,
    experiment: &str,
    family: TaskKind,
    profiles: &ProfileSet,
    label: Option<String>,
) -> Result<Vec<(CellReport, Vec<DecisionRecord>)>, ExperimentError> {
    let generator = profiles.generator.unwrap_or(GeneratorKind::Empty);
    let t = &env.config.tasks;
    let samplers: Vec<&SamplerSpec> = if family == TaskKind::Rating { vec![&t.samplers[0]] } else { t.samplers.iter().collect() };
    let mut cells = Vec::new();
    for (setting, p) in family_settings(env, family) {
        for sampler in &samplers {
            for mask in &t.masks {
                let spec = CellSpec {
                    experiment: experiment.to_string(),
                    generator,
                    task: family,
                    setting: setting.clone(),
                    strategy: if family == TaskKind::Rating { "none".into() } else { sampler.label().into() },
                    mask: mask.label(),
                    label: label.clone(),
                };
                let seed_label = format!("{family}:{setting}");
                let build = |run_seed: SeedTree, user: &str| {
                    (0..t.instances_per_user)
                        .map(|k| build_family(env, family, p, sampler, mask, instance_seed(run_seed, user, &seed_label, k), user))
                        .collect()
                };
                cells.push(evaluate_cell(env, spec, Some(profiles), &build)?);
            }
        }
    }
    Ok(cells)
}

/// Runs one task family for every configured generator; profiles missing
/// from the store are generated first.
pub fn cmd_eval(env: &Environment, family: TaskKind) -> Result<Vec<CellReport>, ExperimentError> {
    let sets = load_profiles(env)?;
    let mut cells = Vec::new();
    for set in &sets {
        cells.extend(family_cells(env, "eval", family, set, None)?);
    }
    emit(env, &format!("eval-{family}"), cells)
}

pub fn cmd_probe(env: &Environment, probe: ProbeKind) -> Result<Vec<CellReport>, ExperimentError> {
    let cfg = &env.config;
    let t = &cfg.tasks;
    let mut cells = Vec::new();
    match probe {
        ProbeKind::Position => {
            let sampler = &t.samplers[0];
            let mask = &t.masks[0];
            for set in &load_profiles(env)? {
                for &position in &cfg.probes.positions {
                    let spec = CellSpec {
                        experiment: probe.as_str().into(),
                        generator: set.generator.unwrap_or(GeneratorKind::Empty),
                        task: TaskKind::Ranking,
                        setting: format!("1:{}", t.candidates),
                        strategy: sampler.label().into(),
                        mask: mask.label(),
                        label: Some(format!("position={position}")),
                    };
                    let build = |run_seed: SeedTree, user: &str| {
                        (0..t.instances_per_user)
                            .map(|k| {
                                let seed = instance_seed(run_seed, user, "position", k);
                                match build_family(env, TaskKind::Ranking, 1, sampler, mask, seed, user)? {
                                    BuildOutcome::Built(i) => {
                                        let mut v = position_probe(&i, &[position])?;
                                        Ok(BuildOutcome::Built(v.remove(0)))
                                    }
                                    skip => Ok(skip),
                                }
                            })
                            .collect()
                    };
                    cells.push(evaluate_cell(env, spec, Some(set), &build)?);
                }
            }
        }
        ProbeKind::Popularity => {
            let task_spec = cfg.probes.popularity_task;
            if task_spec.kind == TaskKind::Rating {
                return Err(ExperimentError::Config("the popularity probe needs a discrimination or ranking task".into()));
            }
            let mask = &t.masks[0];
            for set in &load_profiles(env)? {
                for strategy in &cfg.probes.popularity_strategies {
                    let spec = CellSpec {
                        experiment: probe.as_str().into(),
                        generator: set.generator.unwrap_or(GeneratorKind::Empty),
                        task: task_spec.kind,
                        setting: format!("{}:{}", task_spec.positives, task_spec.candidates),
                        strategy: strategy.label().into(),
                        mask: mask.label(),
                        label: None,
                    };
                    let build = |run_seed: SeedTree, user: &str| {
                        (0..t.instances_per_user)
                            .map(|k| {
                                let seed = instance_seed(run_seed, user, "popularity", k);
                                let mut sets =
                                    popularity_probe(user, &env.split, &env.stats, std::slice::from_ref(strategy), &task_spec, seed)?;
                                let labeled = sets.remove(0);
                                Ok(match labeled.instances.into_iter().next() {
                                    Some(i) => BuildOutcome::Built(i.with_mask(mask.clone())),
                                    None => BuildOutcome::Skip(labeled.skipped.join("; ")),
                                })
                            })
                            .collect()
                    };
                    cells.push(evaluate_cell(env, spec, Some(set), &build)?);
                }
            }
        }
        ProbeKind::Attributes => {
            let plan = attribute_probe_config(&cfg.probes.attribute_masks, &cfg.probes.attribute_samplings)
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            for cell in &plan.cells {
                let sampler = cell.sampling.sampler();
                let spec = CellSpec {
                    experiment: probe.as_str().into(),
                    generator: plan.generator,
                    task: TaskKind::Discrimination,
                    setting: format!("{}:{}", cell.positives, cell.candidates),
                    strategy: cell.sampling.as_str().into(),
                    mask: cell.mask.label(),
                    label: None,
                };
                // positives depend only on the setting, so every mask and sampling sees the same ones
                let seed_label = format!("attributes:{}:{}", cell.positives, cell.candidates);
                let build = |run_seed: SeedTree, user: &str| {
                    (0..t.instances_per_user)
                        .map(|k| {
                            let seed = instance_seed(run_seed, user, &seed_label, k);
                            let built = build_discrimination_instance(user, &env.split, &env.stats, cell.positives, cell.candidates, &sampler, seed)?;
                            Ok(match built {
                                BuildOutcome::Built(i) => BuildOutcome::Built(i.with_mask(cell.mask.clone())),
                                skip => skip,
                            })
                        })
                        .collect()
                };
                cells.push(evaluate_cell(env, spec, None, &build)?);
            }
        }
        ProbeKind::HistorySweep => {
            let p = cfg.probes.history_positives;
            let setting = format!("{p}:{}", t.candidates);
            let (sampler, mask) = (&t.samplers[0], &t.masks[0]);
            for &window in &cfg.probes.history_grid {
                let pipeline = GeneratorConfig { history_window: window, ..cfg.generator.pipeline.clone() };
                for &kind in &cfg.generator.kinds {
                    let (set, _) = generate_store(env, kind, &pipeline, &format!("{}-h{window}", kind.as_str()))?;
                    let spec = CellSpec {
                        experiment: probe.as_str().into(),
                        generator: kind,
                        task: TaskKind::Discrimination,
                        setting: setting.clone(),
                        strategy: sampler.label().into(),
                        mask: mask.label(),
                        label: Some(format!("window={window}")),
                    };
                    let seed_label = format!("history:{setting}");
                    let build = |run_seed: SeedTree, user: &str| {
                        (0..t.instances_per_user)
                            .map(|k| {
                                let seed = instance_seed(run_seed, user, &seed_label, k);
                                build_family(env, TaskKind::Discrimination, p, sampler, mask, seed, user)
                            })
                            .collect()
                    };
                    cells.push(evaluate_cell(env, spec, Some(&set), &build)?);
                }
            }
        }
    }
    emit(env, &format!("probe-{}", probe.as_str()), cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{DatasetKind, ExperimentConfig};

    fn env(dir: &std::path::Path) -> Environment {
        let mut config = ExperimentConfig::default();
        config.dataset.kind = DatasetKind::Synthetic;
        config.dataset.synthetic_users = 6;
        config.dataset.min_interactions = 5;
        config.runs = 2;
        config.generator.kinds = vec![GeneratorKind::RecentInteraction, GeneratorKind::Empty];
        Environment::open(config, dir).unwrap()
    }

    #[test]
    fn probe_names_round_trip() {
        for p in [ProbeKind::Position, ProbeKind::Popularity, ProbeKind::Attributes, ProbeKind::HistorySweep] {
            assert_eq!(p.as_str().parse::<ProbeKind>().unwrap(), p);
        }
        assert!("colour".parse::<ProbeKind>().is_err());
    }

    #[test]
    fn every_planned_instance_is_accounted_for() {
        let dir = tempfile::tempdir().unwrap();
        let env = env(dir.path());
        let cells = cmd_eval(&env, TaskKind::Discrimination).unwrap();
        // 2 generators x 3 settings x 1 sampler x 1 mask
        assert_eq!(cells.len(), 6);
        for c in &cells {
            assert_eq!(c.accounting.len(), 2);
            assert!(c.accounting.iter().all(|a| a.balanced() && a.planned == 6));
            assert_eq!(c.metrics[0].n_runs, 2);
            let log = std::fs::read_to_string(dir.path().join("decisions").join(format!("{}.ndjson", c.id()))).unwrap();
            assert_eq!(log.lines().count(), c.total().scored + c.total().errors);
        }
        // the same positives are shown to every generator
        let positives = |g: &str| {
            let log = std::fs::read_to_string(dir.path().join("decisions").join(format!("eval__{g}__discrimination__3-10__uniform__all.ndjson"))).unwrap();
            log.lines().map(|l| serde_json::from_str::<DecisionRecord>(l).unwrap().instance.positives).collect::<Vec<_>>()
        };
        assert_eq!(positives("recent_interaction"), positives("empty"));
    }

    #[test]
    fn history_sweep_builds_one_store_per_window() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = env(dir.path());
        e.config.probes.history_grid = vec![5, 10];
        e.config.runs = 1;
        let cells = cmd_probe(&e, ProbeKind::HistorySweep).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.task == TaskKind::Discrimination && c.setting == "3:10"));
        for w in [5, 10] {
            assert!(dir.path().join("profiles").join(format!("recent_interaction-h{w}.ndjson")).is_file());
        }
    }
}

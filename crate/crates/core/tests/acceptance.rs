//! Acceptance suite. Runs with a custom harness so every criterion prints one
//! PASS/FAIL line even when the suite succeeds. Tolerances are pinned below.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use tapsim::dataset::{chronological_split, parse_movielens, ItemStats, ParseMode};
use tapsim::experiment::{
    cmd_eval, cmd_generate_profiles, cmd_probe, cmd_report, CellReport, Environment, ExperimentConfig, ProbeKind,
};
use tapsim::llm::{ModelParams, PromptRequest, ScriptedBackend};
use tapsim::metrics::{hit_rate_at_k, jsd, macro_rating_jsd, ndcg_at_k, overlap_ratio, rmse, JsdMode, RatingScale};
use tapsim::profile::{
    counterfactual_map, empty_profile, CounterfactualOptions, CounterfactualOutcome, DecisionPath, GeneratorKind,
    ProfileError, TaskAlignedProfile, TraitDescriptor, TraitSource,
};
use tapsim::sampling::{debias_negatives, SamplerSpec};
use tapsim::tasks::{
    run_task, score_decision, AgentDecision, AgentRunner, AttributeMask, DecisionPayload, PopularityRendering,
    RenderContext, TaskError, TaskInstance, TaskKind, TaskScore,
};

const ORACLE_TOL: f64 = 1e-9;
const CLOSED_FORM_TOL: f64 = 1e-12;
const ORACLE_CASES: usize = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const PIPELINE_BUDGET: Duration = Duration::from_secs(60);
const SPLIT_BUDGET: Duration = Duration::from_secs(30);
const DEBIAS_TRIALS: usize = 500;
const DEBIAS_PASS_RATE: f64 = 0.95;
const LIVE_ERROR_CEILING: f64 = 0.20;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ml20")
}

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

// ---------------------------------------------------------------------------
// independent oracles

fn oracle_overlap(selected: &[String], positives: &[String]) -> f64 {
    let hits = positives.iter().filter(|p| selected.contains(p)).count();
    hits as f64 / positives.len() as f64
}

/// Graded DCG over binary relevance divided by the ideal DCG.
fn oracle_ndcg(permutation: &[String], positive: &str, k: usize) -> f64 {
    let rel: Vec<f64> = permutation.iter().map(|i| if i == positive { 1.0 } else { 0.0 }).collect();
    let dcg = |r: &[f64]| r.iter().take(k).enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum::<f64>();
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    dcg(&rel) / dcg(&ideal)
}

fn oracle_hr(permutation: &[String], positive: &str, k: usize) -> f64 {
    if permutation.iter().take(k).any(|i| i == positive) {
        1.0
    } else {
        0.0
    }
}

fn oracle_rmse(pairs: &[(f64, f64)]) -> f64 {
    (pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pairs.len() as f64).sqrt()
}

/// Natural-log KL terms rescaled to bits.
fn oracle_jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    (kl(p, &m) + kl(q, &m)) / (2.0 * std::f64::consts::LN_2)
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random::<f64>() }).collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        let mut v = vec![0.0; n];
        v[rng.random_range(0..n)] = 1.0;
        return v;
    }
    w.iter().map(|x| x / total).collect()
}

fn items(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i}")).collect()
}

// ---------------------------------------------------------------------------
// criteria

fn c1_metric_oracles() -> Result<String, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut track = |a: f64, b: f64, what: &str| -> Result<(), String> {
        let d = (a - b).abs();
        worst = worst.max(d);
        check(d <= ORACLE_TOL, format!("{what}: {a} vs oracle {b}"))
    };
    for _ in 0..ORACLE_CASES {
        // overlap
        let c = rng.random_range(1..=10);
        let pool = items(c);
        let p = rng.random_range(1..=c);
        let positives: Vec<String> = pool.choose_multiple(&mut rng, p).cloned().collect();
        let s = rng.random_range(0..=c);
        let selected: Vec<String> = pool.choose_multiple(&mut rng, s).cloned().collect();
        let got = overlap_ratio(&selected.iter().cloned().collect(), &positives.iter().cloned().collect()).map_err(|e| e.to_string())?;
        track(got, oracle_overlap(&selected, &positives), "overlap")?;

        // ndcg / hr
        let mut perm = items(rng.random_range(1..=10));
        perm.shuffle(&mut rng);
        let positive = perm.choose(&mut rng).unwrap().clone();
        let k = rng.random_range(1..=10);
        track(ndcg_at_k(&perm, &positive, k).map_err(|e| e.to_string())?, oracle_ndcg(&perm, &positive, k), "ndcg")?;
        track(hit_rate_at_k(&perm, &positive, k).map_err(|e| e.to_string())?, oracle_hr(&perm, &positive, k), "hr")?;

        // rmse
        let n = rng.random_range(1..=10);
        let pairs: Vec<(f64, f64)> =
            (0..n).map(|_| (rng.random_range(1..=5) as f64, rng.random_range(1..=5) as f64)).collect();
        let preds = pairs.iter().enumerate().map(|(i, (p, _))| (format!("i{i}"), *p)).collect();
        let truths = pairs.iter().enumerate().map(|(i, (_, t))| (format!("i{i}"), *t)).collect();
        track(rmse(&preds, &truths).map_err(|e| e.to_string())?, oracle_rmse(&pairs), "rmse")?;

        // jsd over the five rating levels
        let (p, q) = (random_distribution(&mut rng, 5), random_distribution(&mut rng, 5));
        track(jsd(&p, &q).map_err(|e| e.to_string())?, oracle_jsd(&p, &q), "jsd")?;
    }
    let elapsed = started.elapsed();
    check(elapsed < ORACLE_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("5 kernels x {ORACLE_CASES} cases, max |diff| {worst:.1e}, {:.2}s", elapsed.as_secs_f64()))
}

fn c2_closed_form_ndcg() -> Result<String, String> {
    let perm = items(10);
    for r in 1..=10 {
        for k in [5, 10] {
            let expected = if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 };
            let got = ndcg_at_k(&perm, &perm[r - 1], k).map_err(|e| e.to_string())?;
            check((got - expected).abs() <= CLOSED_FORM_TOL, format!("r={r} k={k}: {got} vs {expected}"))?;
        }
    }
    Ok("20 (rank, k) pairs exact".into())
}

fn c3_jsd_boundaries() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let p = random_distribution(&mut rng, 5);
        let v = jsd(&p, &p).map_err(|e| e.to_string())?;
        check(v == 0.0, format!("jsd(p, p) = {v}"))?;
    }
    for a in 0..5 {
        for b in (0..5).filter(|b| *b != a) {
            let (mut p, mut q) = (vec![0.0; 5], vec![0.0; 5]);
            p[a] = 1.0;
            q[b] = 1.0;
            let v = jsd(&p, &q).map_err(|e| e.to_string())?;
            check((v - 1.0).abs() <= CLOSED_FORM_TOL, format!("disjoint masses gave {v}"))?;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let n = rng.random_range(2..=8);
        let (p, q) = (random_distribution(&mut rng, n), random_distribution(&mut rng, n));
        let d = (jsd(&p, &q).unwrap() - jsd(&q, &p).unwrap()).abs();
        worst = worst.max(d);
        check(d <= CLOSED_FORM_TOL, format!("asymmetry {d}"))?;
    }
    let hand = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    check((hand - 0.311_278_124_459_132_8).abs() <= CLOSED_FORM_TOL, format!("p=(1,0) q=(.5,.5) gave {hand}"))?;
    Ok(format!("identity exact, disjoint = 1, symmetry max |diff| {worst:.1e}"))
}

fn fixture_config(extra: &str) -> ExperimentConfig {
    let dir = fixture_dir();
    let text = format!(
        "seed = 11\n{extra}\n[dataset]\nkind = \"movielens\"\nratings = {:?}\nmovies = {:?}\n",
        dir.join("ratings.dat"),
        dir.join("movies.dat")
    );
    ExperimentConfig::from_toml(&text).expect("fixture config parses")
}

fn pipeline_config() -> ExperimentConfig {
    let mut c = fixture_config("");
    c.backend.responder = Some("synthetic".into());
    c.generator.kinds = vec![GeneratorKind::TaskAligned];
    c
}

fn run_pipeline(config: ExperimentConfig, out: &Path) -> Result<Vec<CellReport>, String> {
    let env = Environment::open(config, out).map_err(|e| e.to_string())?;
    cmd_generate_profiles(&env).map_err(|e| e.to_string())?;
    let mut cells = Vec::new();
    for family in [TaskKind::Discrimination, TaskKind::Ranking, TaskKind::Rating] {
        cells.extend(cmd_eval(&env, family).map_err(|e| e.to_string())?);
    }
    cmd_report(out).map_err(|e| e.to_string())?;
    Ok(cells)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn c4_deterministic_pipeline() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut times = Vec::new();
    let mut cells = Vec::new();
    for out in [&a, &b] {
        let started = Instant::now();
        cells = run_pipeline(pipeline_config(), out)?;
        times.push(started.elapsed());
    }
    let (ta, tb) = (tree(&a), tree(&b));
    check(!ta.is_empty() && ta.keys().eq(tb.keys()), "output trees list different files")?;
    for (path, bytes) in &ta {
        check(tb[path] == *bytes, format!("{} differs", path.display()))?;
    }
    let families: BTreeSet<TaskKind> = cells.iter().map(|c| c.task).collect();
    check(families.len() == 3, "not every task family produced reports")?;
    let scored: usize = cells.iter().map(|c| c.total().scored).sum();
    check(scored > 0, "no instance was scored")?;
    check(times.iter().all(|t| *t < PIPELINE_BUDGET), format!("runtimes {times:?}"))?;
    Ok(format!(
        "{} files identical across two runs, {} cells, {:.1}s + {:.1}s",
        ta.len(),
        cells.len(),
        times[0].as_secs_f64(),
        times[1].as_secs_f64()
    ))
}

// --- counterfactual suite

/// Scripted agent whose output depends only on which negated traits are in
/// the profile and which probe it sees.
///
/// Trait grammar (original form; the perturbation prefixes `not `):
/// `flip@J` changes the selection on probe J, `swap@J` swaps the top two of
/// the order on probe J, `shift=D@J` moves every rating by D on probe J;
/// `J = *` means every probe.
struct RuleAgent;

fn probe_index(instance: &TaskInstance) -> usize {
    instance.candidates[0].trim_start_matches('p').split('-').next().unwrap().parse().unwrap()
}

fn negated(profile: &TaskAlignedProfile, rule: &str, probe: usize) -> Vec<String> {
    profile
        .traits
        .iter()
        .filter_map(|t| t.text.strip_prefix("not "))
        .filter_map(|t| {
            let (head, at) = t.split_once('@')?;
            (head.starts_with(rule) && (at == "*" || at == probe.to_string())).then(|| head.to_string())
        })
        .collect()
}

impl AgentRunner for RuleAgent {
    fn run(&self, profile: &TaskAlignedProfile, instance: &TaskInstance) -> Result<AgentDecision, TaskError> {
        let j = probe_index(instance);
        let c = &instance.candidates;
        let payload = match instance.kind {
            TaskKind::Discrimination => {
                let pick = if negated(profile, "flip", j).is_empty() { 0 } else { 1 };
                DecisionPayload::Selection(BTreeSet::from([c[pick].clone()]))
            }
            TaskKind::Ranking => {
                let mut order = c.clone();
                if !negated(profile, "swap", j).is_empty() {
                    order.swap(0, 1);
                }
                DecisionPayload::Ranking(order)
            }
            TaskKind::Rating => {
                let shift: f64 = negated(profile, "shift=", j).iter().map(|h| h["shift=".len()..].parse::<f64>().unwrap()).sum();
                DecisionPayload::Ratings(c.iter().map(|i| (i.clone(), 3.0 + shift)).collect())
            }
        };
        Ok(AgentDecision { payload, raw_response: String::new(), repair_applied: false, attempts: 1 })
    }
}

fn probes(kind: TaskKind) -> Vec<TaskInstance> {
    (0..3)
        .map(|j| {
            let candidates: Vec<String> = (0..4).map(|i| format!("p{j}-c{i}")).collect();
            TaskInstance {
                kind,
                user_id: "u".into(),
                positives: BTreeSet::from([candidates[0].clone()]),
                presentation_order: (0..candidates.len()).collect(),
                truths: if kind == TaskKind::Rating { candidates.iter().map(|c| (c.clone(), 3.0)).collect() } else { BTreeMap::new() },
                candidates,
                attribute_mask: AttributeMask::full(),
                instance_seed: j as u64,
                label: None,
                sampler_warning: None,
            }
        })
        .collect()
}

fn map_traits(kind: TaskKind, traits: &[&str]) -> Result<CounterfactualOutcome, String> {
    let mut base = TaskAlignedProfile::new("u", GeneratorKind::TaskAligned, Some(kind));
    base.traits = traits.iter().map(|t| TraitDescriptor::new(*t, TraitSource::Consolidated)).collect();
    let perturb = |_: usize, t: &TraitDescriptor| -> Result<TraitDescriptor, ProfileError> {
        if t.text == "unperturbable" {
            return Err(ProfileError::Stage { stage: 3, message: "no counterfactual phrasing".into() });
        }
        Ok(TraitDescriptor { text: format!("not {}", t.text), ..t.clone() })
    };
    let path = DecisionPath::heuristic(kind);
    counterfactual_map(&base, &path, &probes(kind), &RuleAgent, &perturb, &CounterfactualOptions::default()).map_err(|e| e.to_string())
}

fn steps(kind: TaskKind, idx: &[usize]) -> BTreeSet<String> {
    let path = DecisionPath::heuristic(kind);
    idx.iter().map(|&i| path.steps[i].id.clone()).collect()
}

fn bound_steps(out: &CounterfactualOutcome, text: &str) -> Option<BTreeSet<String>> {
    out.bindings.iter().find(|b| b.descriptor.text == text).map(|b| b.step_ids.clone())
}

fn is_background(out: &CounterfactualOutcome, text: &str) -> bool {
    out.background.iter().any(|t| t.text == text) && bound_steps(out, text).is_none()
}

fn c5_counterfactual_mapping() -> Result<String, String> {
    use TaskKind::*;
    type Case = (&'static str, TaskKind, Vec<&'static str>, Box<dyn Fn(&CounterfactualOutcome) -> bool>);
    let cases: Vec<Case> = vec![
        ("selection flip bound to first step", Discrimination, vec!["flip@0"], Box::new(|o| bound_steps(o, "flip@0") == Some(steps(Discrimination, &[0])))),
        ("selection flip bound to last step", Discrimination, vec!["flip@2"], Box::new(|o| bound_steps(o, "flip@2") == Some(steps(Discrimination, &[2])))),
        (
            "flip bound, inert trait demoted",
            Discrimination,
            vec!["flip@1", "likes long titles"],
            Box::new(|o| bound_steps(o, "flip@1") == Some(steps(Discrimination, &[1])) && is_background(o, "likes long titles")),
        ),
        ("order swap bound to its step", Ranking, vec!["swap@1"], Box::new(|o| bound_steps(o, "swap@1") == Some(steps(Ranking, &[1])))),
        ("inert ranking trait demoted", Ranking, vec!["enjoys sequels"], Box::new(|o| is_background(o, "enjoys sequels") && o.bindings.is_empty())),
        ("rating shift 1.0 bound", Rating, vec!["shift=1.0@0"], Box::new(|o| bound_steps(o, "shift=1.0@0") == Some(steps(Rating, &[0])))),
        ("rating shift 0.4 unbound", Rating, vec!["shift=0.4@*"], Box::new(|o| o.bindings.is_empty() && is_background(o, "shift=0.4@*"))),
        ("rating shift at threshold unbound", Rating, vec!["shift=0.5@*"], Box::new(|o| o.bindings.is_empty() && is_background(o, "shift=0.5@*"))),
        ("downward shift bound on every step", Rating, vec!["shift=-1.0@*"], Box::new(|o| bound_steps(o, "shift=-1.0@*") == Some(steps(Rating, &[0, 1, 2])))),
        (
            "failed perturbation stays active",
            Discrimination,
            vec!["unperturbable", "flip@0"],
            Box::new(|o| {
                o.active.iter().any(|t| t.text == "unperturbable")
                    && bound_steps(o, "unperturbable").is_none()
                    && o.notes.iter().any(|n| n.contains("unperturbable"))
            }),
        ),
    ];
    let mut failed = Vec::new();
    for (name, kind, traits, ok) in &cases {
        let outcome = map_traits(*kind, traits)?;
        let partition = outcome.active.len() + outcome.background.len() == traits.len();
        if !(ok(&outcome) && partition) {
            failed.push(*name);
        }
    }
    check(failed.is_empty(), format!("failed: {failed:?}"))?;
    Ok(format!("{}/{} cases", cases.len(), cases.len()))
}

fn c6_split_fidelity() -> Result<String, String> {
    let started = Instant::now();
    let (dir, source) = match std::env::var_os("TAPSIM_ML1M_DIR") {
        Some(d) => (PathBuf::from(d), "ML-1M"),
        None => (fixture_dir(), "bundled fixture"),
    };
    let (ratings, movies) = (dir.join("ratings.dat"), dir.join("movies.dat"));
    let (ds, _) = parse_movielens(&ratings, &movies, ParseMode::Strict).map_err(|e| e.to_string())?;
    let split = chronological_split(&ds, 0.8, 2).map_err(|e| e.to_string())?;

    // raw file order per user, read without the library
    let bytes = std::fs::read(&ratings).map_err(|e| e.to_string())?;
    let mut history: BTreeMap<String, Vec<(i64, String)>> = BTreeMap::new();
    for line in String::from_utf8_lossy(&bytes).lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split("::").collect();
        history.entry(f[0].to_string()).or_default().push((f[3].trim().parse().unwrap(), f[1].to_string()));
    }
    let mut checked = 0;
    for (user, events) in &mut history {
        events.sort_by_key(|e| e.0); // stable: ties keep file order
        let n = events.len();
        if n < 2 {
            check(split.train(user).is_empty(), format!("user {user} with {n} events kept"))?;
            continue;
        }
        let expected_train = (n * 4 / 5).max(1);
        let train: Vec<(i64, String)> = split.train(user).iter().map(|i| (i.timestamp, i.item_id.clone())).collect();
        let test: Vec<(i64, String)> = split.test(user).iter().map(|i| (i.timestamp, i.item_id.clone())).collect();
        check(train.len() == expected_train, format!("user {user}: {} train, expected {expected_train}", train.len()))?;
        check(train[..] == events[..expected_train], format!("user {user}: train is not the time-ordered prefix"))?;
        check(test[..] == events[expected_train..], format!("user {user}: test is not the remainder"))?;
        let max_train = train.iter().map(|e| e.0).max().unwrap();
        check(test.iter().all(|e| e.0 >= max_train), format!("user {user}: test precedes train"))?;
        checked += 1;
    }
    let elapsed = started.elapsed();
    check(elapsed < SPLIT_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("{checked} users on the {source}, {:.2}s", elapsed.as_secs_f64()))
}

fn zipf_stats(n: usize, rng: &mut ChaCha8Rng) -> ItemStats {
    let mut stats = ItemStats::default();
    for k in 1..=n {
        let id = format!("z{k}");
        let pop = (50_000.0 / (k as f64).powf(1.1)).floor().max(1.0) as u64;
        // popular items rate slightly higher, with item-level noise
        let rating = (3.2 + 0.4 * (pop as f64).ln() / 10.0 + rng.random_range(-1.2..1.2)).clamp(1.0, 5.0);
        stats.popularity.insert(id.clone(), pop);
        stats.mean_rating.insert(id, rating);
    }
    stats.global_mean_rating = stats.mean_rating.values().sum::<f64>() / n as f64;
    stats
}

fn oracle_means(items: &[String], stats: &ItemStats) -> (f64, f64) {
    let n = items.len() as f64;
    (
        items.iter().map(|i| stats.popularity[i] as f64).sum::<f64>() / n,
        items.iter().map(|i| stats.mean_rating[i]).sum::<f64>() / n,
    )
}

/// Runs `DEBIAS_TRIALS` draws of three positives and seven negatives.
/// Returns (matched, provably infeasible). A trial is infeasible when even
/// the seven most (or least) popular remaining items miss the popularity band.
fn debias_trials(stats: &ItemStats, ids: &[String], exposure: bool, rng: &mut ChaCha8Rng) -> Result<(usize, usize), String> {
    let weights = WeightedIndex::new(ids.iter().map(|i| stats.popularity[i] as f64)).unwrap();
    let spec = SamplerSpec::debias();
    let mut by_pop: Vec<&String> = ids.iter().collect();
    by_pop.sort_by_key(|i| std::cmp::Reverse(stats.popularity[*i]));
    let (mut matched, mut infeasible) = (0, 0);
    for _ in 0..DEBIAS_TRIALS {
        let mut positives = BTreeSet::new();
        while positives.len() < 3 {
            let idx = if exposure { weights.sample(rng) } else { rng.random_range(0..ids.len()) };
            positives.insert(ids[idx].clone());
        }
        let positives: Vec<String> = positives.into_iter().collect();
        let universe: Vec<String> = ids.iter().filter(|i| !positives.contains(i)).cloned().collect();
        let (tp, tr) = oracle_means(&positives, stats);
        let rest: Vec<f64> = by_pop.iter().filter(|i| !positives.contains(i)).map(|i| stats.popularity[*i] as f64).collect();
        let top = rest[..7].iter().sum::<f64>() / 7.0;
        let bottom = rest[rest.len() - 7..].iter().sum::<f64>() / 7.0;
        if top < 0.9 * tp || bottom > 1.1 * tp {
            infeasible += 1;
        }
        let out = debias_negatives(&positives, &universe, stats, 7, &spec, rng).map_err(|e| e.to_string())?;
        check(out.items.len() == 7 && out.items.iter().all(|i| !positives.contains(i)), "bad negative set")?;
        if out.warning.is_some() {
            continue;
        }
        let (np, nr) = oracle_means(&out.items, stats);
        let ok = (np - tp).abs() <= 0.10 * tp + 1e-9 && (nr - tr).abs() <= 0.25 + 1e-9;
        check(ok, format!("accepted output out of tolerance: pop {np:.2} vs {tp:.2}, rating {nr:.3} vs {tr:.3}"))?;
        matched += 1;
    }
    Ok((matched, infeasible))
}

fn c7_debias_contract() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stats = zipf_stats(5000, &mut rng);
    let ids: Vec<String> = stats.popularity.keys().cloned().collect();

    let (uniform, _) = debias_trials(&stats, &ids, false, &mut rng)?;
    check(
        uniform as f64 >= DEBIAS_PASS_RATE * DEBIAS_TRIALS as f64,
        format!("catalogue-drawn positives: only {uniform}/{DEBIAS_TRIALS} matched"),
    )?;
    // exposure-drawn positives often include the head item, whose mean no
    // seven remaining items can reach; those trials are excluded, not passed
    let (weighted, infeasible) = debias_trials(&stats, &ids, true, &mut rng)?;
    let feasible = DEBIAS_TRIALS - infeasible;
    check(
        weighted as f64 >= DEBIAS_PASS_RATE * feasible as f64,
        format!("exposure-drawn positives: only {weighted}/{feasible} feasible trials matched"),
    )?;

    // adversarial: nothing in the universe resembles the positives
    let spec = SamplerSpec::debias();
    let mut tiny = ItemStats::default();
    for (id, pop, r) in [("hit1", 900, 4.9), ("hit2", 1000, 5.0)] {
        tiny.popularity.insert(id.into(), pop);
        tiny.mean_rating.insert(id.into(), r);
    }
    let universe: Vec<String> = (0..8).map(|i| format!("cold{i}")).collect();
    for id in &universe {
        tiny.popularity.insert(id.clone(), 1);
        tiny.mean_rating.insert(id.clone(), 1.5);
    }
    let positives = vec!["hit1".to_string(), "hit2".to_string()];
    let fallback = debias_negatives(&positives, &universe, &tiny, 5, &spec, &mut rng).map_err(|e| e.to_string())?;
    check(fallback.warning.is_some() && fallback.items.len() == 5, "adversarial universe did not warn")?;
    let strict = SamplerSpec { strict: true, ..SamplerSpec::debias() };
    check(debias_negatives(&positives, &universe, &tiny, 5, &strict, &mut rng).is_err(), "strict mode accepted a bad draw")?;
    Ok(format!(
        "catalogue-drawn {uniform}/{DEBIAS_TRIALS}; exposure-drawn {weighted}/{feasible} feasible ({infeasible} provably infeasible); adversarial case warns, strict errors"
    ))
}

fn c8_attribute_probe() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = fixture_config("runs = 1");
    let env = Environment::open(config, tmp.path()).map_err(|e| e.to_string())?;
    let cells = cmd_probe(&env, ProbeKind::Attributes).map_err(|e| e.to_string())?;
    let on_disk = std::fs::read_dir(tmp.path().join("reports")).unwrap().count();
    check(cells.len() == 28 && on_disk == 28, format!("{} cells, {on_disk} report files", cells.len()))?;
    check(cells.iter().all(|c| c.generator == GeneratorKind::Empty && c.task == TaskKind::Discrimination), "non-empty profile or wrong task")?;
    let masks = ["title", "genre", "rating", "popularity", "title+genre", "rating+popularity", "all"];
    let mut expected = BTreeSet::new();
    for m in masks {
        for s in ["random", "debias"] {
            for setting in ["3:10", "3:6"] {
                expected.insert((m.to_string(), s.to_string(), setting.to_string()));
            }
        }
    }
    let got: BTreeSet<(String, String, String)> = cells.iter().map(|c| (c.mask.clone(), c.strategy.clone(), c.setting.clone())).collect();
    check(got == expected, format!("grid mismatch: {:?}", got.symmetric_difference(&expected).collect::<Vec<_>>()))?;
    Ok("28 cells = 7 masks x {random, debias} x {3:10, 3:6}, empty profiles".into())
}

fn constant_four(req: &PromptRequest) -> Option<String> {
    let ids: Vec<&str> = req
        .user_message
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix("- ["))
        .filter_map(|l| l.split_once(']').map(|(id, _)| id))
        .collect();
    let map: BTreeMap<&str, u8> = ids.into_iter().map(|id| (id, 4)).collect();
    Some(serde_json::to_string(&map).unwrap())
}

fn c9_degenerate_rating() -> Result<String, String> {
    let dir = fixture_dir();
    let (ds, _) = parse_movielens(&dir.join("ratings.dat"), &dir.join("movies.dat"), ParseMode::Strict).map_err(|e| e.to_string())?;
    let split = chronological_split(&ds, 0.8, 2).map_err(|e| e.to_string())?;
    let stats = tapsim::dataset::compute_item_stats(&split);
    let model = ModelParams::default();
    let ctx = RenderContext {
        items: &split.items,
        stats: &stats,
        scale: RatingScale::ONE_TO_FIVE,
        popularity: PopularityRendering::default(),
        model: &model,
        domain: "movie",
    };
    let backend = ScriptedBackend::from_responder(constant_four);
    let catalogue: Vec<&String> = split.items.keys().collect();
    let (mut preds, mut truths) = (BTreeMap::new(), BTreeMap::new());
    // 20 instances of 5 items, truths uniform over 1..5
    for u in 0..20 {
        let candidates: Vec<String> = (0..5).map(|i| catalogue[u * 5 + i].clone()).collect();
        let instance = TaskInstance {
            kind: TaskKind::Rating,
            user_id: format!("u{u}"),
            positives: BTreeSet::new(),
            presentation_order: (0..5).collect(),
            truths: candidates.iter().enumerate().map(|(i, c)| (c.clone(), (i + 1) as f64)).collect(),
            candidates,
            attribute_mask: AttributeMask::full(),
            instance_seed: u as u64,
            label: None,
            sampler_warning: None,
        };
        let decision = run_task(&empty_profile(&instance.user_id), &instance, &ctx, &backend, true, 3).map_err(|e| e.to_string())?;
        let Ok(TaskScore::Rating { predictions, truths: t }) = score_decision(&instance, &decision) else {
            return Err("rating decision did not score".into());
        };
        preds.extend(predictions.into_iter().map(|(k, v)| (format!("u{u}/{k}"), v)));
        truths.extend(t.into_iter().map(|(k, v)| (format!("u{u}/{k}"), v)));
    }
    check(preds.values().all(|v| *v == 4.0), "agent output was not constant 4")?;
    let r = rmse(&preds, &truths).map_err(|e| e.to_string())?;
    let j = macro_rating_jsd(&preds, &truths, &RatingScale::ONE_TO_FIVE, JsdMode::PerGroup).map_err(|e| e.to_string())?;
    check((r - 3f64.sqrt()).abs() <= ORACLE_TOL, format!("rmse {r}"))?;
    check((j - 0.8).abs() <= ORACLE_TOL, format!("per-group jsd {j}"))?;
    Ok(format!("rmse {r:.10} (sqrt 3), per-group jsd {j:.10} (0.8)"))
}

fn c10_replay_closure() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = tmp.path().join("cache.ndjson");
    let replay_config = |mode: &str| {
        let mut c = pipeline_config();
        c.runs = 2;
        c.backend.apply_override(&format!("replay:{mode}")).unwrap();
        c.backend.cache = Some(cache.clone());
        c.backend.upstream = tapsim::experiment::BackendChoice::Scripted;
        c
    };
    let eval = |config: ExperimentConfig, out: &Path| -> Result<Vec<CellReport>, String> {
        let env = Environment::open(config, out).map_err(|e| e.to_string())?;
        cmd_eval(&env, TaskKind::Discrimination).map_err(|e| e.to_string())
    };
    let (rec, rep) = (tmp.path().join("record"), tmp.path().join("replay"));
    let recorded = eval(replay_config("record"), &rec)?;
    let entries = std::fs::read_to_string(&cache).map_err(|e| e.to_string())?.lines().count();
    // strict mode: an unreachable live upstream proves nothing is forwarded
    let mut strict = replay_config("strict");
    strict.backend.upstream = tapsim::experiment::BackendChoice::Live;
    strict.backend.base_url = "http://127.0.0.1:9".into();
    let replayed = eval(strict, &rep)?;
    let errors: usize = replayed.iter().map(|c| c.total().errors).sum();
    check(errors == 0, format!("{errors} decisions failed under strict replay"))?;
    check(recorded == replayed, "reports differ")?;
    for sub in ["reports", "decisions", "plots"] {
        check(tree(&rec.join(sub)) == tree(&rep.join(sub)), format!("{sub}/ differs"))?;
    }
    Ok(format!("{} cells identical from {entries} cached responses, 0 forwarded", replayed.len()))
}

fn c11_live_smoke() -> Result<Option<String>, String> {
    let (Some(url), Some(ml)) = (std::env::var_os("TAPSIM_LIVE_BASE_URL"), std::env::var_os("TAPSIM_ML1M_DIR")) else {
        return Ok(None);
    };
    let dir = PathBuf::from(ml);
    let text = format!(
        "runs = 1\n[dataset]\nkind = \"movielens\"\nratings = {:?}\nmovies = {:?}\nmax_users = 5\n\
         [backend]\nkind = \"live\"\nbase_url = {:?}\nmodel_id = {:?}\n\
         [generator]\nkinds = [\"task_aligned\"]\n[tasks]\nfamilies = [\"discrimination\"]\ndiscrimination_positives = [3]\n",
        dir.join("ratings.dat"),
        dir.join("movies.dat"),
        url.to_string_lossy(),
        std::env::var("TAPSIM_LIVE_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into()),
    );
    let config = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let env = Environment::open(config, tmp.path()).map_err(|e| e.to_string())?;
    let cells = cmd_eval(&env, TaskKind::Discrimination).map_err(|e| e.to_string())?;
    let (planned, errors) = cells.iter().fold((0, 0), |(p, e), c| (p + c.total().planned, e + c.total().errors));
    let rate = errors as f64 / planned.max(1) as f64;
    check(rate < LIVE_ERROR_CEILING, format!("{errors}/{planned} decisions failed"))?;
    Ok(Some(format!("{errors}/{planned} decision errors")))
}

type Criterion = (&'static str, &'static str, fn() -> Result<String, String>);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1", "metric oracle equivalence", c1_metric_oracles),
        ("2", "closed-form nDCG", c2_closed_form_ndcg),
        ("3", "JSD boundaries and symmetry", c3_jsd_boundaries),
        ("4", "deterministic end-to-end pipeline", c4_deterministic_pipeline),
        ("5", "counterfactual mapping suite", c5_counterfactual_mapping),
        ("6", "chronological split fidelity", c6_split_fidelity),
        ("7", "de-bias sampler contract", c7_debias_contract),
        ("8", "attribute probe grid", c8_attribute_probe),
        ("9", "degenerate constant rating agent", c9_degenerate_rating),
        ("10", "replay closure", c10_replay_closure),
    ];
    let mut failures = 0;
    for (id, name, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("acceptance {id:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("acceptance {id:>2} FAIL  {name}: {why}");
            }
        }
    }
    match catch_unwind(c11_live_smoke) {
        Ok(Ok(Some(detail))) => println!("acceptance 11 PASS  live smoke test: {detail}"),
        Ok(Ok(None)) => println!("acceptance 11 SKIP  live smoke test: set TAPSIM_LIVE_BASE_URL and TAPSIM_ML1M_DIR to run"),
        Ok(Err(why)) => {
            failures += 1;
            println!("acceptance 11 FAIL  live smoke test: {why}");
        }
        Err(_) => {
            failures += 1;
            println!("acceptance 11 FAIL  live smoke test: panicked");
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

//! Synthetic data and a rule-based stand-in for the LLM.
//!
//! [`synthetic_dataset`] draws users with latent genre tastes over a
//! Zipf-popular catalogue. [`SyntheticResponder`] answers every prompt tag
//! the pipeline emits by reading the rendered prompt back, so offline runs
//! exercise the whole harness and still react to profile content.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Interaction, Item};
use crate::llm::{PromptRequest, Responder};
use crate::metrics::RatingScale;
use crate::seed::SeedTree;

pub const GENRES: [&str; 18] = [
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir",
    "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub min_history: usize,
    pub max_history: usize,
    /// Zipf exponent of item popularity.
    pub zipf: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { users: 20, items: 200, min_history: 20, max_history: 40, zipf: 1.1 }
    }
}

/// A MovieLens-shaped dataset with latent genre tastes.
pub fn synthetic_dataset(spec: &SyntheticSpec, seed: SeedTree) -> Dataset {
    let mut rng = seed.child("items").rng();
    let mut items = BTreeMap::new();
    for i in 1..=spec.items {
        let n = rng.random_range(1..=3);
        let mut genres: Vec<&str> = GENRES.choose_multiple(&mut rng, n).copied().collect();
        genres.sort_unstable();
        let year = rng.random_range(1930..=2000);
        let id = i.to_string();
        items.insert(
            id.clone(),
            Item {
                item_id: id,
                title: format!("Synthetic Feature {i} ({year})"),
                genres: genres.into_iter().map(String::from).collect(),
                extra: BTreeMap::new(),
                placeholder: false,
            },
        );
    }
    // popularity rank follows a shuffled id order
    let mut ranked: Vec<&Item> = items.values().collect();
    ranked.shuffle(&mut rng);
    let pop_weight: BTreeMap<&str, f64> =
        ranked.iter().enumerate().map(|(r, it)| (it.item_id.as_str(), 1.0 / ((r + 1) as f64).powf(spec.zipf))).collect();

    let noise = Normal::new(0.0, 0.6).expect("valid normal");
    let mut interactions = Vec::new();
    for u in 1..=spec.users {
        let mut rng = seed.child_index("user", u as u64).rng();
        let mut pool: Vec<&str> = GENRES.to_vec();
        pool.shuffle(&mut rng);
        let liked: BTreeSet<&str> = pool[..2].iter().copied().collect();
        let disliked = pool[2];
        let bias: f64 = rng.random_range(-0.5..0.5);
        let len = rng.random_range(spec.min_history..=spec.max_history).min(spec.items);
        let mut remaining: Vec<(&Item, f64)> = items
            .values()
            .map(|it| {
                let mut w = pop_weight[it.item_id.as_str()];
                if it.genres.iter().any(|g| liked.contains(g.as_str())) {
                    w *= 3.0;
                }
                if it.genres.iter().any(|g| g == disliked) {
                    w *= 0.3;
                }
                (it, w)
            })
            .collect();
        let start = 978_300_000 + (u as i64) * 100_000;
        for j in 0..len {
            let total: f64 = remaining.iter().map(|(_, w)| w).sum();
            let mut x = rng.random_range(0.0..total);
            let mut pick = remaining.len() - 1;
            for (idx, (_, w)) in remaining.iter().enumerate() {
                if x < *w {
                    pick = idx;
                    break;
                }
                x -= w;
            }
            let (item, _) = remaining.swap_remove(pick);
            let mut r = 3.4 + bias + noise.sample(&mut rng);
            if item.genres.iter().any(|g| liked.contains(g.as_str())) {
                r += 1.0;
            }
            if item.genres.iter().any(|g| g == disliked) {
                r -= 1.5;
            }
            interactions.push(Interaction {
                user_id: u.to_string(),
                item_id: item.item_id.clone(),
                rating: RatingScale::ONE_TO_FIVE.clamp(r.round()),
                timestamp: start + (j as i64) * 600,
                review_text: None,
            });
        }
    }
    Dataset::from_parts("synthetic", items, interactions, RatingScale::ONE_TO_FIVE)
}

fn unit_noise(seed: Option<u64>, key: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.unwrap_or(0).to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64
}

/// `(genres, rating)` for every `- Title [G, H] rated r of m` history line.
fn history_lines(text: &str) -> Vec<(Vec<String>, f64)> {
    text.lines()
        .filter_map(|line| {
            let line = line.strip_prefix("- ")?;
            let (head, tail) = line.split_once(" rated ")?;
            let rating: f64 = tail.split_whitespace().next()?.parse().ok()?;
            let genres = bracketed(head).unwrap_or_default();
            Some((genres, rating))
        })
        .collect()
}

fn bracketed(text: &str) -> Option<Vec<String>> {
    let open = text.rfind('[')?;
    let close = text[open..].find(']')? + open;
    Some(text[open + 1..close].split(", ").map(str::trim).filter(|g| !g.is_empty()).map(String::from).collect())
}

#[derive(Debug, Default)]
struct Tastes {
    liked: Vec<String>,
    disliked: Vec<String>,
    mean: f64,
}

fn tastes(history: &[(Vec<String>, f64)]) -> Tastes {
    let mut per: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (genres, r) in history {
        for g in genres {
            let e = per.entry(g.as_str()).or_default();
            e.0 += r;
            e.1 += 1;
        }
    }
    let mean = if history.is_empty() { 3.0 } else { history.iter().map(|(_, r)| r).sum::<f64>() / history.len() as f64 };
    let mut t = Tastes { mean, ..Default::default() };
    for (g, (sum, n)) in per {
        let avg = sum / n as f64;
        if n >= 2 && avg >= mean + 0.3 {
            t.liked.push(g.to_string());
        } else if avg <= mean - 0.7 {
            t.disliked.push(g.to_string());
        }
    }
    t
}

fn taste_traits(t: &Tastes) -> Vec<String> {
    let mut out: Vec<String> = t.liked.iter().map(|g| format!("enjoys {g} titles")).collect();
    out.extend(t.disliked.iter().map(|g| format!("dislikes {g} titles")));
    if t.mean >= 4.0 {
        out.push("rates generously".into());
    } else if t.mean <= 3.0 {
        out.push("rates harshly".into());
    }
    if out.is_empty() {
        out.push("has broad tastes".into());
    }
    out
}

fn after<'a>(text: &'a str, marker: &str) -> &'a str {
    text.find(marker).map(|i| &text[i + marker.len()..]).unwrap_or("")
}

fn swap_words(text: &str, pairs: &[(&str, &str)]) -> Option<String> {
    for (a, b) in pairs {
        if text.contains(a) {
            return Some(text.replacen(a, b, 1));
        }
        if text.contains(b) {
            return Some(text.replacen(b, a, 1));
        }
    }
    None
}

/// Preference weights read off the agent's system message.
#[derive(Debug, Default)]
struct AgentView {
    genre_weight: BTreeMap<String, f64>,
    rating_bias: f64,
}

fn agent_view(system: &str) -> AgentView {
    let mut view = AgentView::default();
    let mut weight = 1.0;
    let add = |view: &mut AgentView, genre: &str, w: f64| {
        *view.genre_weight.entry(genre.to_lowercase()).or_default() += w;
    };
    for line in system.lines() {
        let lower = line.to_lowercase();
        if lower.starts_with("weaker tendencies") {
            weight = 0.3;
            continue;
        }
        if lower.starts_with("about you") || lower.starts_with("how you decide") {
            weight = 1.0;
            continue;
        }
        if let Some(rest) = line.strip_prefix("- ").filter(|_| lower.contains(", you gave it ")) {
            let rating: f64 = rest.rsplit(' ').next().and_then(|r| r.parse().ok()).unwrap_or(3.0);
            for g in bracketed(rest.split(", you gave it ").next().unwrap_or("")).unwrap_or_default() {
                add(&mut view, &g, (rating - 3.0) / 2.0);
            }
            continue;
        }
        if lower.starts_with("interests - ") {
            for g in GENRES {
                if lower.contains(&g.to_lowercase()) {
                    add(&mut view, g, 1.0);
                }
            }
            continue;
        }
        if !line.trim_start().starts_with("- ") && !lower.contains("rely on:") {
            continue;
        }
        let softened = if lower.contains("somewhat") || lower.contains("mildly") { 0.5 } else { 1.0 };
        let sign = if ["dislike", "avoid", "does not", "never"].iter().any(|m| lower.contains(m)) { -1.0 } else { 1.0 };
        for g in GENRES {
            if lower.contains(&g.to_lowercase()) {
                add(&mut view, g, sign * weight * softened);
            }
        }
        if lower.contains("generously") {
            view.rating_bias += 0.5 * weight * softened;
        }
        if lower.contains("harshly") {
            view.rating_bias -= 0.5 * weight * softened;
        }
    }
    view
}

#[derive(Debug, Default)]
struct Candidate {
    id: String,
    genres: Vec<String>,
    rating: Option<f64>,
    popularity: Option<f64>,
}

fn candidates(user: &str) -> Vec<Candidate> {
    user.lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("- [")?;
            let (id, fields) = rest.split_once(']')?;
            let mut c = Candidate { id: id.to_string(), ..Default::default() };
            for field in fields.split(" | ") {
                let field = field.trim();
                if let Some(g) = field.strip_prefix("genres: ") {
                    c.genres = g.split(", ").map(String::from).collect();
                } else if let Some(r) = field.strip_prefix("rating: ") {
                    c.rating = r.split_whitespace().next().and_then(|v| v.parse().ok());
                } else if let Some(p) = field.strip_prefix("popularity: ") {
                    c.popularity = p.split_whitespace().next().and_then(|v| v.parse().ok());
                }
            }
            Some(c)
        })
        .collect()
}

fn preference(view: &AgentView, c: &Candidate) -> f64 {
    c.genres.iter().map(|g| view.genre_weight.get(&g.to_lowercase()).copied().unwrap_or(0.0)).sum()
}

fn score(view: &AgentView, c: &Candidate, seed: Option<u64>) -> f64 {
    let mut s = preference(view, c);
    if let Some(r) = c.rating {
        s += 0.5 * (r - 3.5);
    }
    if let Some(p) = c.popularity {
        s += 0.2 * (1.0 + p).ln();
    }
    s + 0.4 * unit_noise(seed, &c.id)
}

fn ranked(view: &AgentView, cands: &[Candidate], seed: Option<u64>) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = cands.iter().map(|c| (score(view, c, seed), c.id.as_str())).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.to_string()).collect()
}

fn leading_number(text: &str) -> Option<usize> {
    text.split_whitespace().find_map(|w| w.parse().ok())
}

/// Rule-based responder covering every tag the pipeline emits.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticResponder;

impl SyntheticResponder {
    fn stage1(&self, req: &PromptRequest) -> String {
        let traits = taste_traits(&tastes(&history_lines(&req.user_message)));
        // each generation keeps a different subset and phrasing
        let mut kept: Vec<String> = traits
            .iter()
            .enumerate()
            .filter(|(i, t)| traits.len() < 3 || unit_noise(req.request_seed, t) > 0.25 || *i == 0)
            .map(|(_, t)| {
                if unit_noise(req.request_seed, &format!("phrase:{t}")) > 0.5 {
                    t.replace("enjoys", "Enjoys")
                } else {
                    t.clone()
                }
            })
            .collect();
        kept.dedup();
        json!(kept).to_string()
    }

    fn stage2(&self, req: &PromptRequest) -> String {
        let pool = after(&req.user_message, "possibly overlapping or paraphrased:\n");
        let mut seen = BTreeSet::new();
        let merged: Vec<String> = pool
            .lines()
            .take_while(|l| l.starts_with("- "))
            .map(|l| l[2..].trim().to_lowercase())
            .filter(|t| seen.insert(t.clone()))
            .collect();
        json!(merged).to_string()
    }

    fn stage3_path(&self, req: &PromptRequest) -> String {
        let task = after(&req.user_message, "Task:\n");
        let steps = if task.starts_with("Rating") {
            json!([
                {"name": "recall-taste", "description": "compare the item to categories this user likes or avoids"},
                {"name": "quality-check", "description": "weigh how well regarded the item is"},
                {"name": "calibrate", "description": "adjust the score to the user's rating habits"},
            ])
        } else {
            json!([
                {"name": "hard-filter", "description": "discard items in categories the user avoids"},
                {"name": "taste-match", "description": "favour items in categories the user enjoys"},
                {"name": "tie-break", "description": "prefer well known and well rated items"},
            ])
        };
        steps.to_string()
    }

    fn perturb(&self, req: &PromptRequest) -> String {
        let statement = after(&req.user_message, "Statement: ").lines().next().unwrap_or("").trim();
        let out = if req.user_message.contains("clearly weaker") {
            format!("somewhat {statement}")
        } else {
            swap_words(statement, &[("enjoys", "dislikes"), ("Enjoys", "Dislikes"), ("generously", "harshly"), ("broad", "narrow")])
                .unwrap_or_else(|| format!("does not {statement}"))
        };
        json!([out]).to_string()
    }

    fn recagent(&self, req: &PromptRequest) -> String {
        let t = tastes(&history_lines(&req.user_message));
        let role = if t.mean <= 3.0 {
            "critic"
        } else if t.liked.len() >= 3 {
            "explorer"
        } else {
            "watcher"
        };
        json!({
            "personality": if t.mean >= 4.0 { "easy to please" } else { "selective" },
            "interests": if t.liked.is_empty() { "varied".to_string() } else { t.liked.join(", ") },
            "behaviour": format!("rates {:.1} on average", t.mean),
            "role": role,
        })
        .to_string()
    }

    fn agent4rec(&self, req: &PromptRequest) -> String {
        let t = tastes(&history_lines(&req.user_message));
        let pairs: Vec<_> = taste_traits(&t)
            .into_iter()
            .map(|taste| json!({"taste": taste, "rationale": format!("history average {:.1}", t.mean)}))
            .collect();
        json!(pairs).to_string()
    }

    fn agent(&self, req: &PromptRequest) -> Option<String> {
        let view = agent_view(&req.system_message);
        let cands = candidates(&req.user_message);
        let order = ranked(&view, &cands, req.request_seed);
        Some(match req.tag.as_str() {
            "agent-discrimination" => {
                let p = leading_number(after(&req.user_message, "Exactly ")).unwrap_or(1);
                json!(order.into_iter().take(p).collect::<Vec<_>>()).to_string()
            }
            "agent-ranking" => json!(order).to_string(),
            "agent-rating" => {
                let map: BTreeMap<&str, f64> = cands
                    .iter()
                    .map(|c| {
                        let base = c.rating.unwrap_or(3.5) + 0.6 * preference(&view, c) + view.rating_bias;
                        (c.id.as_str(), RatingScale::ONE_TO_FIVE.clamp(base.round()))
                    })
                    .collect();
                json!(map).to_string()
            }
            _ => return None,
        })
    }
}

impl Responder for SyntheticResponder {
    fn respond(&self, req: &PromptRequest) -> Option<String> {
        Some(match req.tag.as_str() {
            "stage1-extract" => self.stage1(req),
            "stage2-consolidate" => self.stage2(req),
            "stage3-path" => self.stage3_path(req),
            "stage3-perturb" => self.perturb(req),
            "baseline-recagent" => self.recagent(req),
            "baseline-agent4rec" => self.agent4rec(req),
            _ => return self.agent(req),
        })
    }
}

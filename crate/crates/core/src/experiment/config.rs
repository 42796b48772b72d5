use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::dataset::{ParseMode, DEFAULT_MIN_INTERACTIONS, DEFAULT_SPLIT_RATIO};
use crate::llm::{CacheMode, ModelParams, DEFAULT_API_KEY_ENV, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::metrics::JsdMode;
use crate::profile::{GeneratorConfig, GeneratorKind};
use crate::sampling::{standard_attribute_masks, AttributeSampling, PopularityProbeSpec, SamplerSpec, Stratum};
use crate::tasks::{AttributeMask, PopularityRendering, TaskKind, DEFAULT_CANDIDATES, DEFAULT_RATING_ITEMS};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Movielens,
    Amazon,
    Canonical,
    /// Generated in memory; no input files.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Overrides the parser's dataset name in reports.
    pub name: Option<String>,
    pub ratings: Option<PathBuf>,
    pub movies: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub dir: Option<PathBuf>,
    pub parse_mode: ParseMode,
    pub split_ratio: f64,
    pub min_interactions: usize,
    /// Evaluate only the first `max_users` eligible users in id order.
    pub max_users: Option<usize>,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::default(),
            name: None,
            ratings: None,
            movies: None,
            reviews: None,
            metadata: None,
            dir: None,
            parse_mode: ParseMode::Strict,
            split_ratio: DEFAULT_SPLIT_RATIO,
            min_interactions: DEFAULT_MIN_INTERACTIONS,
            max_users: None,
            synthetic_users: 20,
            synthetic_items: 200,
        }
    }
}

impl DatasetConfig {
    /// Input files this dataset kind reads, in a fixed order.
    pub fn input_files(&self) -> Result<Vec<&Path>, ExperimentError> {
        let kind = self.kind;
        fn need<'a>(p: &'a Option<PathBuf>, key: &str, kind: DatasetKind) -> Result<&'a Path, ExperimentError> {
            p.as_deref().ok_or_else(|| ExperimentError::Config(format!("dataset.{key} is required for {kind:?} datasets")))
        }
        Ok(match self.kind {
            DatasetKind::Movielens => vec![need(&self.ratings, "ratings", kind)?, need(&self.movies, "movies", kind)?],
            DatasetKind::Amazon => vec![need(&self.reviews, "reviews", kind)?, need(&self.metadata, "metadata", kind)?],
            DatasetKind::Canonical => {
                let dir = need(&self.dir, "dir", kind)?;
                return Ok(vec![dir]);
            }
            DatasetKind::Synthetic => vec![],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Scripted,
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendChoice,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Concurrent requests; also sizes the worker pool.
    pub in_flight: usize,
    pub parse_attempts: usize,
    /// Scripted response table (TOML).
    pub table: Option<PathBuf>,
    /// Rule-based fallback for the scripted backend: `synthetic` or none.
    pub responder: Option<String>,
    pub cache: Option<PathBuf>,
    pub mode: CacheMode,
    /// Executor behind a replay cache in record and replay modes.
    pub upstream: BackendChoice,
    pub base_url: String,
    /// Environment variable holding the API key. The key itself never
    /// appears in configuration.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendChoice::Scripted,
            model_id: ModelParams::default().model_id,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            in_flight: 8,
            parse_attempts: 3,
            table: None,
            responder: Some("synthetic".into()),
            cache: None,
            mode: CacheMode::Record,
            upstream: BackendChoice::Live,
            base_url: "https://api.openai.com".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
        }
    }
}

impl BackendConfig {
    pub fn model(&self) -> ModelParams {
        ModelParams { model_id: self.model_id.clone(), temperature: self.temperature, max_tokens: self.max_tokens }
    }

    /// Applies a `--backend-override` value: `scripted`, `live`, `replay`
    /// or `replay:<record|replay|strict>`.
    pub fn apply_override(&mut self, value: &str) -> Result<(), ExperimentError> {
        let (kind, mode) = value.split_once(':').map_or((value, None), |(k, m)| (k, Some(m)));
        self.kind = match kind {
            "scripted" => BackendChoice::Scripted,
            "live" => BackendChoice::Live,
            "replay" => BackendChoice::Replay,
            other => return Err(ExperimentError::Config(format!("unknown backend {other:?}"))),
        };
        if let Some(mode) = mode {
            if self.kind != BackendChoice::Replay {
                return Err(ExperimentError::Config("only the replay backend takes a mode".into()));
            }
            self.mode = match mode {
                "record" => CacheMode::Record,
                "replay" => CacheMode::Replay,
                "strict" => CacheMode::Strict,
                other => return Err(ExperimentError::Config(format!("unknown cache mode {other:?}"))),
            };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kinds: Vec<GeneratorKind>,
    pub pipeline: GeneratorConfig,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec { kinds: vec![GeneratorKind::TaskAligned], pipeline: GeneratorConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub families: Vec<TaskKind>,
    pub discrimination_positives: Vec<usize>,
    pub candidates: usize,
    pub rating_items: usize,
    pub samplers: Vec<SamplerSpec>,
    pub masks: Vec<AttributeMask>,
    pub instances_per_user: usize,
    pub jsd_mode: JsdMode,
    pub repair: bool,
    pub popularity: PopularityRendering,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            families: TaskKind::ALL.to_vec(),
            discrimination_positives: vec![1, 3, 5],
            candidates: DEFAULT_CANDIDATES,
            rating_items: DEFAULT_RATING_ITEMS,
            samplers: vec![SamplerSpec::uniform()],
            masks: vec![AttributeMask::full()],
            instances_per_user: 1,
            jsd_mode: JsdMode::PerGroup,
            repair: true,
            popularity: PopularityRendering::Count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub positions: Vec<usize>,
    pub popularity_strategies: Vec<SamplerSpec>,
    pub popularity_task: PopularityProbeSpec,
    pub attribute_masks: Vec<AttributeMask>,
    pub attribute_samplings: Vec<AttributeSampling>,
    pub history_grid: Vec<usize>,
    /// Positives per discrimination instance in the history sweep.
    pub history_positives: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            positions: (1..=DEFAULT_CANDIDATES).collect(),
            popularity_strategies: vec![
                SamplerSpec::uniform(),
                SamplerSpec::debias(),
                SamplerSpec::stratified(Stratum::Head),
                SamplerSpec::stratified(Stratum::Tail),
            ],
            popularity_task: PopularityProbeSpec::default(),
            attribute_masks: standard_attribute_masks(),
            attribute_samplings: vec![AttributeSampling::Random, AttributeSampling::Debias],
            history_grid: vec![5, 10, 15, 20, 25],
            history_positives: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub runs: usize,
    /// Fraction of failed users above which profile generation aborts.
    pub failure_ceiling: f64,
    /// Catalogue noun used in prompts.
    pub domain: String,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    pub generator: GeneratorSpec,
    pub tasks: TaskConfig,
    pub probes: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            runs: 5,
            failure_ceiling: 0.2,
            domain: "movie".into(),
            output_dir: None,
            dataset: DatasetConfig::default(),
            backend: BackendConfig::default(),
            generator: GeneratorSpec::default(),
            tasks: TaskConfig::default(),
            probes: ProbeConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    /// Parses a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.dataset;
        for p in [&mut d.ratings, &mut d.movies, &mut d.reviews, &mut d.metadata, &mut d.dir] {
            resolve(base, p);
        }
        resolve(base, &mut self.backend.table);
        resolve(base, &mut self.backend.cache);
        resolve(base, &mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.failure_ceiling) {
            return bad("failure_ceiling must lie in [0, 1]".into());
        }
        if !(self.dataset.split_ratio > 0.0 && self.dataset.split_ratio < 1.0) {
            return bad(format!("split_ratio {} is outside (0, 1)", self.dataset.split_ratio));
        }
        for path in self.dataset.input_files()? {
            if !path.exists() {
                return Err(ExperimentError::Data(format!("{} does not exist", path.display())));
            }
        }
        if self.generator.kinds.is_empty() {
            return bad("generator.kinds is empty".into());
        }
        let g = &self.generator.pipeline;
        if g.history_window == 0 || g.n_init == 0 {
            return bad("history_window and n_init must be positive".into());
        }
        if g.delta.is_nan() || g.delta < 0.0 {
            return bad("delta must be non-negative".into());
        }
        let t = &self.tasks;
        if t.families.is_empty() || t.samplers.is_empty() || t.masks.is_empty() {
            return bad("tasks.families, tasks.samplers and tasks.masks must be non-empty".into());
        }
        if t.masks.iter().any(AttributeMask::is_empty) {
            return bad("empty attribute mask".into());
        }
        if t.discrimination_positives.iter().any(|&p| p == 0 || p >= t.candidates) {
            return bad(format!("discrimination positives must lie in [1, {})", t.candidates));
        }
        if t.candidates < 2 || t.rating_items == 0 || t.instances_per_user == 0 {
            return bad("candidates >= 2, rating_items >= 1 and instances_per_user >= 1 required".into());
        }
        for s in t.samplers.iter().chain(&self.probes.popularity_strategies) {
            s.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if self.probes.history_grid.contains(&0) {
            return bad("history_grid entries must be positive".into());
        }
        if self.probes.history_positives == 0 || self.probes.history_positives >= t.candidates {
            return bad(format!("probes.history_positives must lie in [1, {})", t.candidates));
        }
        if self.probes.positions.iter().any(|&p| p == 0 || p > t.candidates) {
            return bad(format!("probe positions must lie in [1, {}]", t.candidates));
        }
        let b = &self.backend;
        if b.kind == BackendChoice::Replay && b.cache.is_none() {
            return bad("the replay backend needs backend.cache".into());
        }
        if b.kind == BackendChoice::Replay && b.upstream == BackendChoice::Replay {
            return bad("backend.upstream cannot be replay".into());
        }
        if let Some(r) = b.responder.as_deref().filter(|r| *r != "synthetic") {
            return bad(format!("unknown responder {r:?}"));
        }
        if let Some(table) = &b.table {
            if !table.exists() {
                return bad(format!("scripted table {} does not exist", table.display()));
            }
        }
        Ok(())
    }

    /// Digest of every knob that can change results. The output directory
    /// and backend transport (kind, cache, endpoint) are excluded, so a
    /// replayed run carries the digest of the run it replays.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.backend = BackendConfig {
            model_id: c.backend.model_id,
            temperature: c.backend.temperature,
            max_tokens: c.backend.max_tokens,
            parse_attempts: c.backend.parse_attempts,
            ..BackendConfig::default()
        };
        sha256_json(&c)
    }

    /// Digest of the inputs that shape profiles; task and probe settings are
    /// excluded so evaluation changes do not invalidate stored profiles.
    pub fn profile_digest(&self, pipeline: &GeneratorConfig) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            domain: &'a str,
            dataset: &'a DatasetConfig,
            model: ModelParams,
            parse_attempts: usize,
            pipeline: &'a GeneratorConfig,
        }
        sha256_json(&Key {
            seed: self.seed,
            domain: &self.domain,
            dataset: &self.dataset,
            model: self.backend.model(),
            parse_attempts: self.backend.parse_attempts,
            pipeline,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_digest() {
        let c = ExperimentConfig::from_toml("[dataset]\nkind = \"synthetic\"\n").unwrap();
        assert_eq!(c.runs, 5);
        assert_eq!(c.backend.temperature, 0.1);
        assert_eq!(c.generator.pipeline.history_window, 15);
        assert_eq!(c.generator.pipeline.n_init, 3);
        c.validate().unwrap();
        let mut moved = c.clone();
        moved.output_dir = Some("elsewhere".into());
        moved.backend.kind = BackendChoice::Replay;
        assert_eq!(c.digest(), moved.digest());
        let mut reseeded = c.clone();
        reseeded.seed = 9;
        assert_ne!(c.digest(), reseeded.digest());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("runs = 1\nbogus = 2\n").is_err());
        let c = ExperimentConfig::from_toml("runs = 0\n[dataset]\nkind = \"synthetic\"\n").unwrap();
        assert!(matches!(c.validate(), Err(ExperimentError::Config(_))));
        let missing = ExperimentConfig::from_toml("[dataset]\nratings = \"/nope/r.dat\"\nmovies = \"/nope/m.dat\"\n").unwrap();
        assert!(matches!(missing.validate(), Err(ExperimentError::Data(_))));
    }

    #[test]
    fn backend_override() {
        let mut b = BackendConfig::default();
        b.apply_override("replay:strict").unwrap();
        assert_eq!((b.kind, b.mode), (BackendChoice::Replay, CacheMode::Strict));
        assert!(b.apply_override("scripted:strict").is_err());
        assert!(b.apply_override("carrier-pigeon").is_err());
    }
}

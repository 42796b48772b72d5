//! Config-driven experiment orchestration.
//!
//! Output tree under the output directory:
//!
//! ```text
//! config.json             resolved config and its digest
//! data/                   canonical dataset, split manifest, item stats
//! profiles/<gen>.ndjson   profile stores
//! decisions/<cell>.ndjson one record per task instance
//! reports/<cell>.json     per-cell metric reports
//! plots/<name>.csv        long-format plot data
//! summary.txt, .csv       tables written by `report`
//! ```
//!
//! Every file is a pure function of the config and the backend responses,
//! so two runs with a scripted or replayed backend produce identical trees.

mod config;
mod evaluate;
mod generate;
mod ingest;
mod report;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::dataset::{compute_item_stats, ItemStats, SplitDataset, UserId};
use crate::llm::{
    CacheMode, GatewayError, InFlightLimit, LiveBackend, LiveConfig, ModelParams, PromptExecutor,
    ReplayBackend, ReplayCache, ScriptedBackend, ScriptedTable,
};
use crate::synthetic::SyntheticResponder;

pub use config::{
    BackendChoice, BackendConfig, DatasetConfig, DatasetKind, ExperimentConfig, GeneratorSpec, ProbeConfig, TaskConfig,
    CONFIG_VERSION,
};
pub use evaluate::{cmd_eval, cmd_probe, Accounting, CellReport, ProbeKind};
pub use generate::{cmd_generate_profiles, GenerationSummary, ProfileSet};
pub use ingest::{cmd_ingest, load_split, IngestManifest};
pub use report::{cmd_report, render_tables};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 1 config, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Data(_) | ExperimentError::Io { .. } => 2,
            ExperimentError::Backend(_) => 3,
        }
    }
}

impl From<GatewayError> for ExperimentError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(m) => ExperimentError::Config(m),
            other => ExperimentError::Backend(other.to_string()),
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ExperimentError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_file(path, text)
}

/// Builds the executor stack the config describes, capped at `in_flight`
/// concurrent calls.
pub fn build_executor(config: &BackendConfig) -> Result<Arc<dyn PromptExecutor>, ExperimentError> {
    fn base(kind: BackendChoice, config: &BackendConfig) -> Result<Arc<dyn PromptExecutor>, ExperimentError> {
        Ok(match kind {
            BackendChoice::Scripted => {
                let table = match &config.table {
                    Some(path) => ScriptedTable::load(path)?,
                    None => ScriptedTable::default(),
                };
                let backend = ScriptedBackend::new(table);
                match config.responder.as_deref() {
                    Some("synthetic") => Arc::new(backend.with_responder(SyntheticResponder)),
                    _ => Arc::new(backend),
                }
            }
            BackendChoice::Live => Arc::new(LiveBackend::new(LiveConfig {
                base_url: config.base_url.clone(),
                api_key_env: config.api_key_env.clone(),
                timeout_secs: config.timeout_secs,
                ..LiveConfig::default()
            })?),
            BackendChoice::Replay => return Err(ExperimentError::Config("replay cannot wrap replay".into())),
        })
    }
    let executor: Arc<dyn PromptExecutor> = match config.kind {
        BackendChoice::Replay => {
            let path = config.cache.as_deref().ok_or_else(|| ExperimentError::Config("backend.cache is required".into()))?;
            let cache = ReplayCache::open(path)?;
            let inner = match config.mode {
                CacheMode::Strict => None,
                _ => Some(base(config.upstream, config)?),
            };
            Arc::new(ReplayBackend::new(cache, inner, config.mode))
        }
        kind => base(kind, config)?,
    };
    Ok(Arc::new(InFlightLimit::new(executor, config.in_flight)))
}

/// Loaded dataset, backend and worker pool shared by the commands.
pub struct Environment {
    pub config: ExperimentConfig,
    pub digest: String,
    pub out: PathBuf,
    pub split: SplitDataset,
    pub stats: ItemStats,
    pub users: Vec<UserId>,
    pub executor: Arc<dyn PromptExecutor>,
    pub model: ModelParams,
    pub pool: rayon::ThreadPool,
}

impl Environment {
    /// Validates the config, ingests the dataset if needed and opens the
    /// backend.
    pub fn open(config: ExperimentConfig, out: &Path) -> Result<Self, ExperimentError> {
        config.validate()?;
        let digest = config.digest();
        write_json(&out.join("config.json"), &serde_json::json!({ "digest": digest, "config": config }))?;
        cmd_ingest(&config, out)?;
        let split = load_split(&config, out)?;
        let stats = compute_item_stats(&split);
        let mut users: Vec<UserId> = split.users().cloned().collect();
        if let Some(max) = config.dataset.max_users {
            users.truncate(max);
        }
        let executor = build_executor(&config.backend)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.backend.in_flight.max(1))
            .build()
            .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))?;
        Ok(Environment { model: config.backend.model(), config, digest, out: out.to_path_buf(), split, stats, users, executor, pool })
    }

    pub fn dataset_name(&self) -> &str {
        self.config.dataset.name.as_deref().unwrap_or(&self.split.name)
    }
}

/// File-name-safe form of a cell identifier.
pub(crate) fn slug(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| p.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' }).collect::<String>())
        .collect::<Vec<_>>()
        .join("__")
}

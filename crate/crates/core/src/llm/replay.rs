//! Record/replay cache.
//!
//! The cache file is append-only, one record per line:
//!
//! ```text
//! <digest>\t<base64(JSON request)>\t<base64(JSON response)>
//! ```
//!
//! A torn final line (crash mid-write) is ignored on load.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendKind, GatewayError, PromptExecutor, PromptRequest, PromptResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Hits are served from the cache; misses go to the inner executor and
    /// are appended.
    #[default]
    Record,
    /// Hits are served; misses go to the inner executor without persisting.
    Replay,
    /// Hits are served; misses are errors. The inner executor is never used.
    Strict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedRecord {
    request: PromptRequest,
    response: PromptResponse,
}

pub struct ReplayCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Arc<CachedRecord>>>,
    writer: Mutex<Option<File>>,
}

impl ReplayCache {
    /// Opens (or creates lazily on first write) the cache at `path`.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let lines: Vec<&str> = text.lines().collect();
            for (idx, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match decode_line(line) {
                    Some((digest, record)) => {
                        entries.entry(digest).or_insert_with(|| Arc::new(record));
                    }
                    None if idx + 1 == lines.len() => {
                        log::warn!("ignoring torn final record in {}", path.display());
                    }
                    None => {
                        return Err(GatewayError::Config(format!(
                            "corrupt cache record at {}:{}",
                            path.display(),
                            idx + 1
                        )))
                    }
                }
            }
        }
        Ok(ReplayCache {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<PromptResponse> {
        self.entries.read().expect("cache lock").get(digest).map(|r| r.response.clone())
    }

    pub fn insert(&self, request: &PromptRequest, response: &PromptResponse) -> Result<(), GatewayError> {
        let digest = request.cache_key();
        let record = CachedRecord { request: request.clone(), response: response.clone() };
        {
            let mut entries = self.entries.write().expect("cache lock");
            if entries.contains_key(&digest) {
                return Ok(());
            }
            entries.insert(digest.clone(), Arc::new(record.clone()));
        }
        let line = encode_line(&digest, &record);
        let mut writer = self.writer.lock().expect("cache writer lock");
        if writer.is_none() {
            if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            *writer = Some(OpenOptions::new().create(true).append(true).open(&self.path)?);
        }
        let file = writer.as_mut().expect("writer opened");
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }
}

fn encode_line(digest: &str, record: &CachedRecord) -> String {
    let request = serde_json::to_vec(&record.request).expect("request serializes");
    let response = serde_json::to_vec(&record.response).expect("response serializes");
    format!("{digest}\t{}\t{}\n", B64.encode(request), B64.encode(response))
}

fn decode_line(line: &str) -> Option<(String, CachedRecord)> {
    let mut parts = line.split('\t');
    let digest = parts.next()?.to_string();
    let request: PromptRequest = serde_json::from_slice(&B64.decode(parts.next()?).ok()?).ok()?;
    let response: PromptResponse = serde_json::from_slice(&B64.decode(parts.next()?).ok()?).ok()?;
    if parts.next().is_some() || request.cache_key() != digest {
        return None;
    }
    Some((digest, CachedRecord { request, response }))
}

pub struct ReplayBackend {
    cache: ReplayCache,
    inner: Option<Arc<dyn PromptExecutor>>,
    mode: CacheMode,
    forwarded: AtomicUsize,
}

impl ReplayBackend {
    pub fn new(cache: ReplayCache, inner: Option<Arc<dyn PromptExecutor>>, mode: CacheMode) -> Self {
        ReplayBackend { cache, inner, mode, forwarded: AtomicUsize::new(0) }
    }

    pub fn strict(cache: ReplayCache) -> Self {
        ReplayBackend::new(cache, None, CacheMode::Strict)
    }

    pub fn cache(&self) -> &ReplayCache {
        &self.cache
    }

    /// Requests that missed the cache and went to the inner executor.
    pub fn forwarded_calls(&self) -> usize {
        self.forwarded.load(Ordering::SeqCst)
    }
}

impl PromptExecutor for ReplayBackend {
    fn execute(&self, request: &PromptRequest) -> Result<PromptResponse, GatewayError> {
        let digest = request.cache_key();
        if let Some(mut response) = self.cache.get(&digest) {
            response.backend = BackendKind::Replay;
            return Ok(response);
        }
        if self.mode == CacheMode::Strict {
            return Err(GatewayError::CacheMiss(digest));
        }
        let inner = self
            .inner
            .as_ref()
            .ok_or_else(|| GatewayError::Config("replay cache miss and no backend to forward to".into()))?;
        self.forwarded.fetch_add(1, Ordering::SeqCst);
        let response = inner.execute(request)?;
        if self.mode == CacheMode::Record {
            self.cache.insert(request, &response)?;
        }
        Ok(response)
    }
}

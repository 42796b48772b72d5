use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GatewayError, PromptExecutor, PromptRequest, PromptResponse};

/// Rule-based fallback for requests the table does not cover.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &PromptRequest) -> Option<String>;
}

impl<F> Responder for F
where
    F: Fn(&PromptRequest) -> Option<String> + Send + Sync,
{
    fn respond(&self, request: &PromptRequest) -> Option<String> {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub tag: String,
    #[serde(default)]
    pub digest: Option<String>,
    pub text: String,
}

/// `(tag, optional digest) → response text`, loadable from TOML:
///
/// ```toml
/// [[responses]]
/// tag = "stage1-extract"
/// digest = "9f2c…"   # optional; omit to match every request with this tag
/// text = '["enjoys science fiction"]'
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTable {
    #[serde(default)]
    pub responses: Vec<ScriptedEntry>,
}

impl ScriptedTable {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read scripted table {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| GatewayError::Config(format!("scripted table {}: {e}", path.display())))
    }

    pub fn insert(&mut self, tag: &str, digest: Option<&str>, text: impl Into<String>) {
        self.responses.push(ScriptedEntry {
            tag: tag.to_string(),
            digest: digest.map(String::from),
            text: text.into(),
        });
    }
}

/// Deterministic executor: exact `(tag, digest)` entries win over tag-wide
/// entries, which win over the responder.
#[derive(Clone, Default)]
pub struct ScriptedBackend {
    exact: HashMap<(String, String), String>,
    by_tag: HashMap<String, String>,
    responder: Option<Arc<dyn Responder>>,
}

impl ScriptedBackend {
    pub fn new(table: ScriptedTable) -> Self {
        let mut backend = ScriptedBackend::default();
        // first entry for a key wins
        for entry in table.responses {
            match entry.digest {
                Some(d) => {
                    backend.exact.entry((entry.tag, d)).or_insert(entry.text);
                }
                None => {
                    backend.by_tag.entry(entry.tag).or_insert(entry.text);
                }
            }
        }
        backend
    }

    pub fn from_responder(responder: impl Responder + 'static) -> Self {
        ScriptedBackend::default().with_responder(responder)
    }

    pub fn with_responder(mut self, responder: impl Responder + 'static) -> Self {
        self.responder = Some(Arc::new(responder));
        self
    }
}

impl PromptExecutor for ScriptedBackend {
    fn execute(&self, request: &PromptRequest) -> Result<PromptResponse, GatewayError> {
        request.validate()?;
        let digest = request.cache_key();
        if let Some(text) = self.exact.get(&(request.tag.clone(), digest.clone())) {
            return Ok(PromptResponse::scripted(text.clone()));
        }
        if let Some(text) = self.by_tag.get(&request.tag) {
            return Ok(PromptResponse::scripted(text.clone()));
        }
        if let Some(text) = self.responder.as_ref().and_then(|r| r.respond(request)) {
            return Ok(PromptResponse::scripted(text));
        }
        Err(GatewayError::Config(format!(
            "no scripted response for tag {:?} digest {digest}",
            request.tag
        )))
    }
}

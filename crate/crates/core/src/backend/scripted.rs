use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    #[default]
    Error,
    RepeatLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring the most recent user message must contain.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matches: Option<String>,
    pub response: String,
}

impl ScriptEntry {
    pub fn new(response: impl Into<String>) -> Self {
        Self { matches: None, response: response.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    entries: Vec<ScriptEntry>,
    policy: ExhaustionPolicy,
}

impl Script {
    pub fn new(entries: Vec<ScriptEntry>, policy: ExhaustionPolicy) -> Result<Self, BackendError> {
        if entries.is_empty() {
            return Err(BackendError::InvalidConfig("script must contain at least one entry".into()));
        }
        Ok(Self { entries, policy })
    }

    /// Script answering every call with the given responses, in order.
    pub fn from_responses<I, S>(responses: I, policy: ExhaustionPolicy) -> Result<Self, BackendError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(responses.into_iter().map(ScriptEntry::new).collect(), policy)
    }

    /// Load a JSON array of `{"match"?: str, "response": str}` records.
    pub fn load(path: &Path, policy: ExhaustionPolicy) -> Result<Self, BackendError> {
        let source_err = |reason: String| BackendError::Source { path: path.to_path_buf(), reason };
        let raw = std::fs::read_to_string(path).map_err(|e| source_err(e.to_string()))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&raw).map_err(|e| source_err(e.to_string()))?;
        Self::new(entries, policy)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Default)]
struct ScriptState {
    cursor: usize,
    log: Vec<ChatRequest>,
}

/// Returns canned responses in script order. Calls are serialized so that
/// ordinal consumption is totally ordered even under concurrent use.
#[derive(Debug)]
pub struct ScriptedBackend {
    id: String,
    model: String,
    script: Script,
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(model: impl Into<String>, script: Script) -> Self {
        let model = model.into();
        Self { id: format!("scripted:{model}"), model, script, state: Mutex::default() }
    }

    /// Convenience constructor for tests and fixtures.
    pub fn from_responses<I, S>(model: impl Into<String>, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let script = Script::from_responses(responses, ExhaustionPolicy::Error).expect("non-empty script");
        Self::new(model, script)
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> usize {
        self.state.lock().expect("script lock").log.len()
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().expect("script lock").log.clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let mut state = self.state.lock().expect("script lock");
        let index = state.cursor;
        let entry = match self.script.entries.get(index) {
            Some(entry) => entry,
            None => match self.script.policy {
                ExhaustionPolicy::Error => return Err(BackendError::ScriptExhausted { consumed: index }),
                ExhaustionPolicy::RepeatLast => self.script.entries.last().expect("non-empty script"),
            },
        };
        if let Some(expected) = &entry.matches {
            let last = request.last_user_message().unwrap_or_default();
            if !last.contains(expected.as_str()) {
                return Err(BackendError::ScriptMismatch { index, expected: expected.clone() });
            }
        }
        state.cursor += 1;
        state.log.push(request.clone());
        Ok(ChatResponse {
            content: entry.response.clone(),
            reported_usage: None,
            backend_id: self.id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

use std::path::Path;
use std::sync::Mutex;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, TokenSource, Usage};
use crate::dialogue::DialogueTranscript;

#[derive(Debug, Clone)]
struct RecordedTurn {
    message: String,
    provider_tokens: Option<u64>,
}

/// Plays back the messages of a persisted dialogue transcript: the k-th call
/// returns the k-th recorded turn (optionally restricted to one speaker).
#[derive(Debug)]
pub struct ReplayBackend {
    id: String,
    model: String,
    turns: Vec<RecordedTurn>,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn load(model: impl Into<String>, path: &Path, agent: Option<&str>) -> Result<Self, BackendError> {
        let source_err = |reason: String| BackendError::Source { path: path.to_path_buf(), reason };
        let raw = std::fs::read_to_string(path).map_err(|e| source_err(e.to_string()))?;
        let transcript: DialogueTranscript = serde_json::from_str(&raw).map_err(|e| source_err(e.to_string()))?;
        Ok(Self::from_transcript(model, &transcript, agent))
    }

    pub fn from_transcript(model: impl Into<String>, transcript: &DialogueTranscript, agent: Option<&str>) -> Self {
        let model = model.into();
        let turns = transcript
            .turns
            .iter()
            .filter(|t| agent.is_none_or(|a| t.agent == a))
            .map(|t| RecordedTurn {
                message: t.message.clone(),
                provider_tokens: matches!(t.token_source, TokenSource::Provider).then_some(t.completion_tokens),
            })
            .collect();
        let id = match agent {
            Some(agent) => format!("replay:{model}:{agent}"),
            None => format!("replay:{model}"),
        };
        Self { id, model, turns, cursor: Mutex::new(0) }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let mut cursor = self.cursor.lock().expect("replay lock");
        let turn = self.turns.get(*cursor).ok_or(BackendError::ScriptExhausted { consumed: *cursor })?;
        *cursor += 1;
        Ok(ChatResponse {
            content: turn.message.clone(),
            reported_usage: turn.provider_tokens.map(|completion_tokens| Usage { prompt_tokens: 0, completion_tokens }),
            backend_id: self.id.clone(),
            latency_ms: 0,
        })
    }
}

//! Streaming chat-completion abstraction.
//!
//! Three interchangeable backends sit behind [`ChatBackend`]:
//! [`RemoteBackend`] speaks the hosted chat-completion protocol over SSE,
//! [`ScriptedBackend`] replays fixture chunks, and [`RuleBasedBackend`] is a
//! deterministic stand-in that reads ground-truth tags from synthetic notes.

use std::fmt;
use std::pin::Pin;
use std::str::FromStr;

use async_trait::async_trait;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod prompts;
pub mod remote;
pub mod rule_based;
pub mod scripted;
pub mod sse;

pub use prompts::PromptContext;
pub use remote::RemoteBackend;
pub use rule_based::{ErrorPlan, ForcedLabels, GroundTruthTag, RuleBasedBackend};
pub use scripted::ScriptedBackend;

pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub model_id: String,
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// Request with deployment defaults: temperature 0, 512 output tokens.
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            model_id: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompts must not be empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable identifier of the prompt pair, used to key scripted fixtures.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.system_prompt, &self.user_prompt)
    }
}

pub fn fingerprint(system_prompt: &str, user_prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(system_prompt.as_bytes());
    h.update([0u8]);
    h.update(user_prompt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatChunk {
    pub delta_text: String,
    pub is_final: bool,
}

/// Turns ordered fragments into chunks with only the last one final. An empty
/// fragment list becomes a single empty final chunk.
pub fn chunks_from_fragments<I: IntoIterator<Item = String>>(fragments: I) -> Vec<ChatChunk> {
    let mut chunks: Vec<ChatChunk> = fragments
        .into_iter()
        .map(|delta_text| ChatChunk {
            delta_text,
            is_final: false,
        })
        .collect();
    match chunks.last_mut() {
        Some(last) => last.is_final = true,
        None => chunks.push(ChatChunk {
            delta_text: String::new(),
            is_final: true,
        }),
    }
    chunks
}

/// Splits `text` into pieces of at most `width` characters.
pub fn split_for_streaming(text: &str, width: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    chars.chunks(width.max(1)).map(|c| c.iter().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("backend unreachable after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Upstream { status: u16, body: String },
    #[error("malformed upstream chunk ({detail}): {raw}")]
    MalformedChunk { raw: String, detail: String },
    #[error("stream ended before completion")]
    Truncated,
    #[error("no scripted response for request {fingerprint}")]
    NoScript { fingerprint: String },
    #[error("fixture error: {0}")]
    Fixture(String),
}

pub type ChunkStream = Pin<Box<dyn Stream<Item = Result<ChatChunk, GatewayError>> + Send>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Scripted,
    Rule,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Remote => "remote",
            BackendKind::Scripted => "scripted",
            BackendKind::Rule => "rule",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "scripted" => Ok(BackendKind::Scripted),
            "rule" | "rule-based" => Ok(BackendKind::Rule),
            _ => Err(format!("unknown backend {s:?}; expected rule, scripted or remote")),
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Starts a completion. Connection-level failures surface here; failures
    /// after the first byte arrive as stream items.
    async fn open_stream(&self, request: &ChatRequest) -> Result<ChunkStream, GatewayError>;
}

/// Validates `request` and opens a chunk stream on `backend`.
pub async fn complete_streaming(request: &ChatRequest, backend: &dyn ChatBackend) -> Result<ChunkStream, GatewayError> {
    request.validate()?;
    backend.open_stream(request).await
}

/// Drains a chunk stream into the complete response text.
pub async fn collect_text(mut stream: ChunkStream) -> Result<String, GatewayError> {
    let mut out = String::new();
    while let Some(chunk) = stream.next().await {
        let chunk = chunk?;
        out.push_str(&chunk.delta_text);
        if chunk.is_final {
            return Ok(out);
        }
    }
    Err(GatewayError::Truncated)
}

/// Opens a stream and collects it in one call.
pub async fn complete(request: &ChatRequest, backend: &dyn ChatBackend) -> Result<String, GatewayError> {
    collect_text(complete_streaming(request, backend).await?).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn request_defaults_and_validation() {
        let r = ChatRequest::new("sys", "user");
        assert_eq!(r.temperature, 0.0);
        assert_eq!(r.max_output_tokens, 512);
        assert!(r.validate().is_ok());
        assert!(ChatRequest::new("", "user").validate().is_err());
        let mut hot = ChatRequest::new("s", "u");
        hot.temperature = 2.5;
        assert!(hot.validate().is_err());
    }

    #[test]
    fn fingerprint_separates_prompts() {
        assert_ne!(fingerprint("ab", "c"), fingerprint("a", "bc"));
        assert_eq!(fingerprint("a", "b"), ChatRequest::new("a", "b").fingerprint());
    }

    #[test]
    fn empty_fragments_still_final() {
        let c = chunks_from_fragments(Vec::new());
        assert_eq!(c.len(), 1);
        assert!(c[0].is_final && c[0].delta_text.is_empty());
    }

    proptest! {
        #[test]
        fn chunking_preserves_text(text in "\\PC{0,200}", width in 1usize..40) {
            let chunks = chunks_from_fragments(split_for_streaming(&text, width));
            let joined: String = chunks.iter().map(|c| c.delta_text.as_str()).collect();
            prop_assert_eq!(joined, text);
            prop_assert_eq!(chunks.iter().filter(|c| c.is_final).count(), 1);
            prop_assert!(chunks.last().unwrap().is_final);
        }
    }
}

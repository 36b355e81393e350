//! Replays chunk lists from a fixture file.
//!
//! Fixture format (JSON):
//!
//! ```json
//! {
//!   "entries": [
//!     { "fingerprint": "<sha256 of system NUL user>", "chunks": ["hel", "lo"] },
//!     { "contains": "acido acetilsalicilico", "chunks": ["acetylsalicylic acid"] }
//!   ],
//!   "fallback": ["..."]
//! }
//! ```
//!
//! Entries are tried in order; a `fingerprint` must equal the request's
//! fingerprint, a `contains` must occur in the user prompt.

use std::path::Path;

use async_trait::async_trait;
use futures::stream;
use serde::{Deserialize, Serialize};

use super::{chunks_from_fragments, BackendKind, ChatBackend, ChatRequest, ChunkStream, GatewayError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub chunks: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptFixture {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    fixture: ScriptFixture,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptFixture) -> Self {
        ScriptedBackend { fixture }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let raw =
            std::fs::read_to_string(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let fixture: ScriptFixture =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        for (i, entry) in fixture.entries.iter().enumerate() {
            if entry.fingerprint.is_none() && entry.contains.is_none() {
                return Err(GatewayError::Fixture(format!(
                    "{}: entry {i} has neither fingerprint nor contains",
                    path.display()
                )));
            }
        }
        Ok(ScriptedBackend { fixture })
    }

    /// Adds an entry keyed by the exact prompt pair.
    pub fn with_exact(mut self, system: &str, user: &str, chunks: &[&str]) -> Self {
        self.fixture.entries.push(ScriptEntry {
            fingerprint: Some(super::fingerprint(system, user)),
            contains: None,
            chunks: chunks.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    /// Adds an entry matching any user prompt containing `needle`.
    pub fn with_contains(mut self, needle: &str, chunks: &[&str]) -> Self {
        self.fixture.entries.push(ScriptEntry {
            fingerprint: None,
            contains: Some(needle.to_string()),
            chunks: chunks.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    pub fn with_fallback(mut self, chunks: &[&str]) -> Self {
        self.fixture.fallback = Some(chunks.iter().map(|s| s.to_string()).collect());
        self
    }

    fn lookup(&self, request: &ChatRequest) -> Option<&[String]> {
        let fp = request.fingerprint();
        self.fixture
            .entries
            .iter()
            .find(|e| match (&e.fingerprint, &e.contains) {
                (Some(f), _) => *f == fp,
                (None, Some(needle)) => request.user_prompt.contains(needle.as_str()),
                (None, None) => false,
            })
            .map(|e| e.chunks.as_slice())
            .or(self.fixture.fallback.as_deref())
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    async fn open_stream(&self, request: &ChatRequest) -> Result<ChunkStream, GatewayError> {
        let chunks = self.lookup(request).ok_or_else(|| GatewayError::NoScript {
            fingerprint: request.fingerprint(),
        })?;
        let chunks = chunks_from_fragments(chunks.iter().cloned());
        Ok(Box::pin(stream::iter(chunks.into_iter().map(Ok))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{collect_text, complete_streaming};
    use futures::StreamExt;

    #[tokio::test]
    async fn hello_world() {
        let backend = ScriptedBackend::default().with_exact("s", "u", &["hello", "world"]);
        let stream = complete_streaming(&ChatRequest::new("s", "u"), &backend).await.unwrap();
        let chunks: Vec<_> = stream.map(Result::unwrap).collect().await;
        assert_eq!(chunks.len(), 2);
        assert!(!chunks[0].is_final && chunks[1].is_final);
        let joined: String = chunks.iter().map(|c| c.delta_text.as_str()).collect();
        assert_eq!(joined, "helloworld");
    }

    #[tokio::test]
    async fn repeated_calls_identical() {
        let backend = ScriptedBackend::default().with_contains("note", &["a", "b", "c"]);
        let req = ChatRequest::new("s", "the note");
        let mut outs = Vec::new();
        for _ in 0..5 {
            outs.push(
                collect_text(complete_streaming(&req, &backend).await.unwrap())
                    .await
                    .unwrap(),
            );
        }
        assert!(outs.iter().all(|o| o == "abc"));
    }

    #[tokio::test]
    async fn missing_script_is_an_error() {
        let backend = ScriptedBackend::default();
        let err = complete_streaming(&ChatRequest::new("s", "u"), &backend)
            .await
            .err()
            .unwrap();
        assert!(matches!(err, GatewayError::NoScript { .. }));
        let backend = backend.with_fallback(&["fallback"]);
        let text = collect_text(complete_streaming(&ChatRequest::new("s", "u"), &backend).await.unwrap())
            .await
            .unwrap();
        assert_eq!(text, "fallback");
    }

    #[tokio::test]
    async fn loads_fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        let fp = crate::gateway::fingerprint("s", "u");
        std::fs::write(
            &path,
            format!(r#"{{"entries":[{{"fingerprint":"{fp}","chunks":["x","y"]}}]}}"#),
        )
        .unwrap();
        let backend = ScriptedBackend::from_file(&path).unwrap();
        let text = collect_text(complete_streaming(&ChatRequest::new("s", "u"), &backend).await.unwrap())
            .await
            .unwrap();
        assert_eq!(text, "xy");

        std::fs::write(&path, r#"{"entries":[{"chunks":["x"]}]}"#).unwrap();
        assert!(ScriptedBackend::from_file(&path).is_err());
    }
}

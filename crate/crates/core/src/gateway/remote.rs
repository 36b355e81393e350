//! OpenAI-compatible streaming chat completions.

use std::collections::VecDeque;

use async_trait::async_trait;
use futures::{stream, Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use url::Url;

use super::sse::SseDecoder;
use super::{BackendKind, ChatBackend, ChatChunk, ChatRequest, ChunkStream, GatewayError};
use crate::retry::{with_retry, Attempt, RetryPolicy};

pub struct RemoteBackend {
    client: reqwest::Client,
    endpoint: Url,
    api_key: Option<String>,
    policy: RetryPolicy,
}

impl RemoteBackend {
    /// `base_url` is the service root; `/v1/chat/completions` is appended
    /// unless the URL already ends in `/v1`.
    pub fn new(base_url: &str, api_key: Option<String>, policy: RetryPolicy) -> Result<Self, GatewayError> {
        let trimmed = base_url.trim_end_matches('/');
        let path = if trimmed.ends_with("/v1") {
            "/chat/completions"
        } else {
            "/v1/chat/completions"
        };
        let endpoint = Url::parse(&format!("{trimmed}{path}"))
            .map_err(|e| GatewayError::InvalidRequest(format!("backend URL {base_url:?}: {e}")))?;
        Ok(RemoteBackend {
            client: reqwest::Client::new(),
            endpoint,
            api_key: api_key.filter(|k| !k.is_empty()),
            policy,
        })
    }

    pub fn endpoint(&self) -> &Url {
        &self.endpoint
    }

    fn body(request: &ChatRequest) -> serde_json::Value {
        json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "stream": true,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        })
    }
}

fn transient(status: reqwest::StatusCode) -> bool {
    status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS
}

#[async_trait]
impl ChatBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    async fn open_stream(&self, request: &ChatRequest) -> Result<ChunkStream, GatewayError> {
        let body = Self::body(request);
        let response = with_retry(self.policy, |attempt| {
            let mut req = self.client.post(self.endpoint.clone()).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            async move {
                let resp = match req.send().await {
                    Ok(r) => r,
                    Err(e) => {
                        return Attempt::Retry(GatewayError::Transport {
                            attempts: attempt,
                            message: e.to_string(),
                        })
                    }
                };
                let status = resp.status();
                if status.is_success() {
                    return Attempt::Done(resp);
                }
                let body = resp.text().await.unwrap_or_default();
                let err = GatewayError::Upstream {
                    status: status.as_u16(),
                    body,
                };
                if transient(status) {
                    Attempt::Retry(err)
                } else {
                    Attempt::Fail(err)
                }
            }
        })
        .await
        .map_err(|(err, attempts)| match err {
            GatewayError::Transport { message, .. } => GatewayError::Transport { attempts, message },
            other => other,
        })?;
        Ok(Box::pin(decode_completion_stream(response.bytes_stream())))
    }
}

#[derive(Deserialize)]
struct StreamPayload {
    #[serde(default)]
    choices: Vec<StreamChoice>,
    #[serde(default)]
    error: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct StreamChoice {
    #[serde(default)]
    delta: Option<Delta>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Delta {
    #[serde(default)]
    content: Option<String>,
}

struct DecodeState<S> {
    body: S,
    decoder: SseDecoder,
    /// Held back so the last content delta can carry `is_final`.
    pending: Option<String>,
    queue: VecDeque<Result<ChatChunk, GatewayError>>,
    finish_seen: bool,
    ended: bool,
}

impl<S> DecodeState<S> {
    fn emit_final(&mut self) {
        let delta_text = self.pending.take().unwrap_or_default();
        self.queue.push_back(Ok(ChatChunk {
            delta_text,
            is_final: true,
        }));
        self.ended = true;
    }

    fn fail(&mut self, err: GatewayError) {
        self.queue.push_back(Err(err));
        self.ended = true;
    }

    fn on_data(&mut self, data: &str) {
        if data.trim() == "[DONE]" {
            self.emit_final();
            return;
        }
        let payload: StreamPayload = match serde_json::from_str(data) {
            Ok(p) => p,
            Err(e) => {
                return self.fail(GatewayError::MalformedChunk {
                    raw: data.to_string(),
                    detail: e.to_string(),
                })
            }
        };
        if let Some(err) = payload.error {
            return self.fail(GatewayError::Upstream {
                status: 200,
                body: err.to_string(),
            });
        }
        let Some(choice) = payload.choices.into_iter().next() else {
            return;
        };
        if let Some(text) = choice.delta.and_then(|d| d.content).filter(|t| !t.is_empty()) {
            if let Some(prev) = self.pending.replace(text) {
                self.queue.push_back(Ok(ChatChunk {
                    delta_text: prev,
                    is_final: false,
                }));
            }
        }
        if choice.finish_reason.is_some() {
            self.finish_seen = true;
        }
    }
}

/// Turns a chat-completion SSE body into chunks. The stream ends after the
/// final chunk or after the first error.
pub fn decode_completion_stream<S, B, E>(body: S) -> impl Stream<Item = Result<ChatChunk, GatewayError>> + Send
where
    S: Stream<Item = Result<B, E>> + Send + Unpin + 'static,
    B: AsRef<[u8]> + Send,
    E: std::fmt::Display + Send,
{
    let state = DecodeState {
        body,
        decoder: SseDecoder::new(),
        pending: None,
        queue: VecDeque::new(),
        finish_seen: false,
        ended: false,
    };
    stream::unfold(state, |mut st| async move {
        loop {
            if let Some(item) = st.queue.pop_front() {
                return Some((item, st));
            }
            if st.ended {
                return None;
            }
            match st.body.next().await {
                Some(Ok(bytes)) => {
                    for ev in st.decoder.push(bytes.as_ref()) {
                        if st.ended {
                            break;
                        }
                        st.on_data(&ev.data);
                    }
                }
                Some(Err(e)) => st.fail(GatewayError::Transport {
                    attempts: 1,
                    message: e.to_string(),
                }),
                None => {
                    if let Some(ev) = st.decoder.finish() {
                        st.on_data(&ev.data);
                    }
                    if !st.ended {
                        if st.finish_seen {
                            st.emit_final();
                        } else {
                            st.fail(GatewayError::Truncated);
                        }
                    }
                }
            }
        }
    })
}

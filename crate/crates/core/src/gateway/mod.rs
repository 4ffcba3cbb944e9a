//! Chat-completion gateway.
//!
//! Every model interaction, whether the local detector or the online LLM,
//! goes through [`ChatBackend`]. Three implementations exist: a live
//! OpenAI-compatible HTTP client, scripted mocks, and a record/replay store
//! keyed by [`request_digest`].

mod live;
mod mock;
mod replay;
mod tokens;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use live::{retry_with_backoff, Attempt, OpenAiBackend, OpenAiConfig, RetryPolicy, Semaphore};
pub use mock::{FailingBackend, FnBackend, ScriptedBackend};
pub use replay::{ReplayBackend, ReplayMode, ReplayRecord, ReplayStore};
pub use tokens::count_tokens;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("network failure after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("replay store has no entry for request digest {digest}")]
    ReplayMiss { digest: String },
    #[error("mock script exhausted after {served} response(s)")]
    ScriptExhausted { served: usize },
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("live call refused: {0}")]
    LiveCallRefused(String),
    #[error("replay store {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Distinguishes repeated samples of one prompt.
    #[serde(default)]
    pub sample_tag: String,
}

impl ChatRequest {
    /// Single user-turn request.
    pub fn user(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: prompt.into(),
            }],
            temperature: 0.0,
            max_output_tokens: 1024,
            sample_tag: String::new(),
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn with_sample_tag(mut self, tag: impl Into<String>) -> Self {
        self.sample_tag = tag.into();
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
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

    /// Concatenated message contents, used for approximate prompt accounting.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn approximate(prompt: &str, completion: &str) -> Self {
        Self {
            prompt_tokens: count_tokens(prompt),
            completion_tokens: count_tokens(completion),
        }
    }
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Live,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ChatRequest,
    pub response_text: String,
    pub usage: Usage,
    pub origin: Origin,
}

/// A chat-completion provider. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange, GatewayError> {
        (**self).complete(request)
    }
}

/// Validates and dispatches a request.
pub fn complete(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
) -> Result<ChatExchange, GatewayError> {
    request.validate()?;
    backend.complete(request)
}

/// SHA-256 over a canonical JSON encoding of model, messages, temperature and
/// sample tag. Object keys are sorted, so field order never matters.
pub fn request_digest(request: &ChatRequest) -> String {
    let canonical = json!({
        "model": request.model,
        "messages": request.messages.iter().map(|m| json!({"role": m.role, "content": m.content})).collect::<Vec<_>>(),
        "temperature": request.temperature,
        "sample_tag": request.sample_tag,
    });
    let bytes = serde_json::to_vec(&canonical).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ChatRequest {
        ChatRequest::user("m", "hello").with_temperature(0.7)
    }

    #[test]
    fn digest_is_stable_and_discriminating() {
        assert_eq!(request_digest(&req()), request_digest(&req()));
        assert_ne!(
            request_digest(&req().with_sample_tag("0")),
            request_digest(&req().with_sample_tag("1"))
        );
        assert_ne!(
            request_digest(&req()),
            request_digest(&req().with_temperature(0.0))
        );
        // max_output_tokens is a decoding limit, not part of the identity
        assert_eq!(
            request_digest(&req()),
            request_digest(&req().with_max_output_tokens(7))
        );
    }

    #[test]
    fn digest_ignores_serialized_field_order() {
        let a: ChatRequest = serde_json::from_str(
            r#"{"model":"m","messages":[{"role":"user","content":"hi"}],"temperature":0.5,"max_output_tokens":9,"sample_tag":"3"}"#,
        )
        .unwrap();
        let b: ChatRequest = serde_json::from_str(
            r#"{"sample_tag":"3","temperature":0.5,"max_output_tokens":9,"messages":[{"content":"hi","role":"user"}],"model":"m"}"#,
        )
        .unwrap();
        assert_eq!(request_digest(&a), request_digest(&b));
    }

    #[test]
    fn validation() {
        assert!(req().validate().is_ok());
        let mut r = req();
        r.messages.clear();
        assert!(r.validate().is_err());
        assert!(req().with_temperature(-1.0).validate().is_err());
        assert!(req().with_max_output_tokens(0).validate().is_err());
    }
}

//! Request/response contracts for the visual-question-answering and
//! attribute-expansion services, with bundled deterministic mocks and a
//! JSON-over-HTTP client for live endpoints.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::AttributeKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("service returned status {0}")]
    Status(u16),
    #[error("no answer for {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRequest {
    pub image_ref: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaResponse {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub category: String,
    /// Plural column name: `colors`, `shapes`, `textures` or `locations`.
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub terms: Vec<String>,
}

pub trait VqaClient: Sync {
    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, ClientError>;
}

/// Returns the raw response body; callers parse it.
pub trait LlmClient: Sync {
    fn expand(&self, request: &LlmRequest) -> Result<String, ClientError>;
}

/// Attempts and per-request timeout for a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            timeout_ms: 10_000,
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut last = ClientError::Transport("no attempts made".into());
        for _ in 0..self.attempts.max(1) {
            match f() {
                Ok(v) => return Ok(v),
                Err(ClientError::NotFound(what)) => return Err(ClientError::NotFound(what)),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Table-backed VQA mock. Lookups try `(image_ref, question)` first, then the
/// question alone.
#[derive(Debug, Clone, Default)]
pub struct MockVqa {
    by_image: BTreeMap<(String, String), String>,
    by_question: BTreeMap<String, String>,
    failing: Vec<String>,
}

impl MockVqa {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answers for the default question templates of the bundled categories.
    pub fn bundled() -> Self {
        let mut m = MockVqa::new();
        for (category, kind, answer) in [
            ("polyp", "color", "pink-white"),
            ("polyp", "morphology", "bump-like"),
            ("polyp", "shape", "round"),
            ("polyp", "texture", "smooth"),
            ("polyp", "location", "mucosal"),
            ("red blood cells", "color", "pink"),
            ("red blood cells", "shape", "oval"),
            ("red blood cells", "texture", "smooth"),
            ("red blood cells", "location", "peripheral"),
        ] {
            m = m.answer(&super::forge::question_text(kind, category), answer);
        }
        m
    }

    pub fn answer(mut self, question: &str, answer: &str) -> Self {
        self.by_question.insert(question.to_string(), answer.to_string());
        self
    }

    pub fn answer_for_image(mut self, image_ref: &str, question: &str, answer: &str) -> Self {
        self.by_image
            .insert((image_ref.to_string(), question.to_string()), answer.to_string());
        self
    }

    /// Makes every request carrying this question time out.
    pub fn failing(mut self, question: &str) -> Self {
        self.failing.push(question.to_string());
        self
    }
}

impl VqaClient for MockVqa {
    fn ask(&self, req: &VqaRequest) -> Result<VqaResponse, ClientError> {
        if self.failing.contains(&req.question) {
            return Err(ClientError::Timeout);
        }
        self.by_image
            .get(&(req.image_ref.clone(), req.question.clone()))
            .or_else(|| self.by_question.get(&req.question))
            .map(|a| VqaResponse { answer: a.clone() })
            .ok_or_else(|| ClientError::NotFound(req.question.clone()))
    }
}

/// Serves the bundled category attribute tables as `{"terms": [...]}`.
#[derive(Debug, Clone, Default)]
pub struct FixtureLlm {
    overrides: BTreeMap<(String, String), String>,
}

impl FixtureLlm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the raw response body for one request.
    pub fn with_raw(mut self, category: &str, kind: &str, body: &str) -> Self {
        self.overrides
            .insert((category.to_string(), kind.to_string()), body.to_string());
        self
    }
}

impl LlmClient for FixtureLlm {
    fn expand(&self, req: &LlmRequest) -> Result<String, ClientError> {
        if let Some(raw) = self.overrides.get(&(req.category.clone(), req.kind.clone())) {
            return Ok(raw.clone());
        }
        let kind: AttributeKind = req
            .kind
            .parse()
            .map_err(|_| ClientError::NotFound(format!("kind {}", req.kind)))?;
        let terms = super::fixtures::fixture_terms(&req.category, kind)
            .ok_or_else(|| ClientError::NotFound(format!("category {}", req.category)))?;
        Ok(serde_json::to_string(&LlmResponse { terms }).expect("terms serialize"))
    }
}

/// JSON-over-HTTP client: POSTs the request body to `endpoint`.
#[derive(Debug, Clone)]
pub struct HttpClient {
    endpoint: String,
    timeout: Duration,
    bearer: Option<String>,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        HttpClient {
            endpoint: endpoint.into(),
            timeout,
            bearer: None,
        }
    }

    pub fn with_bearer(mut self, token: impl Into<String>) -> Self {
        self.bearer = Some(token.into());
        self
    }

    fn post<T: Serialize>(&self, body: &T) -> Result<String, ClientError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(tok) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req.send_json(body).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ClientError::Status(status));
        }
        resp.body_mut().read_to_string().map_err(map_ureq)
    }
}

fn map_ureq(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Timeout(_) => ClientError::Timeout,
        ureq::Error::StatusCode(s) => ClientError::Status(s),
        other => ClientError::Transport(other.to_string()),
    }
}

impl VqaClient for HttpClient {
    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, ClientError> {
        let body = self.post(request)?;
        serde_json::from_str(&body).map_err(|e| ClientError::Transport(format!("bad answer body: {e}")))
    }
}

impl LlmClient for HttpClient {
    fn expand(&self, request: &LlmRequest) -> Result<String, ClientError> {
        self.post(request)
    }
}

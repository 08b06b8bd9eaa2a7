//! Single funnel for every LLM call the agents make. The gateway owns
//! token accounting and budget enforcement; backends are swappable so a
//! session can run against a live HTTP endpoint, a recorded transcript,
//! or the deterministic greedy heuristics used in tests.

mod greedy;
mod http;
pub mod payload;
mod scripted;

pub use greedy::GreedyBackend;
pub use http::HttpBackend;
pub use scripted::{ScriptedBackend, TranscriptEntry};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

/// What a request is asking for; determines the expected response shape
/// and which agent the tokens are attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ProposeChildren,
    SelectNode,
    SynthesizeExtraction,
    GenerateInsights,
    VoteInsights,
    FilterConstraints,
}

impl RequestKind {
    pub fn agent(self) -> Agent {
        match self {
            RequestKind::ProposeChildren
            | RequestKind::SelectNode
            | RequestKind::FilterConstraints => Agent::Searcher,
            RequestKind::SynthesizeExtraction => Agent::Extractor,
            RequestKind::GenerateInsights | RequestKind::VoteInsights => Agent::Reflector,
        }
    }
}

/// The four agents of the tuning loop, used as ledger attribution keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Executor,
    Extractor,
    Searcher,
    Reflector,
}

impl Agent {
    pub fn as_str(self) -> &'static str {
        match self {
            Agent::Executor => "executor",
            Agent::Extractor => "extractor",
            Agent::Searcher => "searcher",
            Agent::Reflector => "reflector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub kind: RequestKind,
    pub prompt: String,
    pub max_output: u32,
    pub temperature: f64,
}

impl LlmRequest {
    pub fn new(kind: RequestKind, prompt: impl Into<String>) -> Self {
        LlmRequest {
            kind,
            prompt: prompt.into(),
            max_output: 2048,
            temperature: 0.0,
        }
    }

    fn check(&self) -> Result<(), LlmError> {
        if self.prompt.is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} must be a finite value >= 0",
                self.temperature
            )));
        }
        if self.max_output == 0 {
            return Err(LlmError::InvalidRequest("max_output must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub backend_id: String,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("token budget exceeded: spent {total} of {budget}")]
    BudgetExceeded { total: u64, budget: u64 },
    #[error("scripted transcript exhausted for {kind:?}")]
    TranscriptExhausted { kind: RequestKind },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Deterministic token estimate for offline backends: ceil(chars / 4).
/// The HTTP backend overrides this with provider-reported usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Cumulative token spending, attributed per agent and per iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub per_agent: BTreeMap<String, u64>,
    /// (iteration index, tokens spent during it), in iteration order.
    pub per_iteration: Vec<(u32, u64)>,
    pub total: u64,
}

impl TokenLedger {
    pub fn record(&mut self, iteration: u32, agent: Agent, tokens: u64) {
        *self.per_agent.entry(agent.as_str().to_string()).or_insert(0) += tokens;
        match self.per_iteration.last_mut() {
            Some((it, spent)) if *it == iteration => *spent += tokens,
            _ => self.per_iteration.push((iteration, tokens)),
        }
        self.total += tokens;
    }

    /// Cumulative total up to and including `iteration`.
    pub fn cumulative_through(&self, iteration: u32) -> u64 {
        self.per_iteration
            .iter()
            .filter(|(it, _)| *it <= iteration)
            .map(|(_, t)| t)
            .sum()
    }
}

/// A completion provider. Implementations must be stateless per call
/// apart from deliberate transcript cursors.
pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

struct GatewayState {
    ledger: TokenLedger,
    iteration: u32,
    transcript: Vec<TranscriptEntry>,
}

/// Routes every agent call to the configured backend, retries transient
/// transport failures, enforces the session token budget, and records a
/// transcript that can later drive the scripted backend.
pub struct Gateway {
    backend: Box<dyn LlmBackend>,
    token_budget: Option<u64>,
    max_attempts: u32,
    backoff: Duration,
    state: Mutex<GatewayState>,
}

const DEFAULT_MAX_ATTEMPTS: u32 = 3;
const DEFAULT_BACKOFF: Duration = Duration::from_millis(200);

impl Gateway {
    pub fn new(backend: Box<dyn LlmBackend>, token_budget: Option<u64>) -> Self {
        Gateway {
            backend,
            token_budget,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            backoff: DEFAULT_BACKOFF,
            state: Mutex::new(GatewayState {
                ledger: TokenLedger::default(),
                iteration: 0,
                transcript: Vec::new(),
            }),
        }
    }

    pub fn with_retry(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn token_budget(&self) -> Option<u64> {
        self.token_budget
    }

    /// Attribute subsequent calls to this iteration.
    pub fn set_iteration(&self, iteration: u32) {
        self.state.lock().unwrap().iteration = iteration;
    }

    pub fn ledger(&self) -> TokenLedger {
        self.state.lock().unwrap().ledger.clone()
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.state.lock().unwrap().transcript.clone()
    }

    /// Restore accounting state when resuming a persisted session.
    pub fn restore(&self, ledger: TokenLedger, transcript: Vec<TranscriptEntry>, iteration: u32) {
        let mut state = self.state.lock().unwrap();
        state.ledger = ledger;
        state.transcript = transcript;
        state.iteration = iteration;
    }

    /// Perform one completion. Tokens are attributed to the agent that
    /// owns the request kind and to the current iteration; a request
    /// arriving with the ledger already at the budget is refused.
    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.check()?;
        if let Some(budget) = self.token_budget {
            let total = self.state.lock().unwrap().ledger.total;
            if total >= budget {
                return Err(LlmError::BudgetExceeded { total, budget });
            }
        }

        let mut last_err = None;
        let mut response = None;
        for attempt in 0..self.max_attempts {
            match self.backend.complete(request) {
                Ok(r) => {
                    response = Some(r);
                    break;
                }
                Err(LlmError::Transport(detail)) => {
                    last_err = Some(LlmError::Transport(detail));
                    if attempt + 1 < self.max_attempts {
                        std::thread::sleep(self.backoff);
                    }
                }
                Err(other) => return Err(other),
            }
        }
        let response = match response {
            Some(r) => r,
            None => return Err(last_err.expect("at least one attempt ran")),
        };

        let mut state = self.state.lock().unwrap();
        let iteration = state.iteration;
        state.ledger.record(
            iteration,
            request.kind.agent(),
            response.tokens_in + response.tokens_out,
        );
        state.transcript.push(TranscriptEntry {
            kind: request.kind,
            text: response.text.clone(),
            tokens_in: response.tokens_in,
            tokens_out: response.tokens_out,
        });
        Ok(response)
    }
}

//! Chat-completion backends for the four participant roles.

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    parse_analyst_reply, parse_judge_reply, AgentError, AgentView, Analyst, ChatMessage,
    ChatRole, Decision, Judge, Participant, Side,
};
use crate::money::Money;
use crate::prompts::{
    self, analyst_context, buyer_context, greeting_context, judge_context, seller_context,
    PromptError, PromptTemplate, Role, StrategyAction, TemplateSet,
};

pub const MAX_RETRIES_LIMIT: u32 = 5;

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}

/// Connection settings for one model behind a chat-completion API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// `None` leaves sampling temperature to the provider.
    #[serde(default)]
    pub temperature: Option<f64>,
    /// First backoff delay; doubled on every retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

impl AgentEndpoint {
    pub fn new(base_url: &str, model_name: &str, api_key_env: &str) -> Self {
        AgentEndpoint {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            api_key_env: api_key_env.to_string(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            temperature: None,
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(format!(
                "max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.max_retries
            ));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("timeout must be positive, got {}", self.timeout_secs));
        }
        // also rejects NaN
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if matches!(self.temperature, Some(t) if !(t >= 0.0)) {
            return Err("temperature must be >= 0".into());
        }
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err("base_url and model_name are required".into());
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn api_key(&self) -> Result<String, AgentError> {
        match std::env::var(&self.api_key_env) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(AgentError::Auth(format!(
                "environment variable {} is not set",
                self.api_key_env
            ))),
        }
    }
}

/// Token bucket shared by every client in a run.
#[derive(Debug)]
pub struct RateLimiter {
    per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    /// `requests_per_minute` of zero disables limiting.
    pub fn new(requests_per_minute: u32) -> Self {
        let capacity = f64::from(requests_per_minute.max(1));
        RateLimiter {
            per_sec: f64::from(requests_per_minute) / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until a request token is available.
    pub fn acquire(&self) {
        if self.per_sec <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut st = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_sec;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.per_sec
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// One HTTP attempt as recorded for tracing. Never contains credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEntry {
    pub model: String,
    pub attempt: u32,
    pub request: Value,
    pub status: Option<u16>,
    pub response: Option<String>,
    pub error: Option<String>,
}

/// Shared, append-only wire trace.
#[derive(Debug, Clone, Default)]
pub struct WireLog(Arc<Mutex<Vec<WireEntry>>>);

impl WireLog {
    pub fn push(&self, entry: WireEntry) {
        self.0.lock().expect("wire log poisoned").push(entry);
    }
    pub fn entries(&self) -> Vec<WireEntry> {
        self.0.lock().expect("wire log poisoned").clone()
    }
    pub fn take(&self) -> Vec<WireEntry> {
        std::mem::take(&mut *self.0.lock().expect("wire log poisoned"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
}

/// Reusable client for one endpoint.
#[derive(Clone)]
pub struct ChatClient {
    pub endpoint: AgentEndpoint,
    agent: ureq::Agent,
    limiter: Option<Arc<RateLimiter>>,
    wire: Option<WireLog>,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.endpoint)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Done(String),
    Retry(AgentError),
    Fatal(AgentError),
}

impl ChatClient {
    pub fn new(endpoint: AgentEndpoint) -> Self {
        let config = ureq::config::Config::builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .build();
        ChatClient {
            endpoint,
            agent: ureq::Agent::new_with_config(config),
            limiter: None,
            wire: None,
        }
    }

    pub fn with_rate_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_wire_log(mut self, wire: WireLog) -> Self {
        self.wire = Some(wire);
        self
    }

    /// Copy of this client with a different sampling temperature.
    pub fn with_temperature(&self, temperature: Option<f64>) -> Self {
        let mut c = self.clone();
        c.endpoint.temperature = temperature;
        c
    }

    pub fn complete(&self, history: &[ChatMessage]) -> Result<Completion, AgentError> {
        let key = self.endpoint.api_key()?;
        check_history(history)?;
        let mut body = json!({ "model": self.endpoint.model_name, "messages": history });
        if let Some(t) = self.endpoint.temperature {
            body["temperature"] = json!(t);
        }
        let url = self.endpoint.url();
        let max_retries = self.endpoint.max_retries.min(MAX_RETRIES_LIMIT);
        let mut retries = 0;
        loop {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            match self.attempt(&url, &key, &body, retries) {
                Attempt::Done(text) => return Ok(Completion { text, retries }),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    if retries >= max_retries {
                        return Err(match e {
                            AgentError::RateLimited { .. } => AgentError::RateLimited { retries },
                            AgentError::Transport { message, .. } => {
                                AgentError::Transport { message, retries }
                            }
                            other => other,
                        });
                    }
                    log::debug!("{}: retrying after {e}", self.endpoint.model_name);
                    thread::sleep(self.backoff(retries));
                    retries += 1;
                }
            }
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.endpoint.backoff_base_ms as f64 * 2f64.powi(retry as i32);
        let jitter = rand::random_range(0.0..0.25);
        Duration::from_secs_f64(base * (1.0 + jitter) / 1000.0)
    }

    fn attempt(&self, url: &str, key: &str, body: &Value, attempt: u32) -> Attempt {
        let mut entry = WireEntry {
            model: self.endpoint.model_name.clone(),
            attempt,
            request: body.clone(),
            status: None,
            response: None,
            error: None,
        };
        let result = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(body);
        let outcome = match result {
            Err(e) => {
                entry.error = Some(e.to_string());
                Attempt::Retry(AgentError::Transport {
                    message: e.to_string(),
                    retries: attempt,
                })
            }
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                entry.status = Some(status);
                let text = resp.body_mut().read_to_string();
                match text {
                    Err(e) => {
                        entry.error = Some(e.to_string());
                        Attempt::Retry(AgentError::Transport {
                            message: e.to_string(),
                            retries: attempt,
                        })
                    }
                    Ok(text) => {
                        entry.response = Some(text.clone());
                        classify_response(status, &text, attempt)
                    }
                }
            }
        };
        if let Some(w) = &self.wire {
            w.push(entry);
        }
        outcome
    }
}

fn check_history(history: &[ChatMessage]) -> Result<(), AgentError> {
    let systems = history.iter().filter(|m| m.role == ChatRole::System).count();
    if history.first().map(|m| m.role) != Some(ChatRole::System) || systems != 1 {
        return Err(AgentError::History(
            "history must start with exactly one system message".into(),
        ));
    }
    if history[1..].iter().any(|m| m.content.trim().is_empty()) {
        return Err(AgentError::History("empty user or assistant message".into()));
    }
    Ok(())
}

fn classify_response(status: u16, text: &str, attempt: u32) -> Attempt {
    match status {
        200..=299 => {}
        401 | 403 => return Attempt::Fatal(AgentError::Auth(format!("HTTP {status}"))),
        429 => return Attempt::Retry(AgentError::RateLimited { retries: attempt }),
        500..=599 => {
            return Attempt::Retry(AgentError::Transport {
                message: format!("HTTP {status}"),
                retries: attempt,
            })
        }
        _ => {
            return Attempt::Fatal(AgentError::BadResponse(format!(
                "HTTP {status}: {}",
                truncate(text, 200)
            )))
        }
    }
    let v: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Attempt::Fatal(AgentError::BadResponse(format!("invalid JSON: {e}"))),
    };
    match v.pointer("/choices/0/message/content") {
        Some(Value::String(s)) if !s.trim().is_empty() => Attempt::Done(s.trim().to_string()),
        Some(Value::String(_)) | Some(Value::Null) => Attempt::Fatal(AgentError::EmptyCompletion),
        _ => Attempt::Fatal(AgentError::BadResponse(format!(
            "no choices[0].message.content in {}",
            truncate(text, 200)
        ))),
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// One-shot completion against `endpoint`.
pub fn chat_complete(endpoint: &AgentEndpoint, history: &[ChatMessage]) -> Result<String, AgentError> {
    ChatClient::new(endpoint.clone()).complete(history).map(|c| c.text)
}

const OPENING_REQUEST: &str = "Write your opening message to the seller.";

/// Buyer or seller played by a chat model. Own utterances become assistant
/// turns, the opponent's become user turns.
#[derive(Debug)]
pub struct RemoteParticipant {
    id: String,
    side: Side,
    client: ChatClient,
    system_prompt: String,
    greeting_prompt: Option<String>,
    pub retries: u32,
}

impl RemoteParticipant {
    /// Buyer with the base system prompt, or the strategy-extended one when
    /// `strategy` is given.
    pub fn buyer(
        id: impl Into<String>,
        client: ChatClient,
        templates: &TemplateSet,
        product: &super::PublicProduct,
        budget: Money,
        strategy: Option<&StrategyAction>,
    ) -> Result<Self, PromptError> {
        let system: PromptTemplate = match strategy {
            Some(a) => templates.strategy_prompt(a),
            None => templates.get(Role::BuyerSystem).clone(),
        };
        Ok(RemoteParticipant {
            id: id.into(),
            side: Side::Buyer,
            client,
            system_prompt: prompts::render(&system, &buyer_context(product, budget))?,
            greeting_prompt: Some(prompts::render(
                templates.get(Role::BuyerGreeting),
                &greeting_context(product, None),
            )?),
            retries: 0,
        })
    }

    pub fn seller(
        id: impl Into<String>,
        client: ChatClient,
        templates: &TemplateSet,
        product: &crate::catalog::Product,
    ) -> Result<Self, PromptError> {
        Ok(RemoteParticipant {
            id: id.into(),
            side: Side::Seller,
            client,
            system_prompt: prompts::render(
                templates.get(Role::SellerSystem),
                &seller_context(product),
            )?,
            greeting_prompt: None,
            retries: 0,
        })
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    /// Chat history this participant would send for `view`.
    pub fn messages(&self, view: &AgentView<'_>) -> Vec<ChatMessage> {
        let mut out = vec![ChatMessage::system(self.system_prompt.clone())];
        if view.history.is_empty() {
            if let Some(g) = &self.greeting_prompt {
                out.push(ChatMessage::user(g.clone()));
            } else {
                out.push(ChatMessage::user(OPENING_REQUEST));
            }
            return out;
        }
        for u in view.history {
            out.push(if u.speaker == self.side {
                ChatMessage::assistant(u.text.clone())
            } else {
                ChatMessage::user(u.text.clone())
            });
        }
        out
    }
}

impl Participant for RemoteParticipant {
    fn id(&self) -> &str {
        &self.id
    }

    fn speak(&mut self, view: &AgentView<'_>) -> Result<String, AgentError> {
        let c = self.client.complete(&self.messages(view))?;
        self.retries += c.retries;
        Ok(c.text)
    }
}

/// Judge backed by a chat model; temperature defaults to 0.
#[derive(Debug, Clone)]
pub struct RemoteJudge {
    client: ChatClient,
    template: PromptTemplate,
}

impl RemoteJudge {
    pub fn new(client: ChatClient, templates: &TemplateSet) -> Self {
        let t = client.endpoint.temperature.or(Some(0.0));
        RemoteJudge {
            client: client.with_temperature(t),
            template: templates.get(Role::Judge).clone(),
        }
    }
}

impl Judge for RemoteJudge {
    fn classify(
        &self,
        buyer_message: &str,
        seller_message: Option<&str>,
    ) -> Result<Decision, AgentError> {
        let prompt = prompts::render(&self.template, &judge_context(buyer_message, seller_message))
            .map_err(|e| AgentError::History(e.to_string()))?;
        let reply = self.client.complete(&[
            ChatMessage::system(prompt),
            ChatMessage::user("Classify the buyer's latest message."),
        ])?;
        Ok(parse_judge_reply(&reply.text))
    }
}

/// Analyst backed by a chat model; temperature defaults to 0.
#[derive(Debug, Clone)]
pub struct RemoteAnalyst {
    client: ChatClient,
    template: PromptTemplate,
}

impl RemoteAnalyst {
    pub fn new(client: ChatClient, templates: &TemplateSet) -> Self {
        let t = client.endpoint.temperature.or(Some(0.0));
        RemoteAnalyst {
            client: client.with_temperature(t),
            template: templates.get(Role::Analyst).clone(),
        }
    }
}

impl Analyst for RemoteAnalyst {
    fn extract(&self, seller_message: &str) -> Result<Option<Money>, AgentError> {
        let prompt = prompts::render(&self.template, &analyst_context(seller_message))
            .map_err(|e| AgentError::History(e.to_string()))?;
        let reply = self.client.complete(&[
            ChatMessage::system(prompt),
            ChatMessage::user("Return the price."),
        ])?;
        Ok(parse_analyst_reply(&reply.text))
    }
}

//! OpenAI-compatible chat-completions backend. Sends the serialized context
//! as a user message with function-style tool specs attached and parses the
//! first tool call out of the response.

use super::{
    parse_selection, serialize_context, SelectionContext, SelectionError, SelectionResult,
    SelectorBackend, DEFAULT_CONTEXT_BUDGET,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::time::Duration;

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "AMA_API_KEY";

/// Connection settings for a chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub temperature: f64,
    /// Independent samples per query for probability estimation.
    #[serde(default = "default_samples")]
    pub samples_per_query: u32,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_samples() -> u32 {
    1
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://localhost:8000".to_string(),
            model: "default-model".to_string(),
            timeout_secs: default_timeout_secs(),
            temperature: 0.0,
            samples_per_query: default_samples(),
        }
    }
}

/// POST one chat-completions request and return the parsed JSON body.
/// `messages` follow the wire layout; `tools` are function-style specs.
pub fn chat_completion(
    client: &reqwest::blocking::Client,
    cfg: &HttpConfig,
    messages: Vec<Value>,
    tools: Option<Vec<Value>>,
) -> Result<Value, SelectionError> {
    let api_key =
        std::env::var(API_KEY_ENV).map_err(|_| SelectionError::MissingApiKey(API_KEY_ENV))?;
    let url = format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/'));
    let mut body = json!({
        "model": cfg.model,
        "messages": messages,
        "temperature": cfg.temperature,
    });
    if let Some(tools) = tools {
        body["tools"] = Value::Array(tools);
        body["tool_choice"] = Value::String("auto".to_string());
    }
    let response = client
        .post(&url)
        .bearer_auth(api_key)
        .json(&body)
        .send()
        .map_err(|e| SelectionError::Transport {
            detail: format!("POST {url}: {e}"),
        })?;
    let status = response.status();
    let text = response.text().map_err(|e| SelectionError::Transport {
        detail: format!("reading body from {url}: {e}"),
    })?;
    if status.is_server_error() {
        return Err(SelectionError::Transport {
            detail: format!("{url} returned {status}: {text}"),
        });
    }
    if !status.is_success() {
        return Err(SelectionError::Protocol {
            detail: format!("{url} returned {status}: {text}"),
        });
    }
    serde_json::from_str(&text).map_err(|e| SelectionError::Protocol {
        detail: format!("response from {url} is not JSON: {e}"),
    })
}

/// Selector backend speaking the chat-completions protocol.
pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    context_budget: usize,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, SelectionError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| SelectionError::Transport {
                detail: format!("building HTTP client: {e}"),
            })?;
        Ok(HttpBackend {
            cfg,
            client,
            context_budget: DEFAULT_CONTEXT_BUDGET,
        })
    }

    pub fn with_context_budget(mut self, budget: usize) -> Self {
        self.context_budget = budget;
        self
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }
}

impl SelectorBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}@{}", self.cfg.model, self.cfg.base_url)
    }

    fn sample_count(&self) -> u32 {
        self.cfg.samples_per_query.max(1)
    }

    fn select(&self, ctx: &SelectionContext) -> Result<SelectionResult, SelectionError> {
        let doc = serialize_context(ctx, self.context_budget)?;
        let mut messages = Vec::new();
        if !ctx.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": ctx.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": doc.text}));
        let response = chat_completion(&self.client, &self.cfg, messages, Some(doc.tool_specs))?;
        match parse_selection(&response, &ctx.toolset) {
            Ok(result) => Ok(result),
            // An answer without a tool call is a measurable outcome (the
            // candidate was not selected), not a failure of the run.
            Err(SelectionError::NoToolCall) => Ok(SelectionResult::none()),
            Err(other) => Err(other),
        }
    }
}

//! Tool selection: serializes a selection context into a prompt (plain text
//! or MCP-style tool list), asks a selector backend which tool it would call,
//! and parses the chosen call. Ships a deterministic lexical backend for
//! offline runs, an OpenAI-compatible HTTP backend, and a read-through result
//! cache with bounded retries.

pub mod http;
pub mod lexical;

use crate::toolmeta::{ToolCatalog, ToolMetadata};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

/// Default character budget for a serialized selection prompt.
pub const DEFAULT_CONTEXT_BUDGET: usize = 200_000;

/// How the toolset is rendered into the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    #[default]
    Plain,
    Mcp,
}

impl ProtocolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolMode::Plain => "plain",
            ProtocolMode::Mcp => "mcp",
        }
    }
}

/// Everything a selector backend sees for one decision: the query, the agent
/// system prompt, the accumulated observation, and the presented toolset.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionContext {
    pub query: String,
    pub system_prompt: String,
    pub observation: String,
    pub toolset: ToolCatalog,
    pub protocol_mode: ProtocolMode,
}

impl SelectionContext {
    pub fn new(query: &str, toolset: ToolCatalog) -> Self {
        SelectionContext {
            query: query.to_string(),
            system_prompt: String::new(),
            observation: String::new(),
            toolset,
            protocol_mode: ProtocolMode::Plain,
        }
    }

    /// Enforce the context invariants: non-empty toolset, distinct tool names.
    pub fn ensure_valid(&self) -> Result<(), SelectionError> {
        if self.toolset.tools.is_empty() {
            return Err(SelectionError::InvalidContext {
                detail: "toolset is empty".to_string(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for tool in &self.toolset.tools {
            if !seen.insert(tool.name.as_str()) {
                return Err(SelectionError::InvalidContext {
                    detail: format!("duplicate tool name {:?} in toolset", tool.name),
                });
            }
        }
        Ok(())
    }

    /// Stable content hash covering every field that can change a selection.
    pub fn cache_hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.query.as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.system_prompt.as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.observation.as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.protocol_mode.as_str().as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.toolset.catalog_id.as_bytes());
        for tool in &self.toolset.tools {
            hasher.update(tool.canonical_hash().to_be_bytes());
        }
        let digest = hasher.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// The parsed outcome of one selection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_tool: Option<String>,
    #[serde(default)]
    pub call_arguments: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl SelectionResult {
    pub fn none() -> Self {
        SelectionResult {
            chosen_tool: None,
            call_arguments: IndexMap::new(),
            raw: None,
        }
    }
}

/// Errors from serialization, backends, and parsing.
#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("invalid selection context: {detail}")]
    InvalidContext { detail: String },
    #[error("serialized context is {chars} chars, budget is {budget}")]
    ContextTooLarge { chars: usize, budget: usize },
    #[error("backend answered without invoking a tool")]
    NoToolCall,
    #[error("backend invoked unknown tool {name:?}")]
    UnknownTool { name: String },
    #[error("malformed tool-call arguments: {detail}")]
    MalformedArguments { detail: String },
    #[error("malformed backend response: {detail}")]
    Protocol { detail: String },
    #[error("transport failure: {detail}")]
    Transport { detail: String },
    #[error("missing API key: set the {0} environment variable")]
    MissingApiKey(&'static str),
}

/// A serialized selection prompt plus the structured tool specs an HTTP
/// backend attaches to the request.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDocument {
    pub text: String,
    pub tool_specs: Vec<Value>,
}

/// Function-style tool spec for a chat-completions `tools` array.
pub fn openai_tool_spec(meta: &ToolMetadata) -> Value {
    json!({
        "type": "function",
        "function": {
            "name": meta.name,
            "description": meta.description,
            "parameters": param_schema(meta),
        }
    })
}

/// One entry of an MCP-style tool list.
pub fn mcp_tool_entry(meta: &ToolMetadata) -> Value {
    json!({
        "name": meta.name,
        "description": meta.description,
        "inputSchema": param_schema(meta),
    })
}

/// The complete MCP-style tool list document for a catalog.
pub fn mcp_tool_list(catalog: &ToolCatalog) -> Value {
    json!({ "tools": catalog.tools.iter().map(mcp_tool_entry).collect::<Vec<_>>() })
}

fn param_schema(meta: &ToolMetadata) -> Value {
    let mut properties = serde_json::Map::new();
    let mut required = Vec::new();
    for (name, spec) in &meta.parameters {
        properties.insert(
            name.clone(),
            json!({ "type": spec.param_type.as_str(), "description": spec.description }),
        );
        if spec.required {
            required.push(Value::String(name.clone()));
        }
    }
    json!({ "type": "object", "properties": properties, "required": required })
}

fn plain_tool_line(index: usize, meta: &ToolMetadata) -> String {
    let mut line = format!("{}. {}: {}", index + 1, meta.name, meta.description);
    if !meta.parameters.is_empty() {
        let params: Vec<String> = meta
            .parameters
            .iter()
            .map(|(name, spec)| {
                format!(
                    "{} ({}{}): {}",
                    name,
                    spec.param_type.as_str(),
                    if spec.required { ", required" } else { "" },
                    spec.description
                )
            })
            .collect();
        line.push_str(&format!(" [parameters: {}]", params.join("; ")));
    }
    line
}

/// Render the context into a prompt document. Every tool's name, description,
/// and parameter schema appears exactly once, in catalog order.
pub fn serialize_context(
    ctx: &SelectionContext,
    budget: usize,
) -> Result<PromptDocument, SelectionError> {
    ctx.ensure_valid()?;
    let mut text = String::new();
    text.push_str("Task:\n");
    text.push_str(&ctx.query);
    text.push_str("\n\n");
    match ctx.protocol_mode {
        ProtocolMode::Plain => {
            text.push_str("Available tools:\n");
            for (i, tool) in ctx.toolset.tools.iter().enumerate() {
                text.push_str(&plain_tool_line(i, tool));
                text.push('\n');
            }
        }
        ProtocolMode::Mcp => {
            text.push_str("Available tools (MCP tool list):\n```json\n");
            let doc = serde_json::to_string_pretty(&mcp_tool_list(&ctx.toolset))
                .expect("tool list serializes");
            text.push_str(&doc);
            text.push_str("\n```\n");
        }
    }
    if !ctx.observation.is_empty() {
        text.push_str("\nObservation:\n");
        text.push_str(&ctx.observation);
        text.push('\n');
    }
    text.push_str("\nInvoke the single tool best suited to the task.");
    let tool_specs: Vec<Value> = ctx.toolset.tools.iter().map(openai_tool_spec).collect();
    let chars = text.chars().count()
        + tool_specs
            .iter()
            .map(|s| s.to_string().chars().count())
            .sum::<usize>();
    if chars > budget {
        return Err(SelectionError::ContextTooLarge { chars, budget });
    }
    Ok(PromptDocument { text, tool_specs })
}

fn argument_value_to_string(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Extract the first tool invocation from a chat-completions response body.
pub fn parse_selection(
    response: &Value,
    toolset: &ToolCatalog,
) -> Result<SelectionResult, SelectionError> {
    let message = response
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(|| SelectionError::Protocol {
            detail: "response lacks choices[0].message".to_string(),
        })?;
    let calls = match message.get("tool_calls").and_then(|t| t.as_array()) {
        Some(calls) if !calls.is_empty() => calls,
        _ => return Err(SelectionError::NoToolCall),
    };
    let function = calls[0]
        .get("function")
        .ok_or_else(|| SelectionError::Protocol {
            detail: "tool call lacks a function object".to_string(),
        })?;
    let name = function
        .get("name")
        .and_then(|n| n.as_str())
        .ok_or_else(|| SelectionError::Protocol {
            detail: "tool call lacks function.name".to_string(),
        })?;
    let mut call_arguments = IndexMap::new();
    match function.get("arguments") {
        None | Some(Value::Null) => {}
        Some(Value::String(encoded)) => {
            if !encoded.trim().is_empty() {
                let parsed: Value =
                    serde_json::from_str(encoded).map_err(|e| SelectionError::MalformedArguments {
                        detail: format!("arguments are not valid JSON: {e}"),
                    })?;
                let object = parsed
                    .as_object()
                    .ok_or_else(|| SelectionError::MalformedArguments {
                        detail: "arguments JSON is not an object".to_string(),
                    })?;
                for (k, v) in object {
                    call_arguments.insert(k.clone(), argument_value_to_string(v));
                }
            }
        }
        Some(Value::Object(object)) => {
            for (k, v) in object {
                call_arguments.insert(k.clone(), argument_value_to_string(v));
            }
        }
        Some(other) => {
            return Err(SelectionError::MalformedArguments {
                detail: format!("arguments field has unexpected shape: {other}"),
            })
        }
    }
    if toolset.tool(name).is_none() {
        return Err(SelectionError::UnknownTool {
            name: name.to_string(),
        });
    }
    Ok(SelectionResult {
        chosen_tool: Some(name.to_string()),
        call_arguments,
        raw: Some(message.to_string()),
    })
}

/// A selector backend turns one context into one selection result. Backends
/// must be deterministic for identical inputs or declare a sample count used
/// for probability estimation.
pub trait SelectorBackend: Send + Sync {
    fn id(&self) -> String;
    fn select(&self, ctx: &SelectionContext) -> Result<SelectionResult, SelectionError>;
    /// Independent samples to draw per query when estimating probabilities.
    fn sample_count(&self) -> u32 {
        1
    }
}

/// Retry policy for transport failures: bounded attempts with exponential
/// backoff. Non-transport errors are never retried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 100,
        }
    }
}

/// Read-through caching front end over a selector backend. The cache key is
/// (backend id, context hash, sample index); it can be disabled per run.
pub struct Selector {
    backend: Box<dyn SelectorBackend>,
    cache: Option<Mutex<HashMap<u64, SelectionResult>>>,
    retry: RetryPolicy,
    backend_calls: AtomicU64,
}

impl Selector {
    pub fn new(backend: Box<dyn SelectorBackend>) -> Self {
        Selector {
            backend,
            cache: Some(Mutex::new(HashMap::new())),
            retry: RetryPolicy::default(),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn sample_count(&self) -> u32 {
        self.backend.sample_count().max(1)
    }

    /// Number of calls that actually reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    fn cache_key(&self, ctx: &SelectionContext, sample_idx: u32) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.backend.id().as_bytes());
        hasher.update([0x1f]);
        hasher.update(ctx.cache_hash().to_be_bytes());
        hasher.update(sample_idx.to_be_bytes());
        let digest = hasher.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn select(&self, ctx: &SelectionContext) -> Result<SelectionResult, SelectionError> {
        self.select_sample(ctx, 0)
    }

    /// Select with an explicit sample index so repeated stochastic draws of
    /// the same context occupy distinct cache slots.
    pub fn select_sample(
        &self,
        ctx: &SelectionContext,
        sample_idx: u32,
    ) -> Result<SelectionResult, SelectionError> {
        ctx.ensure_valid()?;
        let key = self.cache_key(ctx, sample_idx);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
                return Ok(hit.clone());
            }
        }
        let mut attempt = 0;
        let result = loop {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.select(ctx) {
                Ok(result) => break result,
                Err(SelectionError::Transport { detail }) => {
                    attempt += 1;
                    if attempt >= self.retry.max_attempts {
                        return Err(SelectionError::Transport { detail });
                    }
                    let delay = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 1));
                    if delay > 0 {
                        std::thread::sleep(std::time::Duration::from_millis(delay));
                    }
                }
                Err(other) => return Err(other),
            }
        };
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .expect("cache lock")
                .insert(key, result.clone());
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolmeta::ParamSpec;
    use std::sync::atomic::AtomicU32;

    fn catalog() -> ToolCatalog {
        let mut cat = ToolCatalog::new("test");
        cat.tools.push(
            ToolMetadata::new("weather_now", "current weather conditions")
                .with_param("city", ParamSpec::required_string("city name")),
        );
        cat.tools
            .push(ToolMetadata::new("stock_quote", "stock prices"));
        cat
    }

    #[test]
    fn plain_serialization_lists_each_tool_once_in_order() {
        let ctx = SelectionContext::new("weather in Paris", catalog());
        let doc = serialize_context(&ctx, DEFAULT_CONTEXT_BUDGET).unwrap();
        assert_eq!(doc.text.matches("weather_now").count(), 1);
        assert_eq!(doc.text.matches("stock_quote").count(), 1);
        assert!(doc.text.find("weather_now").unwrap() < doc.text.find("stock_quote").unwrap());
        assert_eq!(doc.tool_specs.len(), 2);
    }

    #[test]
    fn mcp_serialization_uses_input_schema_layout() {
        let mut ctx = SelectionContext::new("weather in Paris", catalog());
        ctx.protocol_mode = ProtocolMode::Mcp;
        let doc = serialize_context(&ctx, DEFAULT_CONTEXT_BUDGET).unwrap();
        assert!(doc.text.contains("\"inputSchema\""));
        assert_eq!(doc.text.matches("\"weather_now\"").count(), 1);
    }

    #[test]
    fn oversized_context_is_rejected() {
        let ctx = SelectionContext::new("weather in Paris", catalog());
        let err = serialize_context(&ctx, 10).unwrap_err();
        assert!(matches!(err, SelectionError::ContextTooLarge { budget: 10, .. }));
    }

    #[test]
    fn parse_selection_extracts_first_call() {
        let response = json!({
            "choices": [{
                "message": {
                    "tool_calls": [{
                        "function": {
                            "name": "weather_now",
                            "arguments": "{\"city\": \"Paris\"}"
                        }
                    }]
                }
            }]
        });
        let result = parse_selection(&response, &catalog()).unwrap();
        assert_eq!(result.chosen_tool.as_deref(), Some("weather_now"));
        assert_eq!(result.call_arguments.get("city").map(String::as_str), Some("Paris"));
    }

    #[test]
    fn parse_selection_flags_no_call_and_unknown_tool() {
        let no_call = json!({"choices": [{"message": {"content": "just text"}}]});
        assert!(matches!(
            parse_selection(&no_call, &catalog()),
            Err(SelectionError::NoToolCall)
        ));
        let ghost = json!({
            "choices": [{"message": {"tool_calls": [{"function": {"name": "ghost_tool", "arguments": "{}"}}]}}]
        });
        assert!(matches!(
            parse_selection(&ghost, &catalog()),
            Err(SelectionError::UnknownTool { name }) if name == "ghost_tool"
        ));
    }

    #[test]
    fn parse_selection_stringifies_scalar_arguments() {
        let response = json!({
            "choices": [{"message": {"tool_calls": [{"function": {
                "name": "weather_now",
                "arguments": {"city": 42, "flag": true, "blank": null}
            }}]}}]
        });
        let result = parse_selection(&response, &catalog()).unwrap();
        assert_eq!(result.call_arguments.get("city").map(String::as_str), Some("42"));
        assert_eq!(result.call_arguments.get("flag").map(String::as_str), Some("true"));
        assert_eq!(result.call_arguments.get("blank").map(String::as_str), Some(""));
    }

    struct CountingBackend {
        hits: AtomicU32,
        fail_first: u32,
    }

    impl SelectorBackend for CountingBackend {
        fn id(&self) -> String {
            "counting".to_string()
        }
        fn select(&self, ctx: &SelectionContext) -> Result<SelectionResult, SelectionError> {
            let n = self.hits.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(SelectionError::Transport {
                    detail: "flaky".to_string(),
                });
            }
            Ok(SelectionResult {
                chosen_tool: Some(ctx.toolset.tools[0].name.clone()),
                call_arguments: IndexMap::new(),
                raw: None,
            })
        }
    }

    #[test]
    fn cache_suppresses_repeat_backend_traffic() {
        let selector = Selector::new(Box::new(CountingBackend {
            hits: AtomicU32::new(0),
            fail_first: 0,
        }));
        let ctx = SelectionContext::new("weather in Paris", catalog());
        selector.select(&ctx).unwrap();
        selector.select(&ctx).unwrap();
        assert_eq!(selector.backend_calls(), 1);
        let mut other = ctx.clone();
        other.toolset.tools[0].description.push('x');
        selector.select(&other).unwrap();
        assert_eq!(selector.backend_calls(), 2);
    }

    #[test]
    fn disabled_cache_always_calls_backend() {
        let selector = Selector::new(Box::new(CountingBackend {
            hits: AtomicU32::new(0),
            fail_first: 0,
        }))
        .without_cache();
        let ctx = SelectionContext::new("weather in Paris", catalog());
        for _ in 0..3 {
            selector.select(&ctx).unwrap();
        }
        assert_eq!(selector.backend_calls(), 3);
    }

    #[test]
    fn transport_errors_are_retried_with_bound() {
        let selector = Selector::new(Box::new(CountingBackend {
            hits: AtomicU32::new(0),
            fail_first: 2,
        }))
        .with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 0,
        });
        let ctx = SelectionContext::new("weather in Paris", catalog());
        assert!(selector.select(&ctx).is_ok());
        assert_eq!(selector.backend_calls(), 3);

        let exhausted = Selector::new(Box::new(CountingBackend {
            hits: AtomicU32::new(0),
            fail_first: 99,
        }))
        .with_retry(RetryPolicy {
            max_attempts: 2,
            base_delay_ms: 0,
        });
        assert!(matches!(
            exhausted.select(&ctx),
            Err(SelectionError::Transport { .. })
        ));
        assert_eq!(exhausted.backend_calls(), 2);
    }

    #[test]
    fn distinct_sample_indices_occupy_distinct_cache_slots() {
        let selector = Selector::new(Box::new(CountingBackend {
            hits: AtomicU32::new(0),
            fail_first: 0,
        }));
        let ctx = SelectionContext::new("weather in Paris", catalog());
        selector.select_sample(&ctx, 0).unwrap();
        selector.select_sample(&ctx, 1).unwrap();
        selector.select_sample(&ctx, 0).unwrap();
        assert_eq!(selector.backend_calls(), 2);
    }
}

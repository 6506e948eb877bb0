//! LLM-backed generator: renders the generation prompt, asks a
//! chat-completions endpoint for a catalog-format document, and parses the
//! proposed tools out of the reply.

use super::{GenerationError, GeneratorBackend, GeneratorConfig, ParentRef};
use crate::selection::http::{chat_completion, HttpConfig};
use crate::toolmeta::{parse_catalog, QuerySet, ToolCatalog, ToolMetadata};
use serde_json::json;
use std::time::Duration;

/// Fill the prompt template's placeholders from the generation inputs.
pub fn render_template(
    template: &str,
    queries: &QuerySet,
    catalog: &ToolCatalog,
    parent: Option<&ParentRef>,
    batch_size: usize,
) -> String {
    let query_block = queries
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {}", i + 1, q.text))
        .collect::<Vec<_>>()
        .join("\n");
    let tools_block =
        serde_json::to_string_pretty(&catalog.tools).expect("catalog tools serialize");
    let parent_block = match parent {
        Some(p) => json!({
            "name": p.metadata.name,
            "description": p.metadata.description,
            "parameters": p.metadata.parameters,
            "selection_rate": p.p,
        })
        .to_string(),
        None => "none".to_string(),
    };
    template
        .replace("{queries}", &query_block)
        .replace("{tools}", &tools_block)
        .replace("{parent}", &parent_block)
        .replace("{batch_size}", &batch_size.to_string())
}

fn extract_json_document(content: &str) -> Option<&str> {
    let start = content.find('{')?;
    let end = content.rfind('}')?;
    if end < start {
        return None;
    }
    Some(&content[start..=end])
}

/// Generator backend that asks a chat-completions model for candidates.
pub struct LlmGenerator {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
}

impl LlmGenerator {
    pub fn new(cfg: HttpConfig) -> Result<Self, GenerationError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GenerationError::Backend {
                detail: format!("building HTTP client: {e}"),
            })?;
        Ok(LlmGenerator { cfg, client })
    }
}

impl GeneratorBackend for LlmGenerator {
    fn id(&self) -> String {
        format!("llm:{}@{}", self.cfg.model, self.cfg.base_url)
    }

    fn propose(
        &self,
        queries: &QuerySet,
        catalog: &ToolCatalog,
        cfg: &GeneratorConfig,
        parent: Option<&ParentRef>,
        salt: u64,
    ) -> Result<Vec<ToolMetadata>, GenerationError> {
        cfg.ensure_valid()?;
        let mut prompt =
            render_template(&cfg.prompt_template, queries, catalog, parent, cfg.batch_size);
        if salt > 0 {
            prompt.push_str(&format!(
                "\n\nThis is regeneration round {salt}; propose a fresh batch distinct from earlier ones."
            ));
        }
        let messages = vec![json!({"role": "user", "content": prompt})];
        let response = chat_completion(&self.client, &self.cfg, messages, None).map_err(|e| {
            GenerationError::Backend {
                detail: e.to_string(),
            }
        })?;
        let content = response
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content"))
            .and_then(|c| c.as_str())
            .ok_or_else(|| GenerationError::BadBatchDocument {
                detail: "response lacks choices[0].message.content".to_string(),
            })?;
        let document =
            extract_json_document(content).ok_or_else(|| GenerationError::BadBatchDocument {
                detail: "no JSON object found in model reply".to_string(),
            })?;
        let parsed = parse_catalog(document, "generation-response").map_err(|e| {
            GenerationError::BadBatchDocument {
                detail: e.to_string(),
            }
        })?;
        Ok(parsed.tools)
    }
}

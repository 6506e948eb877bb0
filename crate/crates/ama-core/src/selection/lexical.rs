//! Deterministic lexical selector: a transparent scoring rule that stands in
//! for an LLM's tool choice during offline runs, so every probability in the
//! pipeline can be cross-checked by brute force.

use super::{SelectionContext, SelectionError, SelectionResult, SelectorBackend};
use crate::defenses::GUARDRAIL_MARKER;
use crate::generation::AttractorLexicon;
use crate::toolmeta::ToolMetadata;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Weights of the three scoring terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LexicalWeights {
    pub overlap: f64,
    pub attractor: f64,
    pub param_match: f64,
}

impl Default for LexicalWeights {
    fn default() -> Self {
        LexicalWeights {
            overlap: 1.0,
            attractor: 0.5,
            param_match: 0.25,
        }
    }
}

/// Lowercase, split on non-alphanumerics, drop tokens shorter than 2 chars.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_string)
        .collect()
}

/// Score one tool against a tokenized query:
/// overlap weight times the fraction of query tokens found in the tool's
/// name plus description, attractor weight per lexicon phrase contained in
/// the description, and param weight per schema parameter name appearing as
/// a query token.
pub fn score_tool(
    query_tokens: &BTreeSet<String>,
    tool: &ToolMetadata,
    lexicon: &AttractorLexicon,
    weights: &LexicalWeights,
) -> f64 {
    let overlap = if query_tokens.is_empty() {
        0.0
    } else {
        let tool_tokens: BTreeSet<String> =
            tokenize(&format!("{} {}", tool.name, tool.description))
                .into_iter()
                .collect();
        let shared = query_tokens.intersection(&tool_tokens).count();
        shared as f64 / query_tokens.len() as f64
    };
    let description = tool.description.to_lowercase();
    let attractors = lexicon
        .phrases
        .iter()
        .filter(|phrase| description.contains(&phrase.to_lowercase()))
        .count();
    let param_hits = tool
        .parameters
        .keys()
        .filter(|name| query_tokens.contains(&name.to_lowercase()))
        .count();
    weights.overlap * overlap
        + weights.attractor * attractors as f64
        + weights.param_match * param_hits as f64
}

fn fill_arguments(
    tool: &ToolMetadata,
    query_tokens: &BTreeSet<String>,
) -> IndexMap<String, String> {
    let mut args = IndexMap::new();
    for name in tool.parameters.keys() {
        let token = name.to_lowercase();
        if query_tokens.contains(&token) {
            args.insert(name.clone(), token);
        } else {
            args.insert(name.clone(), String::new());
        }
    }
    args
}

/// Pure argmax selection under the lexical score; ties break to the
/// lexicographically smallest tool name.
pub fn lexical_select(
    ctx: &SelectionContext,
    lexicon: &AttractorLexicon,
    weights: &LexicalWeights,
) -> SelectionResult {
    let query_tokens: BTreeSet<String> = tokenize(&ctx.query).into_iter().collect();
    let mut best: Option<(&ToolMetadata, f64)> = None;
    let mut transcript = Vec::new();
    for tool in &ctx.toolset.tools {
        let score = score_tool(&query_tokens, tool, lexicon, weights);
        transcript.push(format!("{}={:.6}", tool.name, score));
        best = match best {
            None => Some((tool, score)),
            Some((winner, top)) => {
                if score > top || (score == top && tool.name < winner.name) {
                    Some((tool, score))
                } else {
                    Some((winner, top))
                }
            }
        };
    }
    match best {
        Some((tool, _)) => SelectionResult {
            chosen_tool: Some(tool.name.clone()),
            call_arguments: fill_arguments(tool, &query_tokens),
            raw: Some(format!("lexical scores: {}", transcript.join(", "))),
        },
        None => SelectionResult::none(),
    }
}

/// [`SelectorBackend`] wrapper around [`lexical_select`]. When the system
/// prompt carries the guardrail marker, the attractor weight is reduced by
/// `guardrail_penalty`, emulating a selector that has been told to distrust
/// overly broad metadata.
pub struct LexicalBackend {
    pub weights: LexicalWeights,
    pub lexicon: AttractorLexicon,
    pub guardrail_marker: String,
    pub guardrail_penalty: f64,
}

impl LexicalBackend {
    pub fn new(lexicon: AttractorLexicon) -> Self {
        LexicalBackend {
            weights: LexicalWeights::default(),
            lexicon,
            guardrail_marker: GUARDRAIL_MARKER.to_string(),
            guardrail_penalty: 0.0,
        }
    }

    pub fn with_weights(mut self, weights: LexicalWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_guardrail_penalty(mut self, penalty: f64) -> Self {
        self.guardrail_penalty = penalty;
        self
    }

    fn effective_weights(&self, ctx: &SelectionContext) -> LexicalWeights {
        let mut weights = self.weights;
        if self.guardrail_penalty != 0.0
            && !self.guardrail_marker.is_empty()
            && ctx.system_prompt.contains(&self.guardrail_marker)
        {
            weights.attractor -= self.guardrail_penalty;
        }
        weights
    }
}

impl SelectorBackend for LexicalBackend {
    fn id(&self) -> String {
        format!(
            "lexical:o{:.3}:a{:.3}:p{:.3}:g{:.3}",
            self.weights.overlap,
            self.weights.attractor,
            self.weights.param_match,
            self.guardrail_penalty
        )
    }

    fn select(&self, ctx: &SelectionContext) -> Result<SelectionResult, SelectionError> {
        ctx.ensure_valid()?;
        let weights = self.effective_weights(ctx);
        Ok(lexical_select(ctx, &self.lexicon, &weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolmeta::{ParamSpec, ToolCatalog};

    fn two_tool_ctx() -> SelectionContext {
        let mut cat = ToolCatalog::new("demo");
        cat.tools
            .push(ToolMetadata::new("weather_now", "current weather"));
        cat.tools.push(ToolMetadata::new("stock_quote", "stocks"));
        SelectionContext::new("weather in Paris", cat)
    }

    #[test]
    fn tokenize_lowercases_splits_and_drops_short_tokens() {
        assert_eq!(
            tokenize("Weather in Paris, a BIG-city?"),
            vec!["weather", "in", "paris", "big", "city"]
        );
        assert!(tokenize("a . !").is_empty());
    }

    #[test]
    fn weather_query_prefers_weather_tool() {
        // Hand-computed: query tokens {weather, in, paris}.
        // weather_now tokens {weather, now, current} share {weather} -> 1/3.
        // stock_quote tokens {stock, quote, stocks} share none -> 0.
        let ctx = two_tool_ctx();
        let result = lexical_select(&ctx, &AttractorLexicon::default(), &LexicalWeights::default());
        assert_eq!(result.chosen_tool.as_deref(), Some("weather_now"));
    }

    #[test]
    fn ties_break_to_lexicographically_smallest_name() {
        let mut cat = ToolCatalog::new("tie");
        cat.tools.push(ToolMetadata::new("b_tool", "same text"));
        cat.tools.push(ToolMetadata::new("a_tool", "same text"));
        let ctx = SelectionContext::new("unrelated query", cat);
        let result = lexical_select(&ctx, &AttractorLexicon::default(), &LexicalWeights::default());
        assert_eq!(result.chosen_tool.as_deref(), Some("a_tool"));
    }

    #[test]
    fn lexicon_phrase_never_decreases_score() {
        let lexicon = AttractorLexicon::default();
        let weights = LexicalWeights::default();
        let tokens: BTreeSet<String> = tokenize("check the market news").into_iter().collect();
        let base = ToolMetadata::new("market_news", "market headlines");
        let mut boosted = base.clone();
        boosted.description.push_str(" comprehensive");
        assert!(
            score_tool(&tokens, &boosted, &lexicon, &weights)
                >= score_tool(&tokens, &base, &lexicon, &weights)
        );
    }

    #[test]
    fn parameter_names_matching_query_tokens_are_echoed() {
        let mut cat = ToolCatalog::new("args");
        cat.tools.push(
            ToolMetadata::new("stock_quote", "stock price quote")
                .with_param("symbol", ParamSpec::required_string("ticker"))
                .with_param("venue", ParamSpec::required_string("exchange")),
        );
        let ctx = SelectionContext::new("quote the symbol AAPL", cat);
        let result = lexical_select(&ctx, &AttractorLexicon::default(), &LexicalWeights::default());
        assert_eq!(result.call_arguments.get("symbol").map(String::as_str), Some("symbol"));
        assert_eq!(result.call_arguments.get("venue").map(String::as_str), Some(""));
    }

    #[test]
    fn empty_query_scores_only_structural_terms() {
        let tokens: BTreeSet<String> = BTreeSet::new();
        let mut tool = ToolMetadata::new("anything", "plain text");
        assert_eq!(
            score_tool(&tokens, &tool, &AttractorLexicon::default(), &LexicalWeights::default()),
            0.0
        );
        tool.description.push_str(" comprehensive");
        assert_eq!(
            score_tool(&tokens, &tool, &AttractorLexicon::default(), &LexicalWeights::default()),
            0.5
        );
    }

    #[test]
    fn guardrail_marker_reduces_attractor_weight() {
        let mut cat = ToolCatalog::new("guard");
        cat.tools.push(ToolMetadata::new(
            "broad_helper",
            "comprehensive help, insight across domains",
        ));
        cat.tools
            .push(ToolMetadata::new("weather_now", "current weather report"));
        let backend = LexicalBackend::new(AttractorLexicon::default()).with_guardrail_penalty(0.5);
        let mut ctx = SelectionContext::new("weather in Paris", cat);
        let unguarded = backend.select(&ctx).unwrap();
        assert_eq!(unguarded.chosen_tool.as_deref(), Some("broad_helper"));
        ctx.system_prompt = format!("agent rules {GUARDRAIL_MARKER} reject anomalous tools");
        let guarded = backend.select(&ctx).unwrap();
        assert_eq!(guarded.chosen_tool.as_deref(), Some("weather_now"));
    }
}

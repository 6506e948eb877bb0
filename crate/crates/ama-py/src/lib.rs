//! Python bindings over the tool-selection harness. Structured inputs and
//! outputs cross the boundary as JSON strings so the Python side needs no
//! generated classes: parse what comes back with `json.loads`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ama_core::defenses::{apply_refuge, default_guardrail, PatternRewriter, QueryRewriter};
use ama_core::generation::AttractorLexicon;
use ama_core::harness::scenario::{load_scenarios, pooled_environment, DEFAULT_SYSTEM_ROLE};
use ama_core::harness::{
    build_generator, build_selector, generator_config, parse_experiment_config, run_experiment,
    Knowledge,
};
use ama_core::optimizer::{EvalContext, Optimizer};
use ama_core::selection::lexical::{LexicalBackend, LexicalWeights};
use ama_core::selection::{SelectionContext, Selector};
use ama_core::toolmeta::{parse_catalog, validate_metadata as core_validate, ToolMetadata};
use ama_core::{metrics, optimizer, toolmeta};

fn bad_input(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_failed(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_tool(tool_json: &str) -> PyResult<ToolMetadata> {
    serde_json::from_str(tool_json).map_err(bad_input)
}

/// Violation messages for one tool's metadata document; empty means valid.
#[pyfunction]
fn validate_metadata(tool_json: &str) -> PyResult<Vec<String>> {
    let tool = parse_tool(tool_json)?;
    Ok(core_validate(&tool).iter().map(|v| v.to_string()).collect())
}

/// Stable content hash of one tool's metadata document.
#[pyfunction]
fn canonical_hash(tool_json: &str) -> PyResult<u64> {
    Ok(parse_tool(tool_json)?.canonical_hash())
}

/// Character-level edit distance.
#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    metrics::levenshtein(a, b)
}

/// Similarity of a leaked value to the ground truth, in [0, 1].
#[pyfunction]
fn privacy_leakage(leaked: &str, truth: &str) -> f64 {
    metrics::privacy_leakage(leaked, truth)
}

/// Candidate ranking value: p_child plus weighted improvement over the parent.
#[pyfunction]
fn weighted_value(p_child: f64, p_parent: f64, improvement_weight: f64) -> f64 {
    optimizer::weighted_value(p_child, p_parent, improvement_weight)
}

/// Drop query sentences matching injection patterns; defaults to the
/// built-in pattern list.
#[pyfunction]
#[pyo3(signature = (query, patterns=None))]
fn rewrite_query(query: &str, patterns: Option<Vec<String>>) -> PyResult<String> {
    let rewriter = match patterns {
        Some(patterns) => PatternRewriter::new(&patterns).map_err(bad_input)?,
        None => PatternRewriter::default(),
    };
    rewriter.rewrite(query).map_err(run_failed)
}

/// Append a guardrail to a system prompt, idempotently; defaults to the
/// built-in guardrail text.
#[pyfunction]
#[pyo3(signature = (system_prompt, guardrail=None))]
fn apply_guardrail(system_prompt: &str, guardrail: Option<String>) -> String {
    let guardrail = guardrail.unwrap_or_else(default_guardrail);
    apply_refuge(system_prompt, &guardrail)
}

/// Deterministic lexical tool selection over a catalog JSON document.
/// Returns the selection result as JSON: chosen_tool, call_arguments, raw.
#[pyfunction]
#[pyo3(signature = (query, catalog_json, system_prompt="", guardrail_penalty=0.3))]
fn lexical_select(
    query: &str,
    catalog_json: &str,
    system_prompt: &str,
    guardrail_penalty: f64,
) -> PyResult<String> {
    let catalog = parse_catalog(catalog_json, "catalog argument").map_err(bad_input)?;
    let backend = LexicalBackend::new(AttractorLexicon::default())
        .with_weights(LexicalWeights::default())
        .with_guardrail_penalty(guardrail_penalty);
    let selector = Selector::new(Box::new(backend));
    let mut ctx = SelectionContext::new(query, catalog);
    ctx.system_prompt = system_prompt.to_string();
    let result = selector.select(&ctx).map_err(run_failed)?;
    serde_json::to_string(&result).map_err(run_failed)
}

/// Fraction of queries whose argmax selection is the candidate tool when it
/// is offered alongside the benign catalog, under the lexical selector.
#[pyfunction]
#[pyo3(signature = (candidate_json, queries_json, catalog_json, system_prompt="", guardrail_penalty=0.3))]
fn invocation_probability(
    candidate_json: &str,
    queries_json: &str,
    catalog_json: &str,
    system_prompt: &str,
    guardrail_penalty: f64,
) -> PyResult<f64> {
    let candidate = parse_tool(candidate_json)?;
    let queries = toolmeta::parse_queries(queries_json, "queries argument").map_err(bad_input)?;
    let benign = parse_catalog(catalog_json, "catalog argument").map_err(bad_input)?;
    let backend =
        LexicalBackend::new(AttractorLexicon::default()).with_guardrail_penalty(guardrail_penalty);
    let selector = Selector::new(Box::new(backend));
    let mut eval = EvalContext::new(&selector);
    eval.system_prompt = system_prompt.to_string();
    optimizer::evaluate_invocation_probability(&candidate, &queries, &benign, &eval)
        .map_err(run_failed)
}

/// Run the iterative metadata search described by an experiment config JSON
/// document. Writes archive.json and best_tool.json under out_dir and
/// returns a JSON summary: iterations, candidates, converged, best.
#[pyfunction]
fn optimize(config_json: &str, out_dir: &str) -> PyResult<String> {
    let cfg = parse_experiment_config(config_json).map_err(bad_input)?;
    cfg.ensure_valid().map_err(bad_input)?;
    std::fs::create_dir_all(out_dir).map_err(run_failed)?;

    let scenarios = load_scenarios(&cfg.fixtures_dir, &cfg.scenarios).map_err(bad_input)?;
    let selector = build_selector(&cfg).map_err(bad_input)?;
    let generator = build_generator(&cfg).map_err(bad_input)?;

    let single_targeted = scenarios.len() == 1 && cfg.knowledge.contains(&Knowledge::Targeted);
    let (catalog, queries, system_prompt) = if single_targeted {
        (
            scenarios[0].catalog.clone(),
            scenarios[0].queries.clone(),
            scenarios[0].system_role.clone(),
        )
    } else {
        let (catalog, queries, _) = pooled_environment(&scenarios);
        (catalog, queries, DEFAULT_SYSTEM_ROLE.to_string())
    };

    let mut eval = EvalContext::new(&selector);
    eval.protocol_mode = cfg.protocol_mode;
    eval.system_prompt = system_prompt;
    eval.samples_per_query = cfg.optimizer.samples_per_query;

    let archive_path = std::path::Path::new(out_dir).join("archive.json");
    let runner = Optimizer {
        queries: &queries,
        benign: &catalog,
        generator: generator.as_ref(),
        generator_cfg: generator_config(&cfg),
        eval,
        cfg: cfg.optimizer,
        checkpoint_path: Some(archive_path.clone()),
    };
    let result = runner.run().map_err(run_failed)?;

    let best_path = std::path::Path::new(out_dir).join("best_tool.json");
    let best_doc = serde_json::json!({
        "catalog_id": "best_tool",
        "tools": [result.best.metadata],
    });
    std::fs::write(&best_path, serde_json::to_vec_pretty(&best_doc).map_err(run_failed)?)
        .map_err(run_failed)?;

    let summary = serde_json::json!({
        "iterations": result.iterations_run,
        "candidates": result.archive.len(),
        "converged": result.converged,
        "best": {"id": result.best.id, "p": result.best.p},
        "archive": archive_path,
        "best_tool": best_path,
    });
    serde_json::to_string(&summary).map_err(run_failed)
}

/// Run the full attack / defense / knowledge matrix described by an
/// experiment config JSON document. Writes outcomes.ndjson, report.json,
/// and report.csv under out_dir and returns the report rows as JSON.
#[pyfunction]
fn attack_eval(config_json: &str, out_dir: &str) -> PyResult<String> {
    let cfg = parse_experiment_config(config_json).map_err(bad_input)?;
    let output =
        run_experiment(&cfg, std::path::Path::new(out_dir)).map_err(run_failed)?;
    let body = serde_json::json!({
        "trials": output.records,
        "rows": output.rows,
        "outcome_log": output.outcome_log,
        "report_json": output.report_json,
        "report_csv": output.report_csv,
    });
    serde_json::to_string(&body).map_err(run_failed)
}

#[pymodule]
fn ama_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(validate_metadata, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_hash, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(privacy_leakage, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_value, m)?)?;
    m.add_function(wrap_pyfunction!(rewrite_query, m)?)?;
    m.add_function(wrap_pyfunction!(apply_guardrail, m)?)?;
    m.add_function(wrap_pyfunction!(lexical_select, m)?)?;
    m.add_function(wrap_pyfunction!(invocation_probability, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(attack_eval, m)?)?;
    Ok(())
}

//! The `ama` command-line interface.
//!
//! Subcommands: `optimize` (search for the most-selected metadata and write
//! the archive plus the best tool), `attack-eval` (run the full attack ×
//! defense matrix and write reports), `report` (re-aggregate a raw outcome
//! log), and `validate` (check corpus files). Exit codes: 0 success, 2
//! config or input error, 3 backend failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::harness::scenario::{
    load_fixture_profile, load_scenarios, pooled_environment, DEFAULT_SYSTEM_ROLE,
};
use crate::harness::{
    aggregate_rows, build_generator, build_selector, generator_config, read_outcome_log,
    run_experiment, write_report_files, ExperimentConfig, HarnessError, Knowledge,
};
use crate::optimizer::{EvalContext, Optimizer, OptimizerError};
use crate::selection::SelectionError;
use crate::toolmeta::{load_catalog, load_profile, load_queries, ToolCatalog};

#[derive(Debug, Parser)]
#[command(
    name = "ama",
    version,
    about = "Red-team harness for metadata-level attacks on LLM tool selection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize malicious tool metadata against the configured scenarios.
    Optimize(RunArgs),
    /// Run the attack x knowledge x defense matrix and write reports.
    AttackEval(RunArgs),
    /// Re-aggregate a raw outcome log into report files.
    Report(ReportArgs),
    /// Validate corpus fixtures or an experiment config.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Plain,
    Mcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Lexical,
    Http,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config file (UTF-8 JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bound internal parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Override the toolset serialization mode.
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Override the selector backend binding.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dotted-path config overrides, e.g. --set optimizer.batch_size=8;
    /// values parse as JSON when possible, else as strings. Last flag wins.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Raw outcome log (one JSON record per line).
    pub log: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Validate an experiment config and everything it references.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus files (catalog, queries, profile) or scenario directories.
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{detail}")]
    Usage { detail: String },
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        CliError::Harness(HarnessError::Optimizer(e))
    }
}

fn usage(detail: impl Into<String>) -> CliError {
    CliError::Usage {
        detail: detail.into(),
    }
}

fn selection_exit_code(err: &SelectionError) -> i32 {
    match err {
        SelectionError::InvalidContext { .. }
        | SelectionError::ContextTooLarge { .. }
        | SelectionError::MissingApiKey(_) => 2,
        SelectionError::NoToolCall
        | SelectionError::UnknownTool { .. }
        | SelectionError::MalformedArguments { .. }
        | SelectionError::Protocol { .. }
        | SelectionError::Transport { .. } => 3,
    }
}

fn optimizer_exit_code(err: &OptimizerError) -> i32 {
    match err {
        OptimizerError::EmptyQuerySet
        | OptimizerError::BadConfig { .. }
        | OptimizerError::UnknownCandidate { .. } => 2,
        OptimizerError::Selection(e) => selection_exit_code(e),
        OptimizerError::Generation(_) | OptimizerError::Checkpoint { .. } => 3,
    }
}

/// 2 for config/input problems, 3 for backend and write failures.
pub fn exit_code_for(err: &CliError) -> i32 {
    match err {
        CliError::Usage { .. } => 2,
        CliError::Harness(harness) => match harness {
            HarnessError::Scenario(_)
            | HarnessError::Meta(_)
            | HarnessError::Defense(_)
            | HarnessError::Metrics(_)
            | HarnessError::BadConfig { .. }
            | HarnessError::CorruptLog { .. } => 2,
            HarnessError::Selection(e) => selection_exit_code(e),
            HarnessError::Optimizer(e) => optimizer_exit_code(e),
            HarnessError::Generation(_)
            | HarnessError::Csv(_)
            | HarnessError::EmptyBatch
            | HarnessError::Io { .. } => 3,
        },
    }
}

/// Set one dotted-path key in a JSON document, creating intermediate
/// objects as needed.
pub fn apply_override(doc: &mut Value, path: &str, raw_value: &str) -> Result<(), CliError> {
    let value: Value =
        serde_json::from_str(raw_value).unwrap_or_else(|_| Value::String(raw_value.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("override path {path:?} has an empty segment")));
    }
    let mut cursor = doc;
    for part in &parts[..parts.len() - 1] {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| usage(format!("override path {path:?} crosses a non-object value")))?;
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let map = cursor
        .as_object_mut()
        .ok_or_else(|| usage(format!("override path {path:?} crosses a non-object value")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Read the config file and apply --set pairs, then the dedicated flags.
pub fn load_config_with_overrides(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {} does not parse: {e}", args.config.display())))?;
    for pair in &args.overrides {
        let (path, value) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects PATH=VALUE, got {pair:?}")))?;
        apply_override(&mut doc, path, value)?;
    }
    if let Some(seed) = args.seed {
        apply_override(&mut doc, "seed", &seed.to_string())?;
    }
    if let Some(jobs) = args.jobs {
        apply_override(&mut doc, "jobs", &jobs.to_string())?;
    }
    if let Some(protocol) = args.protocol {
        let name = match protocol {
            ProtocolArg::Plain => "plain",
            ProtocolArg::Mcp => "mcp",
        };
        apply_override(&mut doc, "protocol_mode", &format!("{name:?}"))?;
    }
    if let Some(backend) = args.backend {
        let name = match backend {
            BackendArg::Lexical => "lexical",
            BackendArg::Http => "http",
        };
        apply_override(&mut doc, "backend", &format!("{name:?}"))?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc)
        .map_err(|e| usage(format!("config invalid after overrides: {e}")))?;
    cfg.ensure_valid()?;
    Ok(cfg)
}

fn configure_jobs(cfg: &ExperimentConfig) {
    if let Some(jobs) = cfg.jobs {
        if jobs > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| {
        CliError::Harness(HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn cmd_optimize(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config_with_overrides(args)?;
    configure_jobs(&cfg);
    std::fs::create_dir_all(&args.out).map_err(|source| {
        CliError::Harness(HarnessError::Io {
            path: args.out.clone(),
            source,
        })
    })?;
    let scenarios = load_scenarios(&cfg.fixtures_dir, &cfg.scenarios)
        .map_err(HarnessError::Scenario)?;
    let selector = build_selector(&cfg)?;
    let generator = build_generator(&cfg)?;
    let generator_cfg = generator_config(&cfg);

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

    let archive_path = args.out.join("archive.json");
    let optimizer = Optimizer {
        queries: &queries,
        benign: &catalog,
        generator: generator.as_ref(),
        generator_cfg,
        eval,
        cfg: cfg.optimizer,
        checkpoint_path: Some(archive_path.clone()),
    };
    let result = optimizer.run()?;

    let best_path = args.out.join("best_tool.json");
    let best_catalog = ToolCatalog {
        catalog_id: "best_tool".to_string(),
        tools: vec![result.best.metadata.clone()],
    };
    write_json(&best_path, &best_catalog)?;

    println!(
        "optimize: {} iterations, {} candidates, best id {} p {:.4}{}",
        result.iterations_run,
        result.archive.len(),
        result.best.id,
        result.best.p,
        if result.converged {
            " (threshold reached)"
        } else {
            ""
        }
    );
    println!("archive: {}", archive_path.display());
    println!("best tool: {}", best_path.display());
    Ok(())
}

fn cmd_attack_eval(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config_with_overrides(args)?;
    configure_jobs(&cfg);
    let output = run_experiment(&cfg, &args.out)?;
    println!(
        "attack-eval: {} trials, {} report rows",
        output.records,
        output.rows.len()
    );
    println!("outcomes: {}", output.outcome_log.display());
    println!("report: {}", output.report_json.display());
    println!("report: {}", output.report_csv.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let records = read_outcome_log(&args.log)?;
    if records.is_empty() {
        return Err(usage(format!(
            "outcome log {} holds no records",
            args.log.display()
        )));
    }
    let rows = aggregate_rows(&records)?;
    std::fs::create_dir_all(&args.out).map_err(|source| {
        CliError::Harness(HarnessError::Io {
            path: args.out.clone(),
            source,
        })
    })?;
    let (json_path, csv_path) = write_report_files(&rows, &args.out)?;
    println!(
        "report: {} records, {} rows",
        records.len(),
        rows.len()
    );
    println!("report: {}", json_path.display());
    println!("report: {}", csv_path.display());
    Ok(())
}

fn validate_scenario_dir(dir: &Path) -> Result<String, CliError> {
    let catalog = load_catalog(&dir.join("catalog.json")).map_err(HarnessError::Meta)?;
    catalog.check().map_err(HarnessError::Meta)?;
    let mut parts = vec![format!("{} tools", catalog.tools.len())];
    let queries_path = dir.join("queries.json");
    if queries_path.is_file() {
        let queries = load_queries(&queries_path).map_err(HarnessError::Meta)?;
        for (index, query) in queries.queries.iter().enumerate() {
            if let Some(expected) = &query.expected_tool {
                if catalog.tool(expected).is_none() {
                    return Err(usage(format!(
                        "{}: query {index} expects unknown tool {expected:?}",
                        queries_path.display()
                    )));
                }
            }
        }
        parts.push(format!("{} queries", queries.queries.len()));
    }
    let results_path = dir.join("results.json");
    if results_path.is_file() {
        let text = std::fs::read_to_string(&results_path)
            .map_err(|e| usage(format!("cannot read {}: {e}", results_path.display())))?;
        let results: std::collections::HashMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| usage(format!("{} does not parse: {e}", results_path.display())))?;
        parts.push(format!("{} results", results.len()));
    }
    Ok(parts.join(", "))
}

fn validate_path(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        return validate_scenario_dir(path).map(|d| format!("scenario dir: {d}"));
    }
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    if file_name == "profile.json" {
        let profile = load_profile(path).map_err(HarnessError::Meta)?;
        return Ok(format!("profile: {} fields", profile.entries().count()));
    }
    if file_name.contains("queries") {
        let queries = load_queries(path).map_err(HarnessError::Meta)?;
        return Ok(format!("queries: {}", queries.queries.len()));
    }
    let catalog = load_catalog(path).map_err(HarnessError::Meta)?;
    catalog.check().map_err(HarnessError::Meta)?;
    Ok(format!("catalog: {} tools", catalog.tools.len()))
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    if args.config.is_none() && args.paths.is_empty() {
        return Err(usage("nothing to validate: pass --config and/or corpus paths"));
    }
    if let Some(config_path) = &args.config {
        let run_args = RunArgs {
            config: config_path.clone(),
            seed: None,
            jobs: None,
            protocol: None,
            backend: None,
            out: PathBuf::from("out"),
            overrides: Vec::new(),
        };
        let cfg = load_config_with_overrides(&run_args)?;
        let scenarios = load_scenarios(&cfg.fixtures_dir, &cfg.scenarios)
            .map_err(HarnessError::Scenario)?;
        let profile = load_fixture_profile(&cfg.fixtures_dir).map_err(HarnessError::Meta)?;
        println!(
            "ok: {} ({} scenarios, profile with {} fields)",
            config_path.display(),
            scenarios.len(),
            profile.entries().count()
        );
        for scenario in &scenarios {
            println!(
                "ok: scenario {} ({} tools, {} queries)",
                scenario.id,
                scenario.catalog.tools.len(),
                scenario.queries.queries.len()
            );
        }
    }
    for path in &args.paths {
        let detail = validate_path(path)?;
        println!("ok: {} ({detail})", path.display());
    }
    Ok(())
}

/// Parse argv and dispatch; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Optimize(args) => cmd_optimize(args),
        Command::AttackEval(args) => cmd_attack_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_and_scalar_keys() {
        let mut doc: Value = serde_json::from_str(r#"{"seed": 1}"#).unwrap();
        apply_override(&mut doc, "seed", "7").unwrap();
        apply_override(&mut doc, "optimizer.batch_size", "8").unwrap();
        apply_override(&mut doc, "backend", "\"http\"").unwrap();
        apply_override(&mut doc, "scenarios", r#"["a","b"]"#).unwrap();
        assert_eq!(doc["seed"], 7);
        assert_eq!(doc["optimizer"]["batch_size"], 8);
        assert_eq!(doc["backend"], "http");
        assert_eq!(doc["scenarios"][1], "b");
    }

    #[test]
    fn override_strings_fall_back_when_not_json() {
        let mut doc = Value::Object(Default::default());
        apply_override(&mut doc, "http.model", "gpt-test").unwrap();
        assert_eq!(doc["http"]["model"], "gpt-test");
    }

    #[test]
    fn override_rejects_crossing_scalars() {
        let mut doc: Value = serde_json::from_str(r#"{"seed": 1}"#).unwrap();
        let err = apply_override(&mut doc, "seed.nested", "3").unwrap_err();
        assert_eq!(exit_code_for(&err), 2);
    }

    #[test]
    fn exit_codes_split_config_from_backend_failures() {
        assert_eq!(exit_code_for(&usage("x")), 2);
        assert_eq!(
            exit_code_for(&CliError::Harness(HarnessError::BadConfig {
                detail: "d".to_string()
            })),
            2
        );
        assert_eq!(
            exit_code_for(&CliError::Harness(HarnessError::Selection(
                SelectionError::Transport {
                    detail: "down".to_string()
                }
            ))),
            3
        );
        assert_eq!(
            exit_code_for(&CliError::Harness(HarnessError::CorruptLog {
                path: PathBuf::from("x"),
                line: 3,
                detail: "bad".to_string()
            })),
            2
        );
    }
}

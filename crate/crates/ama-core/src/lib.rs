//! Red-team harness for metadata-level attacks on LLM tool selection.
//!
//! A malicious tool competes with benign tools for an agent's single tool
//! call. The library optimizes the malicious tool's metadata (name,
//! description, parameter schema) against a selector backend, replays
//! baseline attacks, applies prompt-level defenses, and measures task
//! success, attack success, parameter response, and privacy leakage over
//! scenario fixtures.
//!
//! Modules, bottom up:
//! - [`toolmeta`]: tool metadata, catalogs, queries, PII profile, hashing.
//! - [`selection`]: prompt serialization and selector backends (offline
//!   lexical mock, chat-completions HTTP).
//! - [`generation`]: candidate metadata generation (seeded mutations or an
//!   LLM backend) with validation, repair, and dedupe.
//! - [`optimizer`]: iterative search over candidates driven by measured
//!   invocation probability.
//! - [`metrics`]: TS/ASR/PR/PL aggregation from trial outcomes.
//! - [`defenses`]: query rewriting and system-prompt guardrails.
//! - [`harness`]: scenario fixtures, attack construction, bounded agent
//!   episodes, experiment matrix, reports.
//! - [`cli`]: the `ama` command-line interface.

pub mod cli;
pub mod defenses;
pub mod generation;
pub mod harness;
pub mod metrics;
pub mod optimizer;
pub mod selection;
pub mod toolmeta;

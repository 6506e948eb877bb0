//! Iterative metadata optimization: seed a pool of candidates, measure each
//! candidate's invocation probability over the query set, rank by a weighted
//! value that rewards absolute performance plus improvement over the parent,
//! keep the top batch, and repeat until the convergence threshold or the
//! iteration cap is hit. Every evaluated candidate is archived with its
//! parent link so any result can be traced back to a root.

use crate::generation::{
    generate_batch, generate_batch_lenient, GenerationError, GeneratorBackend, GeneratorConfig,
    ParentRef,
};
use crate::selection::{ProtocolMode, SelectionContext, SelectionError, Selector};
use crate::toolmeta::{QuerySet, ToolCatalog, ToolMetadata};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::PathBuf;

/// One evaluated candidate tool with provenance and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<u64>,
    pub iteration_born: u32,
    pub p: f64,
    pub v: f64,
    pub metadata: ToolMetadata,
}

/// Search hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Weight on the improvement-over-parent term of the candidate value.
    #[serde(default = "default_improvement_weight")]
    pub improvement_weight: f64,
    /// Candidates kept in the pool and generated per pool member.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Iteration cap (0 means evaluate the initial pool only).
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    /// Halt once a pool member's invocation probability reaches this value.
    #[serde(default = "default_stop_threshold")]
    pub stop_threshold: f64,
    /// Independent selector samples per query.
    #[serde(default = "default_samples_per_query")]
    pub samples_per_query: u32,
    /// When set, halting requires the per-query selection fraction to reach
    /// the threshold for every query, not just their mean.
    #[serde(default)]
    pub stop_per_query: bool,
}

fn default_improvement_weight() -> f64 {
    0.5
}
fn default_batch_size() -> usize {
    4
}
fn default_max_iterations() -> u32 {
    10
}
fn default_stop_threshold() -> f64 {
    0.95
}
fn default_samples_per_query() -> u32 {
    1
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            improvement_weight: default_improvement_weight(),
            batch_size: default_batch_size(),
            max_iterations: default_max_iterations(),
            stop_threshold: default_stop_threshold(),
            samples_per_query: default_samples_per_query(),
            stop_per_query: false,
        }
    }
}

impl OptimizerConfig {
    pub fn ensure_valid(&self) -> Result<(), OptimizerError> {
        if !(self.improvement_weight >= 0.0 && self.improvement_weight.is_finite()) {
            return Err(OptimizerError::BadConfig {
                detail: "improvement_weight must be a finite non-negative number".to_string(),
            });
        }
        if self.batch_size == 0 {
            return Err(OptimizerError::BadConfig {
                detail: "batch_size must be at least 1".to_string(),
            });
        }
        if !(0.0..=1.0).contains(&self.stop_threshold) {
            return Err(OptimizerError::BadConfig {
                detail: "stop_threshold must lie in [0, 1]".to_string(),
            });
        }
        if self.samples_per_query == 0 {
            return Err(OptimizerError::BadConfig {
                detail: "samples_per_query must be at least 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Highest invocation probability seen so far and who achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestEver {
    pub id: u64,
    pub p: f64,
}

/// Search state after some number of iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub k: u32,
    pub pool: Vec<u64>,
    pub archive: Vec<Candidate>,
    pub best_ever: BestEver,
}

impl OptimizerState {
    pub fn candidate(&self, id: u64) -> Result<&Candidate, OptimizerError> {
        self.archive
            .get(id as usize)
            .ok_or(OptimizerError::UnknownCandidate { id })
    }

    pub fn pool_candidates(&self) -> Vec<Candidate> {
        self.pool
            .iter()
            .map(|id| self.archive[*id as usize].clone())
            .collect()
    }
}

/// Pool snapshot recorded after each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub k: u32,
    pub pool: Vec<Candidate>,
    pub ct_size: usize,
}

/// Checkpoint header describing the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub selector: String,
    pub generator: String,
    pub catalog_id: String,
    pub query_count: usize,
}

/// Persisted form of a run: config header, per-iteration pool snapshots, the
/// full candidate archive, and the running best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: CheckpointMeta,
    pub iterations: Vec<IterationTrace>,
    pub archive: Vec<Candidate>,
    pub best_ever: BestEver,
}

/// Completed run output.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub best: Candidate,
    pub archive: Vec<Candidate>,
    pub trace: Vec<IterationTrace>,
    pub iterations_run: u32,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("optimizer config invalid: {detail}")]
    BadConfig { detail: String },
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("unknown candidate id {id}")]
    UnknownCandidate { id: u64 },
    #[error("cannot write checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Candidate value: absolute invocation probability plus a weighted
/// improvement over the parent's probability. Roots use a parent
/// probability of zero.
pub fn weighted_value(p_child: f64, p_parent: f64, improvement_weight: f64) -> f64 {
    p_child + improvement_weight * (p_child - p_parent)
}

/// Ranking order for pool truncation: higher value first, then higher
/// probability, then lower id.
pub fn compare_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    b.v.total_cmp(&a.v)
        .then(b.p.total_cmp(&a.p))
        .then(a.id.cmp(&b.id))
}

/// Ids of the top `n` candidates under [`compare_candidates`].
pub fn select_top(candidates: &[Candidate], n: usize) -> Vec<u64> {
    let mut sorted: Vec<&Candidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| compare_candidates(a, b));
    sorted.into_iter().take(n).map(|c| c.id).collect()
}

/// How candidates are measured: which selector, which protocol, what system
/// prompt the simulated agent runs with, and how many samples per query.
pub struct EvalContext<'a> {
    pub selector: &'a Selector,
    pub protocol_mode: ProtocolMode,
    pub system_prompt: String,
    pub samples_per_query: u32,
}

impl<'a> EvalContext<'a> {
    pub fn new(selector: &'a Selector) -> Self {
        EvalContext {
            selector,
            protocol_mode: ProtocolMode::Plain,
            system_prompt: String::new(),
            samples_per_query: 1,
        }
    }
}

fn presented_toolset(benign: &ToolCatalog, candidate: &ToolMetadata) -> ToolCatalog {
    let mut toolset = benign.with_appended(candidate);
    toolset.catalog_id = format!("{}+candidate", benign.catalog_id);
    toolset
}

/// Per-query selection fractions for one candidate: element i is the
/// fraction of samples in which query i selected the candidate.
pub fn evaluate_per_query(
    candidate: &ToolMetadata,
    queries: &QuerySet,
    benign: &ToolCatalog,
    eval: &EvalContext,
) -> Result<Vec<f64>, OptimizerError> {
    if queries.queries.is_empty() {
        return Err(OptimizerError::EmptyQuerySet);
    }
    let toolset = presented_toolset(benign, candidate);
    let samples = eval.samples_per_query.max(1);
    queries
        .queries
        .par_iter()
        .map(|query| -> Result<f64, OptimizerError> {
            let ctx = SelectionContext {
                query: query.text.clone(),
                system_prompt: eval.system_prompt.clone(),
                observation: String::new(),
                toolset: toolset.clone(),
                protocol_mode: eval.protocol_mode,
            };
            let mut hits = 0u32;
            for sample_idx in 0..samples {
                let result = eval.selector.select_sample(&ctx, sample_idx)?;
                if result.chosen_tool.as_deref() == Some(candidate.name.as_str()) {
                    hits += 1;
                }
            }
            Ok(f64::from(hits) / f64::from(samples))
        })
        .collect()
}

/// Invocation probability: mean over queries of the per-query selection
/// fraction. With one sample per query this is the fraction of queries whose
/// argmax selection is the candidate.
pub fn evaluate_invocation_probability(
    candidate: &ToolMetadata,
    queries: &QuerySet,
    benign: &ToolCatalog,
    eval: &EvalContext,
) -> Result<f64, OptimizerError> {
    let fractions = evaluate_per_query(candidate, queries, benign, eval)?;
    Ok(fractions.iter().sum::<f64>() / fractions.len() as f64)
}

/// Path of ids from a root candidate down to `id`, following parent links.
pub fn lineage(id: u64, archive: &[Candidate]) -> Result<Vec<u64>, OptimizerError> {
    let mut path = Vec::new();
    let mut cursor = id;
    for _ in 0..=archive.len() {
        let candidate = archive
            .get(cursor as usize)
            .ok_or(OptimizerError::UnknownCandidate { id: cursor })?;
        path.push(cursor);
        match candidate.parent_id {
            Some(parent) => cursor = parent,
            None => {
                path.reverse();
                return Ok(path);
            }
        }
    }
    Err(OptimizerError::UnknownCandidate { id })
}

/// A configured optimization run over one query set and benign catalog.
pub struct Optimizer<'a> {
    pub queries: &'a QuerySet,
    pub benign: &'a ToolCatalog,
    pub generator: &'a dyn GeneratorBackend,
    pub generator_cfg: GeneratorConfig,
    pub eval: EvalContext<'a>,
    pub cfg: OptimizerConfig,
    /// When set, the checkpoint document is rewritten after the initial pool
    /// and after every iteration, so failures leave a usable partial archive.
    pub checkpoint_path: Option<PathBuf>,
}

impl<'a> Optimizer<'a> {
    fn effective_generator_cfg(&self) -> GeneratorConfig {
        let mut cfg = self.generator_cfg.clone();
        cfg.batch_size = self.cfg.batch_size;
        cfg
    }

    fn benign_names(&self) -> HashSet<String> {
        self.benign.tools.iter().map(|t| t.name.clone()).collect()
    }

    fn push_evaluated(
        &self,
        archive: &mut Vec<Candidate>,
        best: &mut BestEver,
        metadata: ToolMetadata,
        parent: Option<&Candidate>,
        iteration_born: u32,
    ) -> Result<u64, OptimizerError> {
        let p = evaluate_invocation_probability(&metadata, self.queries, self.benign, &self.eval)?;
        let parent_p = parent.map(|c| c.p).unwrap_or(0.0);
        let v = weighted_value(p, parent_p, self.cfg.improvement_weight);
        let id = archive.len() as u64;
        if p > best.p || archive.is_empty() {
            *best = BestEver { id, p };
        }
        archive.push(Candidate {
            id,
            parent_id: parent.map(|c| c.id),
            iteration_born,
            p,
            v,
            metadata,
        });
        Ok(id)
    }

    /// Build and evaluate the initial pool (iteration 0, no parents).
    pub fn initial_state(&self) -> Result<OptimizerState, OptimizerError> {
        self.cfg.ensure_valid()?;
        if self.queries.queries.is_empty() {
            return Err(OptimizerError::EmptyQuerySet);
        }
        let gen_cfg = self.effective_generator_cfg();
        let mut seen = HashSet::new();
        let batch = generate_batch(
            self.generator,
            self.queries,
            self.benign,
            &gen_cfg,
            None,
            0,
            &self.benign_names(),
            &mut seen,
        )?;
        let mut archive = Vec::with_capacity(batch.len());
        let mut best = BestEver { id: 0, p: 0.0 };
        let mut pool = Vec::with_capacity(batch.len());
        for generated in batch {
            let id = self.push_evaluated(&mut archive, &mut best, generated.metadata, None, 0)?;
            pool.push(id);
        }
        Ok(OptimizerState {
            k: 0,
            pool,
            archive,
            best_ever: best,
        })
    }

    /// One iteration: generate a batch per pool member, evaluate, extend the
    /// archive, and keep the top batch by value.
    pub fn step(&self, state: &OptimizerState) -> Result<OptimizerState, OptimizerError> {
        let k = state.k + 1;
        let gen_cfg = self.effective_generator_cfg();
        let taken = self.benign_names();
        let mut seen: HashSet<u64> = state
            .archive
            .iter()
            .map(|c| c.metadata.canonical_hash())
            .collect();
        let mut archive = state.archive.clone();
        let mut best = state.best_ever;
        let mut ct_ids: Vec<u64> = Vec::new();
        for parent_id in &state.pool {
            let parent = state.candidate(*parent_id)?.clone();
            let parent_ref = ParentRef {
                id: parent.id,
                metadata: parent.metadata.clone(),
                p: parent.p,
            };
            // Salt folds in the iteration so surviving parents draw fresh
            // material each round; low bits stay free for retry rounds.
            let batch = generate_batch_lenient(
                self.generator,
                self.queries,
                self.benign,
                &gen_cfg,
                Some(&parent_ref),
                u64::from(k) << 8,
                &taken,
                &mut seen,
            )?;
            for generated in batch {
                let id = self.push_evaluated(
                    &mut archive,
                    &mut best,
                    generated.metadata,
                    Some(&parent),
                    k,
                )?;
                ct_ids.push(id);
            }
        }
        if ct_ids.is_empty() {
            return Err(OptimizerError::Generation(GenerationError::Exhausted {
                needed: self.cfg.batch_size * state.pool.len(),
                got: 0,
            }));
        }
        let ct: Vec<Candidate> = ct_ids
            .iter()
            .map(|id| archive[*id as usize].clone())
            .collect();
        let pool = select_top(&ct, self.cfg.batch_size);
        Ok(OptimizerState {
            k,
            pool,
            archive,
            best_ever: best,
        })
    }

    /// Convergence test on the current pool. In per-query mode the selector
    /// cache makes the re-evaluation free for deterministic backends.
    pub fn converged(&self, state: &OptimizerState) -> Result<bool, OptimizerError> {
        for id in &state.pool {
            let candidate = state.candidate(*id)?;
            if self.cfg.stop_per_query {
                let fractions = evaluate_per_query(
                    &candidate.metadata,
                    self.queries,
                    self.benign,
                    &self.eval,
                )?;
                if fractions
                    .iter()
                    .all(|f| *f >= self.cfg.stop_threshold)
                {
                    return Ok(true);
                }
            } else if candidate.p >= self.cfg.stop_threshold {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn checkpoint(&self, trace: &[IterationTrace], state: &OptimizerState) -> Checkpoint {
        Checkpoint {
            config: CheckpointMeta {
                optimizer: self.cfg,
                seed: self.generator_cfg.seed,
                selector: self.eval.selector.backend_id(),
                generator: self.generator.id(),
                catalog_id: self.benign.catalog_id.clone(),
                query_count: self.queries.queries.len(),
            },
            iterations: trace.to_vec(),
            archive: state.archive.clone(),
            best_ever: state.best_ever,
        }
    }

    fn write_checkpoint(
        &self,
        trace: &[IterationTrace],
        state: &OptimizerState,
    ) -> Result<(), OptimizerError> {
        let Some(path) = &self.checkpoint_path else {
            return Ok(());
        };
        let doc = self.checkpoint(trace, state);
        let bytes = serde_json::to_vec_pretty(&doc).expect("checkpoint serializes");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| OptimizerError::Checkpoint {
                path: path.display().to_string(),
                source,
            })?;
        }
        std::fs::write(path, bytes).map_err(|source| OptimizerError::Checkpoint {
            path: path.display().to_string(),
            source,
        })
    }

    /// Full run: initial pool, up to `max_iterations` steps, early halt on
    /// convergence, archive-wide best extraction.
    pub fn run(&self) -> Result<OptimizationResult, OptimizerError> {
        let mut state = self.initial_state()?;
        let mut trace = vec![IterationTrace {
            k: 0,
            pool: state.pool_candidates(),
            ct_size: state.pool.len(),
        }];
        self.write_checkpoint(&trace, &state)?;
        let mut converged = false;
        for _ in 0..self.cfg.max_iterations {
            let prev_ct = state.archive.len();
            state = self.step(&state)?;
            trace.push(IterationTrace {
                k: state.k,
                pool: state.pool_candidates(),
                ct_size: state.archive.len() - prev_ct,
            });
            self.write_checkpoint(&trace, &state)?;
            if self.converged(&state)? {
                converged = true;
                break;
            }
        }
        let best = state
            .archive
            .iter()
            .max_by(|a, b| {
                a.p.total_cmp(&b.p)
                    .then_with(|| b.id.cmp(&a.id))
            })
            .expect("archive non-empty")
            .clone();
        Ok(OptimizationResult {
            best,
            archive: state.archive,
            trace,
            iterations_run: state.k,
            converged,
        })
    }

    /// Run and return both the result and the final checkpoint document.
    pub fn run_with_checkpoint(&self) -> Result<(OptimizationResult, Checkpoint), OptimizerError> {
        let result = self.run()?;
        let state = OptimizerState {
            k: result.iterations_run,
            pool: result.trace.last().map(|t| t.pool.iter().map(|c| c.id).collect()).unwrap_or_default(),
            archive: result.archive.clone(),
            best_ever: BestEver {
                id: result.best.id,
                p: result.best.p,
            },
        };
        let checkpoint = self.checkpoint(&result.trace, &state);
        Ok((result, checkpoint))
    }
}

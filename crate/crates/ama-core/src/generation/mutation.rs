//! Seeded deterministic mutation generator: the offline stand-in for an LLM
//! generation backend. Each batch is produced by a rng stream derived from
//! (seed, parent, salt), so runs replay byte-identically regardless of
//! concurrency or batch interleaving.

use super::{AttractorLexicon, GenerationError, GeneratorBackend, GeneratorConfig, ParentRef};
use crate::selection::lexical::tokenize;
use crate::toolmeta::{QuerySet, ToolCatalog, ToolMetadata};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name prefixes signalling breadth of capability.
pub const BREADTH_MARKERS: [&str; 3] = ["comprehensive_", "universal_", "all_"];

/// Most parameters the parameter-injection operator will grow a schema to.
pub const PARAM_CAP: usize = 8;

const ROOT_MARKER: u64 = 0x726f6f74; // distinguishes parentless streams

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive the rng stream seed for one (run seed, parent, salt) triple.
pub fn derive_stream_seed(seed: u64, parent: Option<u64>, salt: u64) -> u64 {
    let parent_part = match parent {
        Some(id) => splitmix64(id.wrapping_add(1)),
        None => splitmix64(ROOT_MARKER),
    };
    splitmix64(seed ^ parent_part.rotate_left(17) ^ splitmix64(salt).rotate_left(31))
}

fn contains_phrase(description: &str, phrase: &str) -> bool {
    description.to_lowercase().contains(&phrase.to_lowercase())
}

fn has_breadth_marker(name: &str) -> bool {
    BREADTH_MARKERS.iter().any(|m| name.starts_with(m))
}

/// Distinct query tokens in first-occurrence order; the pool operator (c)
/// draws parameter names from.
pub fn query_token_pool(queries: &QuerySet) -> Vec<String> {
    let mut pool = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for query in &queries.queries {
        for token in tokenize(&query.text) {
            if seen.insert(token.clone()) {
                pool.push(token);
            }
        }
    }
    pool
}

/// Apply exactly one mutation operator chosen by the rng:
/// (a) append the first lexicon phrase the description lacks,
/// (b) prefix the name with a breadth marker when none is present,
/// (c) add one required string parameter named after a query token, capped
///     at [`PARAM_CAP`] parameters.
/// Operators that cannot apply are skipped in favor of the next; when none
/// applies the input is returned unchanged. The result is always valid.
pub fn mutate_metadata(
    meta: &ToolMetadata,
    rng: &mut ChaCha8Rng,
    lexicon: &AttractorLexicon,
    token_pool: &[String],
) -> ToolMetadata {
    let mut out = meta.clone();
    let first_op = (rng.next_u64() % 3) as usize;
    for offset in 0..3 {
        match (first_op + offset) % 3 {
            0 => {
                let unused = lexicon
                    .phrases
                    .iter()
                    .find(|p| !contains_phrase(&out.description, p));
                if let Some(phrase) = unused {
                    let appended = if out.description.trim().is_empty() {
                        phrase.clone()
                    } else {
                        format!("{} {}", out.description, phrase)
                    };
                    if appended.chars().count() <= 2048 {
                        out.description = appended;
                        return out;
                    }
                }
            }
            1 => {
                if !has_breadth_marker(&out.name) {
                    let marker = BREADTH_MARKERS[(rng.next_u64() % 3) as usize];
                    let prefixed: String = format!("{marker}{}", out.name)
                        .chars()
                        .take(64)
                        .collect();
                    out.name = prefixed;
                    return out;
                }
            }
            _ => {
                if out.parameters.len() < PARAM_CAP {
                    let available: Vec<&String> = token_pool
                        .iter()
                        .filter(|t| !out.parameters.contains_key(t.as_str()))
                        .collect();
                    if !available.is_empty() {
                        let pick = available[(rng.next_u64() % available.len() as u64) as usize];
                        out.parameters.insert(
                            pick.clone(),
                            crate::toolmeta::ParamSpec::required_string(
                                "value taken from the task context",
                            ),
                        );
                        return out;
                    }
                }
            }
        }
    }
    out
}

/// Deterministic generator that mutates a base template (or the parent's
/// metadata) along a seeded stream.
pub struct MutationGenerator {
    pub template: ToolMetadata,
}

impl MutationGenerator {
    pub fn new(template: ToolMetadata) -> Self {
        MutationGenerator { template }
    }
}

impl GeneratorBackend for MutationGenerator {
    fn id(&self) -> String {
        "mutation".to_string()
    }

    fn propose(
        &self,
        queries: &QuerySet,
        _catalog: &ToolCatalog,
        cfg: &GeneratorConfig,
        parent: Option<&ParentRef>,
        salt: u64,
    ) -> Result<Vec<ToolMetadata>, GenerationError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(
            cfg.seed,
            parent.map(|p| p.id),
            salt,
        ));
        let base = parent
            .map(|p| p.metadata.clone())
            .unwrap_or_else(|| self.template.clone());
        let token_pool = query_token_pool(queries);
        let mut out: Vec<ToolMetadata> = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let mut candidate = base.clone();
            for _ in 0..(1 + slot % 3) {
                candidate = mutate_metadata(&candidate, &mut rng, &cfg.lexicon, &token_pool);
            }
            let mut extra = 0;
            while extra < 8
                && out
                    .iter()
                    .any(|m| m.canonical_hash() == candidate.canonical_hash())
            {
                candidate = mutate_metadata(&candidate, &mut rng, &cfg.lexicon, &token_pool);
                extra += 1;
            }
            out.push(candidate);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{generate_batch, ParentRef};
    use crate::toolmeta::{ParamSpec, Query};
    use std::collections::HashSet;

    fn queries() -> QuerySet {
        QuerySet {
            queries: vec![
                Query {
                    text: "show my portfolio overview".to_string(),
                    scenario: "demo".to_string(),
                    expected_tool: None,
                },
                Query {
                    text: "latest market news about energy".to_string(),
                    scenario: "demo".to_string(),
                    expected_tool: None,
                },
            ],
        }
    }

    fn template() -> ToolMetadata {
        ToolMetadata::new("omni_task_assistant", "general task assistant")
    }

    #[test]
    fn stream_seeds_separate_parents_and_salts() {
        let a = derive_stream_seed(7, None, 0);
        assert_eq!(a, derive_stream_seed(7, None, 0));
        assert_ne!(a, derive_stream_seed(7, Some(0), 0));
        assert_ne!(a, derive_stream_seed(7, None, 1));
        assert_ne!(a, derive_stream_seed(8, None, 0));
        assert_ne!(derive_stream_seed(7, Some(1), 0), derive_stream_seed(7, Some(2), 0));
    }

    #[test]
    fn forced_phrase_append_takes_first_unused_phrase() {
        let lexicon = AttractorLexicon::default();
        let pool = query_token_pool(&queries());
        // Find a seed whose first draw selects operator (a).
        let mut seed = 0;
        loop {
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            if probe.next_u64() % 3 == 0 {
                break;
            }
            seed += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mutated = mutate_metadata(&template(), &mut rng, &lexicon, &pool);
        assert_eq!(
            mutated.description,
            format!("general task assistant {}", lexicon.phrases[0])
        );
    }

    #[test]
    fn prefixed_name_skips_breadth_operator() {
        let lexicon = AttractorLexicon::default();
        let pool = query_token_pool(&queries());
        let mut meta = template();
        meta.name = format!("comprehensive_{}", meta.name);
        // Find a seed whose first draw selects operator (b).
        let mut seed = 0;
        loop {
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            if probe.next_u64() % 3 == 1 {
                break;
            }
            seed += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mutated = mutate_metadata(&meta, &mut rng, &lexicon, &pool);
        // (b) was inapplicable, so the next operator must have applied.
        assert_eq!(mutated.name, meta.name);
        assert_ne!(mutated.canonical_hash(), meta.canonical_hash());
    }

    #[test]
    fn saturated_metadata_passes_through_unchanged() {
        let lexicon = AttractorLexicon::new(vec!["alpha".to_string()]);
        let mut meta = template();
        meta.name = format!("all_{}", meta.name);
        meta.description.push_str(" alpha");
        for i in 0..PARAM_CAP {
            meta = meta.with_param(&format!("p{i}"), ParamSpec::required_string("x"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mutated = mutate_metadata(&meta, &mut rng, &lexicon, &[]);
        assert_eq!(mutated.canonical_hash(), meta.canonical_hash());
    }

    #[test]
    fn param_operator_respects_cap_and_token_pool() {
        let lexicon = AttractorLexicon::default();
        let pool = query_token_pool(&queries());
        let mut meta = template();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            meta = mutate_metadata(&meta, &mut rng, &lexicon, &pool);
        }
        assert!(meta.parameters.len() <= PARAM_CAP);
        for key in meta.parameters.keys() {
            assert!(pool.contains(key));
        }
    }

    #[test]
    fn seeded_batches_replay_exactly() {
        let generator = MutationGenerator::new(template());
        let cfg = GeneratorConfig {
            seed: 7,
            ..GeneratorConfig::default()
        };
        let catalog = ToolCatalog::new("empty");
        let qs = queries();
        let mut seen_a = HashSet::new();
        let mut seen_b = HashSet::new();
        let a = generate_batch(&generator, &qs, &catalog, &cfg, None, 0, &HashSet::new(), &mut seen_a)
            .unwrap();
        let b = generate_batch(&generator, &qs, &catalog, &cfg, None, 0, &HashSet::new(), &mut seen_b)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let hashes: HashSet<u64> = a.iter().map(|g| g.metadata.canonical_hash()).collect();
        assert_eq!(hashes.len(), 4);
        for tool in &a {
            assert!(tool.parent_id.is_none());
        }
    }

    #[test]
    fn parented_batch_carries_parent_id() {
        let generator = MutationGenerator::new(template());
        let cfg = GeneratorConfig {
            seed: 7,
            batch_size: 1,
            ..GeneratorConfig::default()
        };
        let parent = ParentRef {
            id: 11,
            metadata: template(),
            p: 0.25,
        };
        let mut seen = HashSet::new();
        let batch = generate_batch(
            &generator,
            &queries(),
            &ToolCatalog::new("empty"),
            &cfg,
            Some(&parent),
            256,
            &HashSet::new(),
            &mut seen,
        )
        .unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].parent_id, Some(11));
    }

    #[test]
    fn thousand_draw_stream_stays_valid_and_mostly_distinct() {
        let lexicon = AttractorLexicon::default();
        let pool = query_token_pool(&queries());
        let base = template();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut outputs: Vec<ToolMetadata> = Vec::with_capacity(1000);
        for slot in 0..1000usize {
            let mut candidate = base.clone();
            for _ in 0..(1 + slot % 3) {
                candidate = mutate_metadata(&candidate, &mut rng, &lexicon, &pool);
            }
            let mut extra = 0;
            while extra < 8
                && outputs
                    .iter()
                    .any(|m| m.canonical_hash() == candidate.canonical_hash())
            {
                candidate = mutate_metadata(&candidate, &mut rng, &lexicon, &pool);
                extra += 1;
            }
            outputs.push(candidate);
        }
        for m in &outputs {
            assert!(crate::toolmeta::validate_metadata(m).is_empty());
        }
        let distinct: HashSet<u64> = outputs.iter().map(|m| m.canonical_hash()).collect();
        assert!(
            distinct.len() >= 950,
            "only {} of 1000 outputs distinct",
            distinct.len()
        );
    }
}

//! Tool metadata model: the unit every other module optimizes, scores, or
//! mutates. Also owns the on-disk corpus formats (tool catalogs, query sets,
//! PII profiles) and a canonical content hash used for dedup and lineage.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;

/// The eleven PII keys a leakage profile must define, in canonical order.
pub const PII_FIELDS: [&str; 11] = [
    "name",
    "address",
    "phone_number",
    "email",
    "credit_card_number",
    "date_of_birth",
    "social_security_number",
    "passport_number",
    "driver_license_number",
    "bank_account_number",
    "ip_address",
];

/// JSON-schema style parameter type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    Array,
    Object,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Integer => "integer",
            ParamType::Boolean => "boolean",
            ParamType::Array => "array",
            ParamType::Object => "object",
        }
    }
}

/// One named parameter in a tool's schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub required: bool,
}

impl ParamSpec {
    pub fn required_string(description: &str) -> Self {
        ParamSpec {
            param_type: ParamType::String,
            description: description.to_string(),
            required: true,
        }
    }
}

/// Metadata describing a single callable tool. Parameter order is preserved
/// as authored; equality-sensitive operations go through [`ToolMetadata::canonical_hash`],
/// which key-sorts the schema first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolMetadata {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: IndexMap<String, ParamSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl ToolMetadata {
    pub fn new(name: &str, description: &str) -> Self {
        ToolMetadata {
            name: name.to_string(),
            description: description.to_string(),
            parameters: IndexMap::new(),
            tags: Vec::new(),
        }
    }

    pub fn with_param(mut self, name: &str, spec: ParamSpec) -> Self {
        self.parameters.insert(name.to_string(), spec);
        self
    }

    /// Stable 64-bit content hash. Whitespace around text fields is ignored
    /// and the parameter schema is key-sorted, so two structurally equal
    /// metadata blobs hash equal regardless of authoring order. Stable across
    /// processes and platforms (first 8 bytes of a SHA-256 digest).
    pub fn canonical_hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(b"name\x1e");
        hasher.update(self.name.trim().as_bytes());
        hasher.update(b"\x1fdescription\x1e");
        hasher.update(self.description.trim().as_bytes());
        let mut keys: Vec<&String> = self.parameters.keys().collect();
        keys.sort();
        for key in keys {
            let spec = &self.parameters[key.as_str()];
            hasher.update(b"\x1fparam\x1e");
            hasher.update(key.trim().as_bytes());
            hasher.update(b"\x1e");
            hasher.update(spec.param_type.as_str().as_bytes());
            hasher.update(b"\x1e");
            hasher.update(spec.description.trim().as_bytes());
            hasher.update(if spec.required { b"\x1e1" } else { b"\x1e0" });
        }
        for tag in &self.tags {
            hasher.update(b"\x1ftag\x1e");
            hasher.update(tag.trim().as_bytes());
        }
        let digest = hasher.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// Size limits enforced on metadata fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataLimits {
    pub max_name_len: usize,
    pub max_description_len: usize,
}

impl Default for MetadataLimits {
    fn default() -> Self {
        MetadataLimits {
            max_name_len: 64,
            max_description_len: 2048,
        }
    }
}

/// A single way a metadata blob can violate the field constraints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NameEmpty,
    NameTooLong { len: usize, max: usize },
    NameCharset { name: String },
    DescriptionTooLong { len: usize, max: usize },
    ParamNameEmpty,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NameEmpty => write!(f, "tool name is empty"),
            Violation::NameTooLong { len, max } => {
                write!(f, "tool name is {len} chars, max is {max}")
            }
            Violation::NameCharset { name } => {
                write!(f, "tool name {name:?} contains chars outside [A-Za-z0-9_-]")
            }
            Violation::DescriptionTooLong { len, max } => {
                write!(f, "description is {len} chars, max is {max}")
            }
            Violation::ParamNameEmpty => write!(f, "parameter schema contains an empty key"),
        }
    }
}

fn name_charset_ok(name: &str) -> bool {
    name.chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Check `meta` against `limits`. Empty result means valid.
pub fn validate_metadata_with(meta: &ToolMetadata, limits: &MetadataLimits) -> Vec<Violation> {
    let mut violations = Vec::new();
    let name_len = meta.name.chars().count();
    if name_len == 0 {
        violations.push(Violation::NameEmpty);
    } else {
        if name_len > limits.max_name_len {
            violations.push(Violation::NameTooLong {
                len: name_len,
                max: limits.max_name_len,
            });
        }
        if !name_charset_ok(&meta.name) {
            violations.push(Violation::NameCharset {
                name: meta.name.clone(),
            });
        }
    }
    let desc_len = meta.description.chars().count();
    if desc_len > limits.max_description_len {
        violations.push(Violation::DescriptionTooLong {
            len: desc_len,
            max: limits.max_description_len,
        });
    }
    if meta.parameters.keys().any(|k| k.trim().is_empty()) {
        violations.push(Violation::ParamNameEmpty);
    }
    violations
}

/// Check `meta` against the default limits.
pub fn validate_metadata(meta: &ToolMetadata) -> Vec<Violation> {
    validate_metadata_with(meta, &MetadataLimits::default())
}

/// A named set of tools presented to a selector. Tool names are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCatalog {
    pub catalog_id: String,
    pub tools: Vec<ToolMetadata>,
}

impl ToolCatalog {
    pub fn new(catalog_id: &str) -> Self {
        ToolCatalog {
            catalog_id: catalog_id.to_string(),
            tools: Vec::new(),
        }
    }

    pub fn tool(&self, name: &str) -> Option<&ToolMetadata> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn tool_names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name.as_str()).collect()
    }

    /// Catalog with `extra` appended after the existing tools.
    pub fn with_appended(&self, extra: &ToolMetadata) -> ToolCatalog {
        let mut out = self.clone();
        out.tools.push(extra.clone());
        out
    }

    /// Catalog with the named tool removed (no-op when absent).
    pub fn without(&self, name: &str) -> ToolCatalog {
        let mut out = self.clone();
        out.tools.retain(|t| t.name != name);
        out
    }

    pub fn check(&self) -> Result<(), MetaError> {
        let mut seen = std::collections::HashSet::new();
        for tool in &self.tools {
            if !seen.insert(tool.name.clone()) {
                return Err(MetaError::DuplicateToolName {
                    name: tool.name.clone(),
                });
            }
            let violations = validate_metadata(tool);
            if !violations.is_empty() {
                return Err(MetaError::InvalidMetadata {
                    name: tool.name.clone(),
                    detail: violations
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join("; "),
                });
            }
        }
        Ok(())
    }
}

/// One benchmark query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    #[serde(default)]
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_tool: Option<String>,
}

/// An ordered set of queries; order is significant for seeded runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn texts(&self) -> Vec<&str> {
        self.queries.iter().map(|q| q.text.as_str()).collect()
    }
}

/// A synthetic user profile holding the eleven PII values an attack may try
/// to exfiltrate. Key order is canonical ([`PII_FIELDS`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PiiProfile {
    values: IndexMap<String, String>,
}

impl PiiProfile {
    /// Build from a key/value map, enforcing exactly the canonical key set
    /// with non-empty values. Keys are stored in canonical order.
    pub fn from_map(raw: IndexMap<String, String>) -> Result<Self, MetaError> {
        for key in raw.keys() {
            if !PII_FIELDS.contains(&key.as_str()) {
                return Err(MetaError::UnknownPiiField { field: key.clone() });
            }
        }
        let mut values = IndexMap::new();
        for field in PII_FIELDS {
            match raw.get(field) {
                Some(v) if !v.trim().is_empty() => {
                    values.insert(field.to_string(), v.clone());
                }
                Some(_) => {
                    return Err(MetaError::EmptyPiiValue {
                        field: field.to_string(),
                    })
                }
                None => {
                    return Err(MetaError::MissingPiiField {
                        field: field.to_string(),
                    })
                }
            }
        }
        Ok(PiiProfile { values })
    }

    pub fn get(&self, field: &str) -> Option<&str> {
        self.values.get(field).map(|s| s.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Errors raised while loading or validating corpus files.
#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate tool name {name:?}")]
    DuplicateToolName { name: String },
    #[error("tool {name:?} violates metadata constraints: {detail}")]
    InvalidMetadata { name: String, detail: String },
    #[error("profile is missing PII field {field:?}")]
    MissingPiiField { field: String },
    #[error("profile has empty value for PII field {field:?}")]
    EmptyPiiValue { field: String },
    #[error("profile has unknown field {field:?}")]
    UnknownPiiField { field: String },
    #[error("query set is empty")]
    EmptyQuerySet,
}

fn read_file(path: &Path) -> Result<String, MetaError> {
    std::fs::read_to_string(path).map_err(|source| MetaError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_error(path: &str, err: &serde_json::Error) -> MetaError {
    MetaError::Parse {
        path: path.to_string(),
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    }
}

/// Parse a catalog from a JSON string (`origin` labels error messages).
pub fn parse_catalog(json: &str, origin: &str) -> Result<ToolCatalog, MetaError> {
    let catalog: ToolCatalog =
        serde_json::from_str(json).map_err(|e| parse_error(origin, &e))?;
    catalog.check()?;
    Ok(catalog)
}

pub fn load_catalog(path: &Path) -> Result<ToolCatalog, MetaError> {
    parse_catalog(&read_file(path)?, &path.display().to_string())
}

/// Parse a query set from a JSON string; empty sets are rejected.
pub fn parse_queries(json: &str, origin: &str) -> Result<QuerySet, MetaError> {
    let set: QuerySet = serde_json::from_str(json).map_err(|e| parse_error(origin, &e))?;
    if set.queries.is_empty() {
        return Err(MetaError::EmptyQuerySet);
    }
    Ok(set)
}

pub fn load_queries(path: &Path) -> Result<QuerySet, MetaError> {
    parse_queries(&read_file(path)?, &path.display().to_string())
}

pub fn parse_profile(json: &str, origin: &str) -> Result<PiiProfile, MetaError> {
    let raw: IndexMap<String, String> =
        serde_json::from_str(json).map_err(|e| parse_error(origin, &e))?;
    PiiProfile::from_map(raw)
}

pub fn load_profile(path: &Path) -> Result<PiiProfile, MetaError> {
    parse_profile(&read_file(path)?, &path.display().to_string())
}

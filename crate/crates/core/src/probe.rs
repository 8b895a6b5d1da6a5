//! Named sets of concept embeddings used for search, labelling and audits.
//!
//! Two on-disk forms are accepted:
//!
//! * the database form, `probes/<name>.json` holding metadata plus a sibling
//!   `probes/<name>.f32` blob (null row first when present, then one row per
//!   concept in declaration order, little-endian f32);
//! * an inline JSON document carrying the embeddings as float arrays, which
//!   is what clients send when auditing a draft that has not been saved.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::store::blob;
use crate::vector::{norm, Vector, MIN_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validity {
    Valid,
    Spurious,
    Neutral,
}

impl Validity {
    pub fn as_str(self) -> &'static str {
        match self {
            Validity::Valid => "valid",
            Validity::Spurious => "spurious",
            Validity::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub label: String,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default = "neutral")]
    pub validity: Validity,
    pub embedding: Vector,
    #[serde(default)]
    pub prompts: Vec<String>,
}

fn neutral() -> Validity {
    Validity::Neutral
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub name: String,
    #[serde(default)]
    pub null_embedding: Option<Vector>,
    pub concepts: Vec<Concept>,
}

pub const PROBE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeFile {
    format_version: u32,
    name: String,
    dim: usize,
    has_null: bool,
    concepts: Vec<ConceptMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptMeta {
    label: String,
    #[serde(default)]
    category: Option<String>,
    validity: Validity,
    #[serde(default)]
    prompts: Vec<String>,
}

impl ProbeSet {
    pub fn dim(&self) -> Option<usize> {
        self.null_embedding
            .as_ref()
            .map(|v| v.dim())
            .or_else(|| self.concepts.first().map(|c| c.embedding.dim()))
    }

    pub fn null(&self) -> Option<&[f32]> {
        self.null_embedding.as_deref()
    }

    pub fn concepts_with(&self, validity: Validity) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(move |c| c.validity == validity)
    }

    /// Checks names, dimensions and norms against an expected dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| LensError::InvalidProbeSet(format!("{}: {msg}", self.name));
        if !is_safe_name(&self.name) {
            return Err(LensError::InvalidProbeSet(format!(
                "probe set name {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.name
            )));
        }
        if self.concepts.is_empty() {
            return Err(bad("no concepts".into()));
        }
        let mut labels = HashSet::new();
        for c in &self.concepts {
            if !labels.insert(c.label.as_str()) {
                return Err(bad(format!("duplicate label {:?}", c.label)));
            }
        }
        let rows = self
            .null_embedding
            .iter()
            .map(|v| ("null embedding".to_string(), v))
            .chain(
                self.concepts
                    .iter()
                    .map(|c| (format!("concept {:?}", c.label), &c.embedding)),
            );
        for (what, v) in rows {
            if v.dim() != dim {
                return Err(LensError::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
            if norm(v) < MIN_NORM {
                return Err(LensError::ZeroNormVector {
                    context: format!("probe set {}: {what}", self.name),
                });
            }
        }
        Ok(())
    }

    /// Reads either the database form (metadata + `.f32` sibling) or an
    /// inline JSON document.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LensError::MissingBlob {
                path: path.to_path_buf(),
            },
            _ => LensError::io(path, e),
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| LensError::InvalidProbeSet(format!("{}: {e}", path.display())))?;
        if value.get("format_version").is_some() {
            let meta: ProbeFile = serde_json::from_value(value)
                .map_err(|e| LensError::InvalidProbeSet(format!("{}: {e}", path.display())))?;
            Self::from_file_parts(meta, &path.with_extension("f32"))
        } else {
            let set: ProbeSet = serde_json::from_value(value)
                .map_err(|e| LensError::InvalidProbeSet(format!("{}: {e}", path.display())))?;
            let dim = set
                .dim()
                .ok_or_else(|| LensError::InvalidProbeSet(format!("{}: no concepts", set.name)))?;
            set.validate(dim)?;
            Ok(set)
        }
    }

    fn from_file_parts(meta: ProbeFile, blob_path: &Path) -> Result<Self> {
        if meta.format_version != PROBE_FORMAT_VERSION {
            return Err(LensError::InvalidProbeSet(format!(
                "{}: unsupported format_version {}",
                meta.name, meta.format_version
            )));
        }
        if meta.dim == 0 {
            return Err(LensError::InvalidProbeSet(format!("{}: dim is 0", meta.name)));
        }
        let rows = meta.concepts.len() + usize::from(meta.has_null);
        let data = blob::read_f32(blob_path, rows * meta.dim)?;
        let mut chunks = data.chunks_exact(meta.dim);
        let null_embedding = if meta.has_null {
            Some(Vector::new(chunks.next().expect("sized blob").to_vec())?)
        } else {
            None
        };
        let concepts = meta
            .concepts
            .into_iter()
            .zip(chunks)
            .map(|(c, row)| {
                Ok(Concept {
                    label: c.label,
                    category: c.category,
                    validity: c.validity,
                    embedding: Vector::new(row.to_vec())?,
                    prompts: c.prompts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = ProbeSet {
            name: meta.name,
            null_embedding,
            concepts,
        };
        set.validate(meta.dim)?;
        Ok(set)
    }

    /// Writes `<dir>/<name>.json` and `<dir>/<name>.f32`; returns the json path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let dim = self
            .dim()
            .ok_or_else(|| LensError::InvalidProbeSet(format!("{}: no concepts", self.name)))?;
        self.validate(dim)?;
        fs::create_dir_all(dir).map_err(|e| LensError::io(dir, e))?;
        let meta = ProbeFile {
            format_version: PROBE_FORMAT_VERSION,
            name: self.name.clone(),
            dim,
            has_null: self.null_embedding.is_some(),
            concepts: self
                .concepts
                .iter()
                .map(|c| ConceptMeta {
                    label: c.label.clone(),
                    category: c.category.clone(),
                    validity: c.validity,
                    prompts: c.prompts.clone(),
                })
                .collect(),
        };
        let json_path = dir.join(format!("{}.json", self.name));
        let mut text = serde_json::to_string_pretty(&meta).expect("probe metadata serializes");
        text.push('\n');
        fs::write(&json_path, text).map_err(|e| LensError::io(&json_path, e))?;
        let rows = self
            .null_embedding
            .iter()
            .chain(self.concepts.iter().map(|c| &c.embedding))
            .flat_map(|v| v.iter().copied());
        blob::write_f32(&dir.join(format!("{}.f32", self.name)), rows)?;
        Ok(json_path)
    }
}

pub(crate) fn is_safe_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LensError, Result};
use crate::probe::is_safe_name;

pub const FORMAT_VERSION: u32 = 1;

/// Top-level description of a LensDB directory (`manifest.json`).
///
/// Unknown keys are preserved so that a load/export cycle never drops
/// fields written by a newer extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub foundation_model_id: String,
    pub dim: usize,
    pub endianness: String,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_note: Option<String>,
    pub layers: Vec<LayerDecl>,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe_sets: Vec<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecl {
    pub name: String,
    pub n_components: usize,
    pub m_examples: usize,
    #[serde(default)]
    pub signed: bool,
    #[serde(default)]
    pub has_example_embeddings: bool,
    #[serde(default)]
    pub has_activations: bool,
    #[serde(default)]
    pub has_relevance: bool,
    #[serde(default)]
    pub has_edges: bool,
    /// Attribution backend the extractor used for this layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl LayerDecl {
    pub fn new(name: impl Into<String>, n_components: usize, m_examples: usize) -> Self {
        LayerDecl {
            name: name.into(),
            n_components,
            m_examples,
            signed: false,
            has_example_embeddings: false,
            has_activations: false,
            has_relevance: false,
            has_edges: false,
            attribution: None,
            extra: BTreeMap::new(),
        }
    }

    /// Stored records: one per component, two when activations are signed
    /// (positive block first, then negative block).
    pub fn rows(&self) -> usize {
        self.n_components * if self.signed { 2 } else { 1 }
    }
}

impl Manifest {
    pub fn new(
        model_id: impl Into<String>,
        foundation_model_id: impl Into<String>,
        dim: usize,
        layers: Vec<LayerDecl>,
    ) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            foundation_model_id: foundation_model_id.into(),
            dim,
            endianness: "little".into(),
            dtype: "f32".into(),
            dataset_note: None,
            layers,
            targets: Vec::new(),
            probe_sets: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn layer_position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn target_index(&self, target: &str) -> Result<usize> {
        self.targets
            .iter()
            .position(|t| t == target)
            .ok_or_else(|| LensError::UnknownTarget(target.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LensError::CorruptManifest(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if self.endianness != "little" {
            return bad(format!("endianness must be \"little\", got {:?}", self.endianness));
        }
        if self.dtype != "f32" {
            return bad(format!("dtype must be \"f32\", got {:?}", self.dtype));
        }
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.layers.is_empty() {
            return bad("no layers declared".into());
        }
        let mut names = HashSet::new();
        for l in &self.layers {
            if !is_safe_name(&l.name) {
                return bad(format!(
                    "layer name {:?} must be non-empty and use only [A-Za-z0-9._-]",
                    l.name
                ));
            }
            if !names.insert(l.name.as_str()) {
                return bad(format!("duplicate layer {:?}", l.name));
            }
            if l.n_components == 0 {
                return bad(format!("layer {:?} has no components", l.name));
            }
            let needs_examples = l.has_example_embeddings || l.has_activations;
            if needs_examples && l.m_examples == 0 {
                return bad(format!("layer {:?} stores examples but m_examples is 0", l.name));
            }
            if l.has_relevance && self.targets.is_empty() {
                return bad(format!("layer {:?} has relevance but no targets are declared", l.name));
            }
        }
        let mut targets = HashSet::new();
        for t in &self.targets {
            if t.is_empty() || t.contains(['\t', '\n', '\r']) {
                return bad(format!("target name {t:?} is empty or contains a tab/newline"));
            }
            if !targets.insert(t.as_str()) {
                return bad(format!("duplicate target {t:?}"));
            }
        }
        let mut sets = HashSet::new();
        for p in &self.probe_sets {
            if !is_safe_name(p) || !sets.insert(p.as_str()) {
                return bad(format!("bad or duplicate probe set name {p:?}"));
            }
        }
        Ok(())
    }

    pub(crate) fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}

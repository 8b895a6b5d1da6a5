//! The LensDB on-disk database: a manifest plus raw per-layer blobs.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json
//! embeddings/<layer>.f32           rows × d        mean embedding per component
//! example_embeddings/<layer>.f32   rows × m × d    per-example embeddings
//! activations/<layer>.f32          rows × m        activation of each example
//! relevance/<layer>.f32            rows × T        max relevance per target, in [0, 1]
//! edges/<layer>.tsv                target, upper_layer, upper_index, lower_layer, lower_index, weight
//! example_meta/<layer>.jsonl       one record per (component, rank)
//! examples/<layer>/<index>/<rank>.png
//! probes/<name>.json + probes/<name>.f32
//! ```
//!
//! `rows` is the component count, doubled for signed layers: the positive
//! records come first, the negative records follow in the same order.
//! Blobs are row-major, component-major, then example rank, then dimension.

pub mod blob;
mod io;
mod manifest;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::probe::ProbeSet;
use crate::vector::{norm, ComponentId, ComponentKey, EmbeddingView, Sign, MIN_NORM};

pub use io::{export, load};
pub use manifest::{LayerDecl, Manifest, FORMAT_VERSION};

/// Provenance of one concept example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub index: usize,
    #[serde(default)]
    pub sign: Sign,
    pub rank: usize,
    pub sample_id: String,
    /// `(x0, y0, x1, y1)` in pixels.
    pub crop_box: [u32; 4],
    pub activation: f64,
}

/// One relevance flow between components of two layers, for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceEdge {
    pub target: String,
    pub upper: ComponentKey,
    pub lower: ComponentKey,
    pub weight: f64,
}

/// Payload of one layer. Optional sections are absent rather than empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerData {
    pub means: Vec<f32>,
    pub example_embeddings: Option<Vec<f32>>,
    pub activations: Option<Vec<f32>>,
    pub relevance: Option<Vec<f32>>,
    pub example_meta: Option<Vec<ExampleMeta>>,
    pub edges: Option<Vec<RelevanceEdge>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ThumbnailKey {
    pub layer: String,
    pub index: usize,
    pub sign: Sign,
    pub rank: usize,
}

impl ThumbnailKey {
    pub(crate) fn dir_name(&self) -> String {
        match self.sign {
            Sign::Positive => self.index.to_string(),
            Sign::Negative => format!("{}-neg", self.index),
        }
    }

    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from("examples")
            .join(&self.layer)
            .join(self.dir_name())
            .join(format!("{}.png", self.rank))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ThumbnailSource {
    OnDisk(PathBuf),
    Inline(Vec<u8>),
}

/// Concept-example thumbnails. Treated as opaque bytes; files loaded from
/// disk are read on demand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Thumbnails {
    entries: BTreeMap<ThumbnailKey, ThumbnailSource>,
}

impl Thumbnails {
    pub fn insert(&mut self, key: ThumbnailKey, png: Vec<u8>) {
        self.entries.insert(key, ThumbnailSource::Inline(png));
    }

    pub(crate) fn insert_path(&mut self, key: ThumbnailKey, path: PathBuf) {
        self.entries.insert(key, ThumbnailSource::OnDisk(path));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &ThumbnailKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ThumbnailKey> {
        self.entries.keys()
    }

    pub fn get(&self, key: &ThumbnailKey) -> Result<Option<Vec<u8>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(ThumbnailSource::Inline(b)) => Ok(Some(b.clone())),
            Some(ThumbnailSource::OnDisk(p)) => {
                std::fs::read(p).map(Some).map_err(|e| LensError::io(p, e))
            }
        }
    }
}

/// An immutable, fully validated LensDB.
#[derive(Debug, Clone, PartialEq)]
pub struct LensDb {
    manifest: Manifest,
    layers: Vec<LayerData>,
    probe_sets: Vec<ProbeSet>,
    thumbnails: Thumbnails,
}

/// Read-only view of one component.
#[derive(Debug, Clone)]
pub struct ComponentRecord<'a> {
    pub id: ComponentId,
    pub theta: &'a [f32],
    pub examples: Option<EmbeddingView<'a>>,
    pub activations: Option<&'a [f32]>,
    pub relevance: Option<&'a [f32]>,
    pub example_meta: Option<&'a [ExampleMeta]>,
}

/// A layer together with its declaration and manifest position.
#[derive(Debug, Clone, Copy)]
pub struct LayerRef<'a> {
    pub position: usize,
    pub decl: &'a LayerDecl,
    pub data: &'a LayerData,
    db: &'a LensDb,
}

impl<'a> LayerRef<'a> {
    pub fn name(&self) -> &'a str {
        &self.decl.name
    }

    pub fn rows(&self) -> usize {
        self.decl.rows()
    }

    pub fn means(&self) -> EmbeddingView<'a> {
        EmbeddingView::new(self.db.dim(), &self.data.means)
    }

    pub fn theta(&self, row: usize) -> &'a [f32] {
        let d = self.db.dim();
        &self.data.means[row * d..(row + 1) * d]
    }

    pub fn row_of(&self, index: usize, sign: Sign) -> Option<usize> {
        if index >= self.decl.n_components {
            return None;
        }
        match sign {
            Sign::Positive => Some(index),
            Sign::Negative if self.decl.signed => Some(self.decl.n_components + index),
            Sign::Negative => None,
        }
    }

    pub fn key_of(&self, row: usize) -> ComponentKey {
        let n = self.decl.n_components;
        let (index, sign) = if row < n {
            (row, Sign::Positive)
        } else {
            (row - n, Sign::Negative)
        };
        ComponentKey {
            layer: self.decl.name.clone(),
            index,
            sign,
        }
    }

    pub fn component_id(&self, row: usize) -> ComponentId {
        let key = self.key_of(row);
        ComponentId {
            model_id: self.db.manifest.model_id.clone(),
            layer: key.layer,
            index: key.index,
            sign: key.sign,
        }
    }

    pub fn relevance_row(&self, row: usize) -> Option<&'a [f32]> {
        let t = self.db.manifest.targets.len();
        self.data
            .relevance
            .as_deref()
            .map(|r| &r[row * t..(row + 1) * t])
    }

    pub fn examples(&self, row: usize) -> Option<EmbeddingView<'a>> {
        let (m, d) = (self.decl.m_examples, self.db.dim());
        self.data
            .example_embeddings
            .as_deref()
            .map(|e| EmbeddingView::new(d, &e[row * m * d..(row + 1) * m * d]))
    }

    pub fn record(&self, row: usize) -> ComponentRecord<'a> {
        let m = self.decl.m_examples;
        ComponentRecord {
            id: self.component_id(row),
            theta: self.theta(row),
            examples: self.examples(row),
            activations: self
                .data
                .activations
                .as_deref()
                .map(|a| &a[row * m..(row + 1) * m]),
            relevance: self.relevance_row(row),
            example_meta: self
                .data
                .example_meta
                .as_deref()
                .map(|meta| &meta[row * m..(row + 1) * m]),
        }
    }
}

impl LensDb {
    /// Validates and assembles a database. The manifest's `has_*` flags and
    /// probe-set list are derived from the supplied data.
    pub fn new(
        mut manifest: Manifest,
        layers: Vec<LayerData>,
        probe_sets: Vec<ProbeSet>,
        thumbnails: Thumbnails,
    ) -> Result<Self> {
        if layers.len() != manifest.layers.len() {
            return Err(LensError::InvalidDatabase(format!(
                "{} layers declared, {} supplied",
                manifest.layers.len(),
                layers.len()
            )));
        }
        for (decl, data) in manifest.layers.iter_mut().zip(&layers) {
            decl.has_example_embeddings = data.example_embeddings.is_some();
            decl.has_activations = data.activations.is_some();
            decl.has_relevance = data.relevance.is_some();
            decl.has_edges = data.edges.is_some();
        }
        manifest.probe_sets = probe_sets.iter().map(|p| p.name.clone()).collect();
        let db = LensDb {
            manifest,
            layers,
            probe_sets,
            thumbnails,
        };
        db.validate()?;
        Ok(db)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn model_id(&self) -> &str {
        &self.manifest.model_id
    }

    pub fn targets(&self) -> &[String] {
        &self.manifest.targets
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerRef<'_>> {
        self.manifest
            .layers
            .iter()
            .zip(&self.layers)
            .enumerate()
            .map(move |(position, (decl, data))| LayerRef {
                position,
                decl,
                data,
                db: self,
            })
    }

    pub fn layer(&self, name: &str) -> Result<LayerRef<'_>> {
        self.layers()
            .find(|l| l.decl.name == name)
            .ok_or_else(|| LensError::UnknownLayer(name.to_string()))
    }

    pub fn probe_sets(&self) -> &[ProbeSet] {
        &self.probe_sets
    }

    pub fn probe_set(&self, name: &str) -> Option<&ProbeSet> {
        self.probe_sets.iter().find(|p| p.name == name)
    }

    pub fn thumbnails(&self) -> &Thumbnails {
        &self.thumbnails
    }

    pub fn component(&self, key: &ComponentKey) -> Result<ComponentRecord<'_>> {
        let layer = self
            .layer(&key.layer)
            .map_err(|_| LensError::UnknownComponent(component_label(key)))?;
        let row = layer
            .row_of(key.index, key.sign)
            .ok_or_else(|| LensError::UnknownComponent(component_label(key)))?;
        Ok(layer.record(row))
    }

    pub fn component_by_id(&self, id: &ComponentId) -> Result<ComponentRecord<'_>> {
        if id.model_id != self.manifest.model_id {
            return Err(LensError::UnknownComponent(format!(
                "{id} (model {:?})",
                id.model_id
            )));
        }
        self.component(&ComponentKey {
            layer: id.layer.clone(),
            index: id.index,
            sign: id.sign,
        })
    }

    fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let d = self.manifest.dim;
        let t = self.manifest.targets.len();
        for (decl, data) in self.manifest.layers.iter().zip(&self.layers) {
            let rows = decl.rows();
            let m = decl.m_examples;
            let name = &decl.name;
            check_len(name, "embeddings", data.means.len(), rows * d)?;
            check_vectors(name, "embeddings", &data.means, d, |r| row_label(decl, r, None))?;
            if let Some(e) = &data.example_embeddings {
                check_len(name, "example_embeddings", e.len(), rows * m * d)?;
                check_vectors(name, "example_embeddings", e, d, |i| {
                    row_label(decl, i / m, Some(i % m))
                })?;
            }
            if let Some(a) = &data.activations {
                check_len(name, "activations", a.len(), rows * m)?;
                if let Some(i) = a.iter().position(|v| !v.is_finite()) {
                    return Err(LensError::NonFinite {
                        context: format!("activation of {}", row_label(decl, i / m, Some(i % m))),
                    });
                }
                for (row, acts) in a.chunks_exact(m).enumerate() {
                    if acts.windows(2).any(|w| w[0] < w[1]) {
                        return Err(LensError::InvalidDatabase(format!(
                            "examples of {} are not ordered by descending activation",
                            row_label(decl, row, None)
                        )));
                    }
                }
            }
            if let Some(r) = &data.relevance {
                if t == 0 {
                    return Err(LensError::InvalidDatabase(format!(
                        "layer {name:?} has relevance but no targets are declared"
                    )));
                }
                check_len(name, "relevance", r.len(), rows * t)?;
                if let Some(i) = r.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(LensError::InvalidDatabase(format!(
                        "relevance of {} for target {:?} is {} (must lie in [0, 1])",
                        row_label(decl, i / t, None),
                        self.manifest.targets[i % t],
                        r[i]
                    )));
                }
            }
            if let Some(meta) = &data.example_meta {
                check_len(name, "example_meta", meta.len(), rows * m)?;
                for (i, rec) in meta.iter().enumerate() {
                    let expected_row = i / m;
                    let row = match rec.sign {
                        Sign::Positive => rec.index,
                        Sign::Negative if decl.signed => decl.n_components + rec.index,
                        Sign::Negative => usize::MAX,
                    };
                    if rec.index >= decl.n_components || row != expected_row || rec.rank != i % m {
                        return Err(LensError::InvalidDatabase(format!(
                            "example_meta line {} of layer {name:?} is out of order \
                             (expected {} rank {})",
                            i + 1,
                            row_label(decl, expected_row, None),
                            i % m
                        )));
                    }
                    let [x0, y0, x1, y1] = rec.crop_box;
                    if x0 > x1 || y0 > y1 || !rec.activation.is_finite() {
                        return Err(LensError::InvalidDatabase(format!(
                            "example_meta line {} of layer {name:?} has an invalid crop box or activation",
                            i + 1
                        )));
                    }
                }
            }
            if let Some(edges) = &data.edges {
                self.check_edges(decl, edges)?;
            }
        }
        for p in &self.probe_sets {
            p.validate(d)?;
        }
        for key in self.thumbnails.keys() {
            let ok = self
                .layer(&key.layer)
                .ok()
                .and_then(|l| l.row_of(key.index, key.sign).map(|_| l.decl.m_examples))
                .is_some_and(|m| key.rank < m);
            if !ok {
                return Err(LensError::InvalidDatabase(format!(
                    "thumbnail {} does not belong to a declared component example",
                    key.relative_path().display()
                )));
            }
        }
        Ok(())
    }

    fn check_edges(&self, decl: &LayerDecl, edges: &[RelevanceEdge]) -> Result<()> {
        let upper_pos = self
            .manifest
            .layer_position(&decl.name)
            .expect("declared layer");
        for (i, e) in edges.iter().enumerate() {
            let bad = |m: String| {
                Err(LensError::InvalidDatabase(format!(
                    "edges/{}.tsv line {}: {m}",
                    decl.name,
                    i + 1
                )))
            };
            if !self.manifest.targets.contains(&e.target) {
                return bad(format!("unknown target {:?}", e.target));
            }
            if e.upper.layer != decl.name {
                return bad(format!("upper layer {:?} does not match file", e.upper.layer));
            }
            let Some(lower_pos) = self.manifest.layer_position(&e.lower.layer) else {
                return bad(format!("unknown lower layer {:?}", e.lower.layer));
            };
            if lower_pos >= upper_pos {
                return bad("upper layer must come strictly after lower layer".into());
            }
            let lower_decl = &self.manifest.layers[lower_pos];
            for (k, d) in [(&e.upper, decl), (&e.lower, lower_decl)] {
                let in_range = k.index < d.n_components && (k.sign == Sign::Positive || d.signed);
                if !in_range {
                    return bad(format!("component {}:{} out of range", k.layer, k.index));
                }
            }
            if !e.weight.is_finite() {
                return bad("non-finite weight".into());
            }
        }
        Ok(())
    }

    pub(crate) fn layer_data(&self) -> &[LayerData] {
        &self.layers
    }
}

fn component_label(key: &ComponentKey) -> String {
    match key.sign {
        Sign::Positive => format!("{}:{}", key.layer, key.index),
        Sign::Negative => format!("{}:{}:neg", key.layer, key.index),
    }
}

fn row_label(decl: &LayerDecl, row: usize, rank: Option<usize>) -> String {
    let n = decl.n_components;
    let base = if row < n {
        format!("{}:{}", decl.name, row)
    } else {
        format!("{}:{}:neg", decl.name, row - n)
    };
    match rank {
        Some(r) => format!("{base} rank {r}"),
        None => base,
    }
}

fn check_len(layer: &str, section: &str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(LensError::InvalidDatabase(format!(
            "{section} of layer {layer:?} holds {found} values, expected {expected}"
        )));
    }
    Ok(())
}

fn check_vectors(
    layer: &str,
    section: &str,
    data: &[f32],
    dim: usize,
    label: impl Fn(usize) -> String,
) -> Result<()> {
    for (i, row) in data.chunks_exact(dim).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(LensError::NonFinite {
                context: format!("{section} of layer {layer:?}, {}", label(i)),
            });
        }
        if norm(row) < MIN_NORM {
            return Err(LensError::ZeroNormVector {
                context: format!("{section} of layer {layer:?}, {}", label(i)),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;

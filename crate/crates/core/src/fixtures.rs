//! Seeded synthetic databases with planted structure and known answers.
//!
//! Axis 0 of the embedding space is the null direction. Each planted concept
//! owns one further axis; the remaining axes carry noise only. Planted
//! components therefore align exactly with their own concept and have zero
//! alignment with every other planted concept, whatever the seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::audit::Bucket;
use crate::error::{LensError, Result};
use crate::probe::{Concept, ProbeSet, Validity};
use crate::store::{
    ExampleMeta, LayerData, LayerDecl, LensDb, Manifest, RelevanceEdge, ThumbnailKey, Thumbnails,
};
use crate::vector::{mean_embedding, ComponentKey, EmbeddingView, Sign, Vector};

/// A valid 1×1 RGBA PNG.
pub const PNG_1X1: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
    0x52, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f,
    0x15, 0xc4, 0x89, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8,
    0xcf, 0xc0, 0xf0, 0x1f, 0x00, 0x05, 0x00, 0x01, 0xff, 0x89, 0x99, 0x3d, 0x1d, 0x00, 0x00,
    0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

/// Name of the probe set every synthetic database carries.
pub const PLANTED_PROBES: &str = "planted";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Planted {
    None,
    /// `concepts` orthogonal concepts with `per_concept` components each.
    /// Concepts alternate valid, spurious, valid, ...
    OrthogonalBlobs { concepts: usize, per_concept: usize },
    /// `per_bucket` components in each audit bucket against one valid and
    /// one spurious concept.
    AuditBuckets { per_bucket: usize },
    /// `pairs` pairs of components with identical examples.
    Duplicated { pairs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub planted: Planted,
    /// Noise-only components appended after the planted ones.
    pub background: usize,
    pub signed: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, planted: Planted, background: usize) -> Self {
        LayerSpec {
            name: name.into(),
            planted,
            background,
            signed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticDbSpec {
    pub seed: u64,
    pub model_id: String,
    pub foundation_model_id: String,
    pub dim: usize,
    pub m_examples: usize,
    pub targets: Vec<String>,
    pub layers: Vec<LayerSpec>,
    /// Standard deviation of the per-coordinate noise on free axes.
    pub noise: f32,
    /// Relevance edges between each pair of adjacent layers.
    pub edges: bool,
    /// Thumbnails for the first `thumbnails` components of each layer.
    pub thumbnails: usize,
}

impl SyntheticDbSpec {
    pub fn new(seed: u64, dim: usize, layers: Vec<LayerSpec>) -> Self {
        SyntheticDbSpec {
            seed,
            model_id: "synthetic".into(),
            foundation_model_id: "synthetic-embedder".into(),
            dim,
            m_examples: 4,
            targets: vec!["target".into()],
            layers,
            noise: 0.1,
            edges: true,
            thumbnails: 0,
        }
    }
}

/// What the generator planted for one component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentTruth {
    /// Label of the concept planted in this component.
    pub concept: Option<String>,
    /// Audit bucket against the planted valid/spurious concepts.
    pub bucket: Bucket,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GroundTruth {
    /// Keyed by `layer:index[:neg]`.
    pub components: BTreeMap<String, ComponentTruth>,
    /// Redundancy of layers built solely from duplicated pairs.
    pub redundancy: BTreeMap<String, f64>,
}

struct Axes {
    concepts: Vec<(String, Validity, usize)>,
    free: std::ops::Range<usize>,
}

fn allocate_axes(spec: &SyntheticDbSpec) -> Result<Axes> {
    let mut concepts = Vec::new();
    let mut next = 1;
    for l in &spec.layers {
        match l.planted {
            Planted::OrthogonalBlobs { concepts: c, .. } => {
                for i in 0..c {
                    let label = format!("concept-{i}");
                    if concepts.iter().any(|x: &(String, Validity, usize)| x.0 == label) {
                        continue;
                    }
                    let validity = if i % 2 == 0 { Validity::Valid } else { Validity::Spurious };
                    concepts.push((label, validity, next));
                    next += 1;
                }
            }
            Planted::AuditBuckets { .. } => {
                for (label, validity) in [("valid", Validity::Valid), ("spurious", Validity::Spurious)] {
                    if !concepts.iter().any(|c| c.0 == label) {
                        concepts.push((label.to_string(), validity, next));
                        next += 1;
                    }
                }
            }
            Planted::None | Planted::Duplicated { .. } => {}
        }
    }
    if spec.dim < next + 2 {
        return Err(LensError::InvalidArgument(format!(
            "dim {} leaves fewer than 2 noise axes for {} planted concepts",
            spec.dim,
            next - 1
        )));
    }
    Ok(Axes {
        concepts,
        free: next..spec.dim,
    })
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    spec: &'a SyntheticDbSpec,
    axes: &'a Axes,
}

impl Gen<'_> {
    fn noise(&mut self, v: &mut [f32]) {
        for j in self.axes.free.clone() {
            let z: f32 = StandardNormal.sample(&mut self.rng);
            v[j] += self.spec.noise * z;
        }
    }

    /// Examples that share a fixed planted part and carry free-axis noise.
    fn examples(&mut self, planted: &[(usize, f32)], anchor: bool) -> Vec<f32> {
        let d = self.spec.dim;
        let mut base = vec![0.0f32; d];
        for &(axis, value) in planted {
            base[axis] = value;
        }
        if anchor || planted.is_empty() {
            // keeps noise-only components away from zero
            let j = self.rng.random_range(self.axes.free.clone());
            base[j] += 1.0;
        }
        (0..self.spec.m_examples)
            .flat_map(|_| {
                let mut v = base.clone();
                self.noise(&mut v);
                v
            })
            .collect()
    }

    fn axis(&self, label: &str) -> usize {
        self.axes.concepts.iter().find(|c| c.0 == label).expect("allocated").2
    }
}

struct Row {
    examples: Vec<f32>,
    planted: bool,
    concept: Option<String>,
    bucket: Bucket,
}

fn layer_rows(g: &mut Gen<'_>, layer: &LayerSpec) -> Vec<Row> {
    let mut rows = Vec::new();
    match &layer.planted {
        Planted::None => {}
        Planted::OrthogonalBlobs {
            concepts,
            per_concept,
        } => {
            for c in 0..*concepts {
                let label = format!("concept-{c}");
                let (_, validity, axis) = g.axes.concepts.iter().find(|x| x.0 == label).expect("allocated").clone();
                for _ in 0..*per_concept {
                    let amp = g.rng.random_range(0.5f32..1.5);
                    rows.push(Row {
                        planted: true,
                        examples: g.examples(&[(axis, amp)], false),
                        bucket: match validity {
                            Validity::Valid => Bucket::ValidOnly,
                            Validity::Spurious => Bucket::Spurious,
                            Validity::Neutral => Bucket::Unexpected,
                        },
                        concept: Some(label.clone()),
                    });
                }
            }
        }
        Planted::AuditBuckets { per_bucket } => {
            let (va, sa) = (g.axis("valid"), g.axis("spurious"));
            for bucket in Bucket::ALL {
                for _ in 0..*per_bucket {
                    let a = g.rng.random_range(0.5f32..1.5);
                    // equal amplitudes for "both" make the label a tie, which
                    // the first declared concept wins
                    let b = if bucket == Bucket::Both { a } else { g.rng.random_range(0.5f32..1.5) };
                    // small negative loading on the concept that must not align
                    let shared = 0.3 * a.min(b);
                    let planted = match bucket {
                        Bucket::ValidOnly => vec![(va, a), (sa, -shared)],
                        Bucket::Spurious => vec![(va, -shared), (sa, b)],
                        Bucket::Both => vec![(va, a), (sa, b)],
                        Bucket::Unexpected => vec![(va, -a), (sa, -b)],
                    };
                    let concept = match bucket {
                        Bucket::ValidOnly => Some("valid".to_string()),
                        Bucket::Spurious => Some("spurious".to_string()),
                        Bucket::Both => Some("valid".to_string()),
                        Bucket::Unexpected => None,
                    };
                    rows.push(Row {
                        planted: true,
                        examples: g.examples(&planted, false),
                        concept,
                        bucket,
                    });
                }
            }
        }
        Planted::Duplicated { pairs } => {
            for _ in 0..*pairs {
                let examples = g.examples(&[], true);
                for _ in 0..2 {
                    rows.push(Row {
                        planted: true,
                        examples: examples.clone(),
                        concept: None,
                        bucket: Bucket::Unexpected,
                    });
                }
            }
        }
    }
    for _ in 0..layer.background {
        rows.push(Row {
            planted: false,
            examples: g.examples(&[], true),
            concept: None,
            bucket: Bucket::Unexpected,
        });
    }
    rows
}

/// Builds the database described by `spec` and the answers it was built to
/// produce.
///
/// Signed layers get a negative record per component drawn like a fresh
/// background component. Planted components receive relevance of at least
/// 0.05 for every target; background components at most 0.005.
pub fn generate(spec: &SyntheticDbSpec) -> Result<(LensDb, GroundTruth)> {
    if spec.m_examples == 0 {
        return Err(LensError::InvalidArgument("m_examples must be at least 1".into()));
    }
    if spec.targets.is_empty() {
        return Err(LensError::InvalidArgument("at least one target is required".into()));
    }
    let axes = allocate_axes(spec)?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        spec,
        axes: &axes,
    };
    let (d, m, t) = (spec.dim, spec.m_examples, spec.targets.len());
    let mut truth = GroundTruth::default();
    let mut decls = Vec::new();
    let mut layers = Vec::new();
    let mut thumbnails = Thumbnails::default();

    for layer in &spec.layers {
        let mut rows = layer_rows(&mut g, layer);
        let n = rows.len();
        if n == 0 {
            return Err(LensError::InvalidArgument(format!("layer {} has no components", layer.name)));
        }
        if matches!(layer.planted, Planted::Duplicated { .. }) && layer.background == 0 {
            truth.redundancy.insert(layer.name.clone(), 1.0);
        }
        if layer.signed {
            for _ in 0..n {
                rows.push(Row {
                    planted: false,
                    examples: g.examples(&[], true),
                    concept: None,
                    bucket: Bucket::Unexpected,
                });
            }
        }
        let mut means = Vec::with_capacity(rows.len() * d);
        let mut activations = Vec::with_capacity(rows.len() * m);
        let mut relevance = Vec::with_capacity(rows.len() * t);
        let mut meta = Vec::with_capacity(rows.len() * m);
        for (row, r) in rows.iter().enumerate() {
            means.extend(mean_embedding(EmbeddingView::new(d, &r.examples))?.into_inner());
            let mut acts: Vec<f32> = (0..m).map(|_| g.rng.random_range(0.0f32..10.0)).collect();
            acts.sort_by(|a, b| b.total_cmp(a));
            let (index, sign) = (row % n, if row < n { Sign::Positive } else { Sign::Negative });
            for (rank, &a) in acts.iter().enumerate() {
                meta.push(ExampleMeta {
                    index,
                    sign,
                    rank,
                    sample_id: format!("sample-{}", g.rng.random_range(0u32..1_000_000)),
                    crop_box: [0, 0, 32, 32],
                    activation: f64::from(a),
                });
                if index < spec.thumbnails {
                    let key = ThumbnailKey {
                        layer: layer.name.clone(),
                        index,
                        sign,
                        rank,
                    };
                    thumbnails.insert(key, PNG_1X1.to_vec());
                }
            }
            activations.extend(acts);
            for _ in 0..t {
                relevance.push(if r.planted {
                    g.rng.random_range(0.05f32..=1.0)
                } else {
                    g.rng.random_range(0.0f32..0.005)
                });
            }
            let key = ComponentKey {
                layer: layer.name.clone(),
                index,
                sign,
            };
            truth.components.insert(
                key.to_string(),
                ComponentTruth {
                    concept: r.concept.clone(),
                    bucket: r.bucket,
                },
            );
        }
        let mut decl = LayerDecl::new(&layer.name, n, m);
        decl.signed = layer.signed;
        decls.push(decl);
        layers.push(LayerData {
            means,
            example_embeddings: Some(rows.into_iter().flat_map(|r| r.examples).collect()),
            activations: Some(activations),
            relevance: Some(relevance),
            example_meta: Some(meta),
            edges: None,
        });
    }

    if spec.edges {
        for upper in 1..decls.len() {
            let lower_n = decls[upper - 1].n_components;
            let mut edges = Vec::new();
            for target in &spec.targets {
                for index in 0..decls[upper].n_components {
                    for _ in 0..2 {
                        edges.push(RelevanceEdge {
                            target: target.clone(),
                            upper: ComponentKey {
                                layer: decls[upper].name.clone(),
                                index,
                                sign: Sign::Positive,
                            },
                            lower: ComponentKey {
                                layer: decls[upper - 1].name.clone(),
                                index: g.rng.random_range(0..lower_n),
                                sign: Sign::Positive,
                            },
                            weight: f64::from(g.rng.random_range(0.0f32..1.0)),
                        });
                    }
                }
            }
            layers[upper].edges = Some(edges);
        }
    }

    let mut null = vec![0.0f32; d];
    null[0] = 1.0;
    let concepts = axes
        .concepts
        .iter()
        .map(|(label, validity, axis)| {
            let mut e = vec![0.0f32; d];
            e[*axis] = 1.0;
            Ok(Concept {
                label: label.clone(),
                category: Some(validity.as_str().to_string()),
                validity: *validity,
                embedding: Vector::new(e)?,
                prompts: vec![format!("a photo of {label}")],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let probe_sets = if concepts.is_empty() {
        Vec::new()
    } else {
        vec![ProbeSet {
            name: PLANTED_PROBES.into(),
            null_embedding: Some(Vector::new(null)?),
            concepts,
        }]
    };

    let mut manifest = Manifest::new(&spec.model_id, &spec.foundation_model_id, d, decls);
    manifest.targets = spec.targets.clone();
    manifest.dataset_note = Some(format!("synthetic, seed {}", spec.seed));
    let db = LensDb::new(manifest, layers, probe_sets, thumbnails)?;
    Ok((db, truth))
}

/// A minimal database from explicit component means: one target, no
/// optional sections.
pub fn from_means(dim: usize, layers: &[(&str, Vec<Vec<f32>>)]) -> Result<LensDb> {
    let decls = layers
        .iter()
        .map(|(name, rows)| LayerDecl::new(*name, rows.len(), 1))
        .collect();
    let data = layers
        .iter()
        .map(|(_, rows)| LayerData {
            means: rows.iter().flatten().copied().collect(),
            ..LayerData::default()
        })
        .collect();
    let mut manifest = Manifest::new("fixture", "fixture-embedder", dim, decls);
    manifest.targets = vec!["target".into()];
    LensDb::new(manifest, data, Vec::new(), Thumbnails::default())
}

/// Slow, obviously correct references for the fast paths.
pub mod oracle {
    use crate::store::LensDb;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for (x, y) in a.iter().zip(b) {
            let (x, y) = (f64::from(*x), f64::from(*y));
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }

    /// Every component scored one at a time, stably sorted by score.
    /// Returns `(layer:index[:neg], score)`.
    pub fn exhaustive_search(
        db: &LensDb,
        probe: &[f32],
        null: Option<&[f32]>,
        top_n: usize,
    ) -> Vec<(String, f64)> {
        let mut all = Vec::new();
        for layer in db.layers() {
            for row in 0..layer.rows() {
                let theta = layer.theta(row);
                let score = cos(probe, theta) - null.map_or(0.0, |n| cos(n, theta));
                all.push((layer.key_of(row).to_string(), score));
            }
        }
        all.sort_by(|a, b| b.1.total_cmp(&a.1));
        all.truncate(top_n);
        all
    }

    /// Fraction of (positive, negative) pairs won by the positive, ties ½.
    pub fn pair_counting_auc(positive: &[f64], negative: &[f64]) -> f64 {
        let mut wins = 0.0;
        for p in positive {
            for n in negative {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (positive.len() * negative.len()) as f64
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
    /// descending.
    pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }
}

//! Search, labelling, dissection, cross-model comparison and 2-D projection.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::metrics::spherical_kmeans;
use crate::probe::ProbeSet;
use crate::store::{LayerRef, LensDb};
use crate::vector::{
    check_dims, checked_norm, mean_f64, AlignmentProbe, ComponentId, EmbeddingView,
};

/// Default labelling threshold on null-subtracted alignment.
pub const DEFAULT_TAU: f64 = 0.025;

/// Group name used for components without a label.
pub const UNLABELLED: &str = "?";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerFilter {
    #[default]
    All,
    Only(Vec<String>),
}

impl LayerFilter {
    pub fn from_names(names: Vec<String>) -> Self {
        if names.is_empty() {
            LayerFilter::All
        } else {
            LayerFilter::Only(names)
        }
    }

    /// Selected layers in manifest order.
    pub fn resolve<'a>(&self, db: &'a LensDb) -> Result<Vec<LayerRef<'a>>> {
        match self {
            LayerFilter::All => Ok(db.layers().collect()),
            LayerFilter::Only(names) if names.is_empty() => Err(LensError::EmptyLayerFilter),
            LayerFilter::Only(names) => {
                for n in names {
                    db.layer(n)?;
                }
                Ok(db.layers().filter(|l| names.iter().any(|n| n == l.name())).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub component: ComponentId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

struct Scored {
    layer: usize,
    index: usize,
    negative: bool,
    row: usize,
    score: f64,
}

fn by_score_then_position(a: &Scored, b: &Scored) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.layer.cmp(&b.layer))
        .then(a.index.cmp(&b.index))
        .then(a.negative.cmp(&b.negative))
}

/// Exhaustive null-subtracted alignment scan over the selected layers.
///
/// Hits are ordered by score, descending; equal scores fall back to
/// manifest layer order, then component index.
pub fn search(
    db: &LensDb,
    probe: &[f32],
    null: Option<&[f32]>,
    layers: &LayerFilter,
    top_n: usize,
) -> Result<Vec<SearchHit>> {
    if top_n == 0 {
        return Err(LensError::InvalidArgument("top_n must be at least 1".into()));
    }
    check_dims(db.dim(), probe.len())?;
    if let Some(n) = null {
        check_dims(db.dim(), n.len())?;
    }
    let probe = AlignmentProbe::new(probe, null)?;
    let layers = layers.resolve(db)?;
    let mut scored = Vec::new();
    for layer in &layers {
        let n = layer.decl.n_components;
        let part = (0..layer.rows())
            .into_par_iter()
            .map(|row| {
                Ok(Scored {
                    layer: layer.position,
                    index: row % n,
                    negative: row >= n,
                    row,
                    score: probe.score(layer.theta(row))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        scored.extend(part);
    }
    scored.par_sort_unstable_by(by_score_then_position);
    scored.truncate(top_n);
    let all: Vec<LayerRef<'_>> = db.layers().collect();
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, s)| SearchHit {
            component: all[s.layer].component_id(s.row),
            score: s.score,
            rank: i + 1,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelAssignment {
    pub component: ComponentId,
    pub label: Option<String>,
    /// Best alignment over the probe set, whether or not it cleared `tau`.
    pub alignment: f64,
    pub category: Option<String>,
}

fn concept_probes<'a>(db: &LensDb, probes: &'a ProbeSet) -> Result<Vec<AlignmentProbe<'a>>> {
    if probes.concepts.is_empty() {
        return Err(LensError::InvalidProbeSet(format!("{}: no concepts", probes.name)));
    }
    probes.validate(db.dim())?;
    probes
        .concepts
        .iter()
        .map(|c| AlignmentProbe::new(&c.embedding, probes.null()))
        .collect()
}

/// Assigns each component its most aligned concept, or none when the best
/// alignment does not exceed `tau`. Ties go to the earlier concept.
pub fn label_components(
    db: &LensDb,
    probes: &ProbeSet,
    layers: &LayerFilter,
    tau: f64,
) -> Result<Vec<LabelAssignment>> {
    let concept_probes = concept_probes(db, probes)?;
    let layers = layers.resolve(db)?;
    let mut out = Vec::new();
    for layer in layers {
        let part = (0..layer.rows())
            .into_par_iter()
            .map(|row| {
                let theta = layer.theta(row);
                let mut best = (0usize, f64::NEG_INFINITY);
                for (i, p) in concept_probes.iter().enumerate() {
                    let a = p.score(theta)?;
                    if a > best.1 {
                        best = (i, a);
                    }
                }
                let concept = &probes.concepts[best.0];
                let labelled = best.1 > tau;
                Ok(LabelAssignment {
                    component: layer.component_id(row),
                    label: labelled.then(|| concept.label.clone()),
                    alignment: best.1,
                    category: if labelled { concept.category.clone() } else { None },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(part);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Label,
    /// Parent category; labels without a category form their own group.
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissectionRow {
    pub group: String,
    pub layer: String,
    pub count: usize,
    /// Share of the layer's labelled components; for the `?` group, share of
    /// all the layer's components.
    pub relative_share: f64,
}

/// Counts labelled components per group and layer.
///
/// Layers appear in the order they first occur in `assignments`. Within a
/// layer, groups are sorted by count (descending) then name, with `?` last.
pub fn dissect(assignments: &[LabelAssignment], group_by: GroupBy) -> Vec<DissectionRow> {
    let mut layers: Vec<&str> = Vec::new();
    for a in assignments {
        if !layers.contains(&a.component.layer.as_str()) {
            layers.push(&a.component.layer);
        }
    }
    let mut rows = Vec::new();
    for layer in layers {
        let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
        let mut unlabelled = 0usize;
        let mut total = 0usize;
        for a in assignments.iter().filter(|a| a.component.layer == layer) {
            total += 1;
            match &a.label {
                None => unlabelled += 1,
                Some(label) => {
                    let group = match group_by {
                        GroupBy::Label => label.as_str(),
                        GroupBy::Category => a.category.as_deref().unwrap_or(label),
                    };
                    *counts.entry(group).or_default() += 1;
                }
            }
        }
        let labelled = total - unlabelled;
        let mut groups: Vec<(&str, usize)> = counts.into_iter().collect();
        groups.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        rows.extend(groups.into_iter().map(|(group, count)| DissectionRow {
            group: group.to_string(),
            layer: layer.to_string(),
            count,
            relative_share: count as f64 / labelled as f64,
        }));
        if unlabelled > 0 {
            rows.push(DissectionRow {
                group: UNLABELLED.to_string(),
                layer: layer.to_string(),
                count: unlabelled,
                relative_share: unlabelled as f64 / total as f64,
            });
        }
    }
    rows
}

fn unit_rows(v: EmbeddingView<'_>, what: &str) -> Result<Vec<Vec<f64>>> {
    v.rows()
        .enumerate()
        .map(|(i, r)| {
            let n = checked_norm(r, &format!("{what} row {i}"))?;
            Ok(r.iter().map(|&x| f64::from(x) / n).collect())
        })
        .collect()
}

/// Mean over rows of `a` of the best cosine match in `b`. Not symmetric.
pub fn compare_sets<'a, 'b>(
    a: impl Into<EmbeddingView<'a>>,
    b: impl Into<EmbeddingView<'b>>,
) -> Result<f64> {
    let (a, b) = (a.into(), b.into());
    if a.is_empty() || b.is_empty() {
        return Err(LensError::EmptySet("set comparison needs two non-empty sets"));
    }
    check_dims(a.dim(), b.dim())?;
    let ua = unit_rows(a, "left set")?;
    let ub = unit_rows(b, "right set")?;
    let best: Vec<f64> = ua
        .par_iter()
        .map(|x| {
            ub.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().clamp(-1.0, 1.0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    /// How much of the first layer's semantics the second layer covers.
    pub forward: f64,
    pub backward: f64,
}

/// Set similarity in both directions between layers of two databases that
/// share a foundation model.
pub fn compare_layers(a: &LensDb, layer_a: &str, b: &LensDb, layer_b: &str) -> Result<Comparison> {
    let fa = &a.manifest().foundation_model_id;
    let fb = &b.manifest().foundation_model_id;
    if fa != fb {
        return Err(LensError::InvalidArgument(format!(
            "databases were embedded with different foundation models ({fa:?} vs {fb:?})"
        )));
    }
    let la = a.layer(layer_a)?.means();
    let lb = b.layer(layer_b)?.means();
    Ok(Comparison {
        forward: compare_sets(la, lb)?,
        backward: compare_sets(lb, la)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    /// One `(x, y)` pair per input row.
    pub coords: Vec<[f64; 2]>,
    /// Variance along each of the two principal directions.
    pub explained_variance: [f64; 2],
    pub total_variance: f64,
}

impl Projection {
    pub fn captured_fraction(&self) -> f64 {
        (self.explained_variance[0] + self.explained_variance[1]) / self.total_variance
    }
}

/// Projects rows onto their top two principal directions.
///
/// Rows are centred; variances use the `n - 1` normalisation. Each
/// direction's sign is fixed so that its largest-magnitude loading is
/// positive.
pub fn project_2d<'a>(m: impl Into<EmbeddingView<'a>>) -> Result<Projection> {
    let m = m.into();
    let (n, d) = (m.len(), m.dim());
    if n < 3 {
        return Err(LensError::InvalidArgument(format!(
            "projection needs at least 3 rows, got {n}"
        )));
    }
    let mean = mean_f64(m);
    let x = DMatrix::from_fn(n, d, |i, j| f64::from(m.row(i)[j]) - mean[j]);
    let scale = 1.0 / (n as f64 - 1.0);
    let total_variance = x.iter().map(|v| v * v).sum::<f64>() * scale;
    if !(total_variance > 0.0) {
        return Err(LensError::DegenerateData("all rows are identical".into()));
    }

    let mut directions: Vec<(f64, Option<Vec<f64>>)> = Vec::with_capacity(2);
    if d <= n {
        let cov = x.transpose() * &x * scale;
        let eig = SymmetricEigen::new(cov);
        for idx in top_two(eig.eigenvalues.as_slice()) {
            let w: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            directions.push((eig.eigenvalues[idx].max(0.0), Some(w)));
        }
    } else {
        let gram = &x * x.transpose() * scale;
        let eig = SymmetricEigen::new(gram);
        for idx in top_two(eig.eigenvalues.as_slice()) {
            let lambda = eig.eigenvalues[idx].max(0.0);
            let w = x.transpose() * eig.eigenvectors.column(idx);
            let len = w.norm();
            if lambda <= total_variance * 1e-15 || len <= 0.0 {
                directions.push((0.0, None));
            } else {
                directions.push((lambda, Some(w.iter().map(|v| v / len).collect())));
            }
        }
    }
    while directions.len() < 2 {
        directions.push((0.0, None));
    }

    let mut coords = vec![[0.0; 2]; n];
    for (k, (_, w)) in directions.iter_mut().enumerate() {
        let Some(w) = w else { continue };
        let pivot = w
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if v.abs() > w[best].abs() { j } else { best });
        if w[pivot] < 0.0 {
            w.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, c) in coords.iter_mut().enumerate() {
            c[k] = x.row(i).iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Projection {
        coords,
        explained_variance: [directions[0].0, directions[1].0],
        total_variance,
    })
}

fn top_two(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(2);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterLabel {
    pub cluster: usize,
    /// Row positions of the members, ascending.
    pub members: Vec<usize>,
    /// Best-aligned concepts for the cluster's mean embedding, best first.
    pub labels: Vec<(String, f64)>,
}

/// Clusters rows with seeded spherical k-means and labels each cluster's
/// mean embedding with its `top` best-aligned concepts.
pub fn cluster_labels<'a>(
    m: impl Into<EmbeddingView<'a>>,
    k: usize,
    probes: &ProbeSet,
    top: usize,
    seed: u64,
) -> Result<Vec<ClusterLabel>> {
    let m = m.into();
    probes.validate(m.dim())?;
    let concept_probes: Vec<AlignmentProbe<'_>> = probes
        .concepts
        .iter()
        .map(|c| AlignmentProbe::new(&c.embedding, probes.null()))
        .collect::<Result<_>>()?;
    let clusters = spherical_kmeans(m, k, seed)?;
    (0..k)
        .map(|cluster| {
            let members: Vec<usize> = (0..m.len())
                .filter(|&i| clusters.labels[i] == cluster)
                .collect();
            if members.is_empty() {
                return Ok(ClusterLabel {
                    cluster,
                    members,
                    labels: Vec::new(),
                });
            }
            let rows: Vec<f32> = members.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
            let mean: Vec<f32> = mean_f64(EmbeddingView::new(m.dim(), &rows))
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let mut scored = concept_probes
                .iter()
                .zip(&probes.concepts)
                .map(|(p, c)| Ok((c.label.clone(), p.score(&mean)?)))
                .collect::<Result<Vec<_>>>()?;
            // stable sort keeps declaration order among equal scores
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            scored.truncate(top);
            Ok(ClusterLabel {
                cluster,
                members,
                labels: scored,
            })
        })
        .collect()
}

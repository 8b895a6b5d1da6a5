//! Human-interpretability measures over embedded concept examples.
//!
//! * clarity: mean pairwise cosine similarity among a component's example
//!   embeddings, computed through the norm of the mean unit vector;
//! * similarity / redundancy: cosine between component embeddings and the
//!   mean best-match similarity inside a set;
//! * polysemanticity: one minus the clarity of per-cluster sums after
//!   splitting the examples with seeded spherical k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LensError, Result};
use crate::store::LensDb;
use crate::vector::{
    check_dims, checked_norm, cosine_similarity, dot, ComponentId, EmbeddingView,
};

pub const DEFAULT_CLUSTERS: usize = 2;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClarityScore {
    pub value: f64,
    pub n: usize,
}

impl ClarityScore {
    /// Lowest attainable clarity for a set of this size, `-1/(n-1)`.
    pub fn lower_bound(&self) -> f64 {
        -1.0 / (self.n as f64 - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolysemanticityScore {
    pub value: f64,
    pub h: usize,
    /// Clustering produced fewer than `h` non-empty clusters; `value` is 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// Unit-norm centroid per cluster.
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn non_empty(&self) -> usize {
        self.sizes().iter().filter(|&&s| s > 0).count()
    }
}

fn unit_rows(v: EmbeddingView<'_>) -> Result<Vec<Vec<f64>>> {
    v.rows()
        .enumerate()
        .map(|(i, row)| {
            let n = checked_norm(row, &format!("row {i}"))?;
            Ok(row.iter().map(|&x| f64::from(x) / n).collect())
        })
        .collect()
}

fn norm64(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot64(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn require_pairs(n: usize) -> Result<()> {
    match n {
        0 => Err(LensError::EmptySet("clarity of an empty set")),
        1 => Err(LensError::SingletonSet("clarity")),
        _ => Ok(()),
    }
}

/// Compact clarity: `n/(n-1) * (|mean of unit rows|^2 - 1/n)`.
pub fn clarity<'a>(v: impl Into<EmbeddingView<'a>>) -> Result<ClarityScore> {
    let v = v.into();
    require_pairs(v.len())?;
    let units = unit_rows(v)?;
    Ok(ClarityScore {
        value: compact_clarity(&units),
        n: units.len(),
    })
}

fn compact_clarity(units: &[Vec<f64>]) -> f64 {
    let n = units.len() as f64;
    let mut mean = vec![0.0; units[0].len()];
    for u in units {
        for (m, x) in mean.iter_mut().zip(u) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    n / (n - 1.0) * (dot64(&mean, &mean) - 1.0 / n)
}

/// Clarity from its definition: the mean cosine over all ordered pairs
/// `i != j`. Quadratic; kept as a reference for the compact form.
pub fn clarity_pairwise_oracle<'a>(v: impl Into<EmbeddingView<'a>>) -> Result<f64> {
    let v = v.into();
    require_pairs(v.len())?;
    let n = v.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += cosine_similarity(v.row(i), v.row(j))?;
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Cosine similarity between two component embeddings.
pub fn concept_similarity(theta_a: &[f32], theta_b: &[f32]) -> Result<f64> {
    cosine_similarity(theta_a, theta_b)
}

/// Full `n × n` cosine similarity matrix, row-major.
pub fn similarity_matrix<'a>(v: impl Into<EmbeddingView<'a>>) -> Result<Vec<f64>> {
    let units = unit_rows(v.into())?;
    let n = units.len();
    Ok((0..n * n)
        .into_par_iter()
        .map(|ij| dot64(&units[ij / n], &units[ij % n]).clamp(-1.0, 1.0))
        .collect())
}

/// Mean over components of the best cosine match among the other components.
pub fn redundancy<'a>(v: impl Into<EmbeddingView<'a>>) -> Result<f64> {
    let v = v.into();
    match v.len() {
        0 => return Err(LensError::EmptySet("redundancy of an empty set")),
        1 => return Err(LensError::SingletonSet("redundancy")),
        _ => {}
    }
    let units = unit_rows(v)?;
    let best: Vec<f64> = (0..units.len())
        .into_par_iter()
        .map(|k| {
            units
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, u)| dot64(&units[k], u).clamp(-1.0, 1.0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

/// Spherical k-means with seeded k-means++ initialisation.
///
/// Rows are L2-normalised and assigned to the centroid with the largest dot
/// product (ties to the lowest centroid index). Runs at most
/// [`KMEANS_MAX_ITERS`] iterations or until no centroid moves by more than
/// [`KMEANS_TOLERANCE`]. An empty cluster is re-seeded with the point
/// farthest from its own centroid, unless every point already sits exactly
/// on its centroid; such clusters stay empty.
pub fn spherical_kmeans<'a>(
    v: impl Into<EmbeddingView<'a>>,
    k: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let v = v.into();
    let n = v.len();
    if n == 0 {
        return Err(LensError::EmptySet("k-means over no rows"));
    }
    if k == 0 {
        return Err(LensError::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(LensError::KTooLarge { k, n });
    }
    let units = unit_rows(v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&units, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        for (label, u) in labels.iter_mut().zip(&units) {
            *label = nearest(u, &centroids);
        }
        reseed_empty(&units, &mut labels, &mut centroids);

        let dim = units[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        for (u, &l) in units.iter().zip(&labels) {
            for (s, x) in sums[l].iter_mut().zip(u) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, s) in centroids.iter_mut().zip(sums) {
            let len = norm64(&s);
            if len > 0.0 {
                let next: Vec<f64> = s.iter().map(|x| x / len).collect();
                let moved = c
                    .iter()
                    .zip(&next)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                shift = shift.max(moved);
                *c = next;
            }
        }
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    Ok(ClusterAssignment {
        labels,
        centroids,
        iterations,
    })
}

fn nearest(u: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let s = dot64(u, c);
        if s > best_sim {
            best = j;
            best_sim = s;
        }
    }
    best
}

fn kmeans_plus_plus(units: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = units.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut closest: Vec<f64> = units.iter().map(|u| dot64(u, &units[chosen[0]])).collect();
    while chosen.len() < k {
        let weights: Vec<f64> = closest
            .iter()
            .map(|s| {
                let d = (1.0 - s).max(0.0);
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > r {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a chosen centre
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(pick);
        for (c, u) in closest.iter_mut().zip(units) {
            *c = c.max(dot64(u, &units[pick]));
        }
    }
    chosen.into_iter().map(|i| units[i].clone()).collect()
}

fn reseed_empty(units: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, u) in units.iter().enumerate() {
            let l = labels[i];
            if sizes[l] < 2 {
                continue;
            }
            let s = dot64(u, &centroids[l]);
            if 1.0 - s > 1e-12 && far.is_none_or(|(_, best)| s < best) {
                far = Some((i, s));
            }
        }
        if let Some((i, _)) = far {
            sizes[labels[i]] -= 1;
            labels[i] = j;
            sizes[j] = 1;
            centroids[j] = units[i].clone();
        }
    }
}

/// `1 - clarity` of the per-cluster sums of the (unnormalised) examples.
pub fn polysemanticity<'a>(
    v: impl Into<EmbeddingView<'a>>,
    h: usize,
    seed: u64,
) -> Result<PolysemanticityScore> {
    let v = v.into();
    if h < 2 {
        return Err(LensError::InvalidArgument(
            "polysemanticity needs at least two clusters".into(),
        ));
    }
    let clusters = spherical_kmeans(v, h, seed)?;
    let mut sums = vec![vec![0.0f64; v.dim()]; h];
    for (row, &l) in v.rows().zip(&clusters.labels) {
        for (s, &x) in sums[l].iter_mut().zip(row) {
            *s += f64::from(x);
        }
    }
    let sizes = clusters.sizes();
    let sums: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&sizes)
        .filter(|(_, &size)| size > 0)
        .map(|(s, _)| s)
        .collect();
    if sums.len() < h {
        return Ok(PolysemanticityScore {
            value: 0.0,
            h,
            degenerate: true,
        });
    }
    let units = sums
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let len = norm64(s);
            if len <= 0.0 {
                return Err(LensError::ZeroNormVector {
                    context: format!("sum of cluster {i}"),
                });
            }
            Ok(s.iter().map(|x| x / len).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(PolysemanticityScore {
        value: 1.0 - compact_clarity(&units),
        h,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentMetrics {
    pub component: ComponentId,
    pub clarity: Option<f64>,
    pub polysemanticity: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub layer: String,
    pub h: usize,
    pub seed: u64,
    pub components: Vec<ComponentMetrics>,
    /// Redundancy of the layer's component embeddings; absent for a
    /// single-record layer.
    pub redundancy: Option<f64>,
}

/// Clarity and polysemanticity for every record of `layer`, plus the
/// layer's redundancy. Per-component scores need at least two examples and
/// are left empty otherwise.
pub fn layer_metrics(db: &LensDb, layer: &str, h: usize, seed: u64) -> Result<MetricsReport> {
    let layer = db.layer(layer)?;
    let m = layer.decl.m_examples;
    let components = (0..layer.rows())
        .into_par_iter()
        .map(|row| {
            let component = layer.component_id(row);
            match layer.examples(row) {
                Some(ex) if m >= 2 => {
                    let c = clarity(ex)?;
                    let p = if m >= h {
                        Some(polysemanticity(ex, h, seed)?)
                    } else {
                        None
                    };
                    Ok(ComponentMetrics {
                        component,
                        clarity: Some(c.value),
                        polysemanticity: p.map(|p| p.value),
                        degenerate: p.is_some_and(|p| p.degenerate),
                    })
                }
                _ => Ok(ComponentMetrics {
                    component,
                    clarity: None,
                    polysemanticity: None,
                    degenerate: false,
                }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let redundancy = if layer.rows() >= 2 {
        Some(redundancy(layer.means())?)
    } else {
        None
    };
    Ok(MetricsReport {
        layer: layer.name().to_string(),
        h,
        seed,
        components,
        redundancy,
    })
}

/// Dot products of one vector against every row; used by benchmarks.
pub fn dot_scan(rows: EmbeddingView<'_>, x: &[f32]) -> Result<Vec<f64>> {
    check_dims(rows.dim(), x.len())?;
    Ok(rows.rows().map(|r| dot(r, x)).collect())
}

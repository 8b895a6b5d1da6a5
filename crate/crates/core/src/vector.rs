//! Embedding vectors, matrices, component identities and the elementary
//! similarity arithmetic everything else is built on.
//!
//! Storage is single precision; every reduction here accumulates in `f64`
//! in ascending index order so results are reproducible bit for bit.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

/// Vectors whose L2 norm falls below this are rejected at ingestion.
pub const MIN_NORM: f64 = 1e-12;

/// A finite, non-empty embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(LensError::EmptySet("vector has no coordinates"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LensError::NonFinite {
                context: format!("vector coordinate {i}"),
            });
        }
        Ok(Vector(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for Vector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for Vector {
    type Error = LensError;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Borrowed row-major `n × d` block of embeddings.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingView<'a> {
    dim: usize,
    data: &'a [f32],
}

impl<'a> EmbeddingView<'a> {
    /// Panics if `data.len()` is not a multiple of `dim`.
    pub fn new(dim: usize, data: &'a [f32]) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        assert_eq!(data.len() % dim, 0, "data length not a multiple of dim");
        EmbeddingView { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'a, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }
}

impl<'a> From<&'a EmbeddingMatrix> for EmbeddingView<'a> {
    fn from(m: &'a EmbeddingMatrix) -> Self {
        m.view()
    }
}

/// Owned row-major embedding matrix with one opaque identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    /// Builds a matrix whose row ids are the row positions.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::with_ids(rows, ids)
    }

    pub fn with_ids<R: AsRef<[f32]>>(rows: &[R], ids: Vec<String>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or(LensError::EmptySet("embedding matrix has no rows"))?;
        let dim = first.as_ref().len();
        if dim == 0 {
            return Err(LensError::EmptySet("embedding rows have no coordinates"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(LensError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(dim, data, ids)
    }

    pub fn from_flat(dim: usize, data: Vec<f32>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(LensError::EmptySet("embedding rows have no coordinates"));
        }
        if data.is_empty() {
            return Err(LensError::EmptySet("embedding matrix has no rows"));
        }
        if data.len() % dim != 0 {
            return Err(LensError::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        let n = data.len() / dim;
        if ids.len() != n {
            return Err(LensError::InvalidArgument(format!(
                "{} row ids for {n} rows",
                ids.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(LensError::InvalidArgument(format!("duplicate row id {dup:?}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LensError::NonFinite {
                context: format!("row {} of embedding matrix", i / dim),
            });
        }
        Ok(EmbeddingMatrix { dim, data, ids })
    }

    pub fn view(&self) -> EmbeddingView<'_> {
        EmbeddingView::new(self.dim, &self.data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Which end of a component's activation range the record describes.
///
/// Layers with signed activations store a second, negative record per
/// component built from the most negative activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    #[default]
    Positive,
    Negative,
}

/// Identity of one model component (a neuron or channel, optionally signed).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub model_id: String,
    pub layer: String,
    pub index: usize,
    #[serde(default)]
    pub sign: Sign,
}

impl ComponentId {
    pub fn new(model_id: impl Into<String>, layer: impl Into<String>, index: usize) -> Self {
        ComponentId {
            model_id: model_id.into(),
            layer: layer.into(),
            index,
            sign: Sign::Positive,
        }
    }

    pub fn with_sign(mut self, sign: Sign) -> Self {
        self.sign = sign;
        self
    }

    /// `layer:index`, with a `:neg` suffix for negative records.
    pub fn key(&self) -> String {
        match self.sign {
            Sign::Positive => format!("{}:{}", self.layer, self.index),
            Sign::Negative => format!("{}:{}:neg", self.layer, self.index),
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// A `layer:index[:neg]` reference not yet bound to a model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ComponentKey {
    pub layer: String,
    pub index: usize,
    pub sign: Sign,
}

impl fmt::Display for ComponentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sign {
            Sign::Positive => write!(f, "{}:{}", self.layer, self.index),
            Sign::Negative => write!(f, "{}:{}:neg", self.layer, self.index),
        }
    }
}

impl FromStr for ComponentKey {
    type Err = LensError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LensError::InvalidArgument(format!("bad component reference {s:?}"));
        let (rest, sign) = match s.strip_suffix(":neg") {
            Some(rest) => (rest, Sign::Negative),
            None => (s, Sign::Positive),
        };
        let (layer, index) = rest.rsplit_once(':').ok_or_else(bad)?;
        if layer.is_empty() {
            return Err(bad());
        }
        let index = index.parse().map_err(|_| bad())?;
        Ok(ComponentKey {
            layer: layer.to_string(),
            index,
            sign,
        })
    }
}

pub fn dot(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .fold(0.0, |acc, (&a, &b)| acc + f64::from(a) * f64::from(b))
}

pub fn norm(x: &[f32]) -> f64 {
    x.iter()
        .fold(0.0, |acc, &a| acc + f64::from(a) * f64::from(a))
        .sqrt()
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(LensError::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub(crate) fn checked_norm(x: &[f32], what: &str) -> Result<f64> {
    let n = norm(x);
    if !n.is_finite() {
        return Err(LensError::NonFinite {
            context: what.to_string(),
        });
    }
    if n <= 0.0 {
        return Err(LensError::ZeroNormVector {
            context: what.to_string(),
        });
    }
    Ok(n)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(x: &[f32], y: &[f32]) -> Result<f64> {
    check_dims(x.len(), y.len())?;
    let nx = checked_norm(x, "left cosine operand")?;
    let ny = checked_norm(y, "right cosine operand")?;
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Arithmetic mean of the rows; this is a component's semantic embedding.
pub fn mean_embedding<'a>(examples: impl Into<EmbeddingView<'a>>) -> Result<Vector> {
    let examples = examples.into();
    if examples.is_empty() {
        return Err(LensError::EmptySet("mean of no examples"));
    }
    Vector::new(mean_f64(examples).into_iter().map(|v| v as f32).collect())
}

pub(crate) fn mean_f64(examples: EmbeddingView<'_>) -> Vec<f64> {
    let mut acc = vec![0.0f64; examples.dim()];
    for row in examples.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let n = examples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Null-subtracted similarity of `theta` to `probe`.
pub fn alignment(theta: &[f32], probe: &[f32], null: Option<&[f32]>) -> Result<f64> {
    let s = cosine_similarity(probe, theta)?;
    match null {
        Some(null) => Ok(s - cosine_similarity(null, theta)?),
        None => Ok(s),
    }
}

/// Precomputed normalised probe for repeated alignment scans.
///
/// `score` performs the same arithmetic as [`alignment`] but reuses the
/// probe and null norms across rows.
#[derive(Debug, Clone)]
pub struct AlignmentProbe<'a> {
    probe: &'a [f32],
    probe_norm: f64,
    null: Option<(&'a [f32], f64)>,
}

impl<'a> AlignmentProbe<'a> {
    pub fn new(probe: &'a [f32], null: Option<&'a [f32]>) -> Result<Self> {
        let probe_norm = checked_norm(probe, "probe")?;
        let null = match null {
            Some(n) => {
                check_dims(probe.len(), n.len())?;
                Some((n, checked_norm(n, "null embedding")?))
            }
            None => None,
        };
        Ok(AlignmentProbe {
            probe,
            probe_norm,
            null,
        })
    }

    pub fn dim(&self) -> usize {
        self.probe.len()
    }

    pub fn score(&self, theta: &[f32]) -> Result<f64> {
        check_dims(self.probe.len(), theta.len())?;
        let nt = checked_norm(theta, "component embedding")?;
        let s = (dot(self.probe, theta) / (self.probe_norm * nt)).clamp(-1.0, 1.0);
        match self.null {
            Some((null, nn)) => Ok(s - (dot(null, theta) / (nn * nt)).clamp(-1.0, 1.0)),
            None => Ok(s),
        }
    }
}

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine as _;
use lens_core::audit::AuditOptions;
use lens_core::metrics::{layer_metrics, DEFAULT_CLUSTERS};
use lens_core::query::{compare_layers, LayerFilter};
use lens_core::store::ThumbnailKey;
use lens_core::{
    audit, label_components, project_2d, search, ComponentKey, LensDb, LensError, Sign, Vector,
    DEFAULT_TAU,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::EmbedderClient;
use crate::error::ApiError;

/// Default seed for k-means based endpoints.
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_TOP_K: usize = 10;
const CACHE_CAPACITY: usize = 256;

type ApiResult = Result<Response, ApiError>;

struct Inner {
    db: LensDb,
    others: BTreeMap<String, LensDb>,
    embedder: Option<EmbedderClient>,
    /// Serialized audit and metrics responses, keyed by request digest.
    cache: RwLock<HashMap<String, Bytes>>,
}

/// Shared, immutable service state.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(db: LensDb, embedder: Option<EmbedderClient>) -> Self {
        Self::with_others(db, BTreeMap::new(), embedder)
    }

    /// `others` are further databases addressable by id from `/compare`.
    pub fn with_others(db: LensDb, others: BTreeMap<String, LensDb>, embedder: Option<EmbedderClient>) -> Self {
        AppState(Arc::new(Inner {
            db,
            others,
            embedder,
            cache: RwLock::new(HashMap::new()),
        }))
    }

    pub fn db(&self) -> &LensDb {
        &self.0.db
    }

    fn cached(&self, key: &str) -> Option<Bytes> {
        self.0.cache.read().expect("cache lock").get(key).cloned()
    }

    fn store(&self, key: String, body: Bytes) {
        let mut cache = self.0.cache.write().expect("cache lock");
        if cache.len() >= CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(key, body);
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/layers", get(layers))
        .route("/api/v1/probe_sets", get(probe_sets))
        .route("/api/v1/components/{layer}/{index}", get(component))
        .route("/api/v1/search", post(search_handler))
        .route("/api/v1/label", post(label))
        .route("/api/v1/audit", post(audit_handler))
        .route("/api/v1/metrics/{layer}", get(metrics))
        .route("/api/v1/projection/{layer}", get(projection))
        .route("/api/v1/compare", get(compare))
        .route("/examples/{layer}/{dir}/{file}", get(thumbnail))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

fn json<T: Serialize>(value: &T) -> Result<Bytes, ApiError> {
    serde_json::to_vec(value)
        .map(Bytes::from)
        .map_err(|e| ApiError::new(crate::error::ErrorCode::Internal, e.to_string()))
}

fn respond(body: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn path<T>(p: Result<Path<T>, PathRejection>) -> Result<T, ApiError> {
    p.map(|Path(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<F>(f: F) -> Result<Bytes, ApiError>
where
    F: FnOnce() -> Result<Bytes, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(crate::error::ErrorCode::Internal, e.to_string()))?
}

fn digest(kind: &str, canonical: &impl Serialize) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(canonical).expect("request serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct LayerInfo<'a> {
    name: &'a str,
    n_components: usize,
    m_examples: usize,
    signed: bool,
    has_example_embeddings: bool,
    has_activations: bool,
    has_relevance: bool,
    has_edges: bool,
}

async fn layers(State(s): State<AppState>) -> ApiResult {
    let m = s.db().manifest();
    #[derive(Serialize)]
    struct Body<'a> {
        model_id: &'a str,
        foundation_model_id: &'a str,
        dim: usize,
        targets: &'a [String],
        layers: Vec<LayerInfo<'a>>,
    }
    let body = Body {
        model_id: &m.model_id,
        foundation_model_id: &m.foundation_model_id,
        dim: m.dim,
        targets: &m.targets,
        layers: m
            .layers
            .iter()
            .map(|l| LayerInfo {
                name: &l.name,
                n_components: l.n_components,
                m_examples: l.m_examples,
                signed: l.signed,
                has_example_embeddings: l.has_example_embeddings,
                has_activations: l.has_activations,
                has_relevance: l.has_relevance,
                has_edges: l.has_edges,
            })
            .collect(),
    };
    Ok(respond(json(&body)?))
}

async fn probe_sets(State(s): State<AppState>) -> ApiResult {
    #[derive(Serialize)]
    struct ConceptInfo<'a> {
        label: &'a str,
        category: Option<&'a str>,
        validity: &'a str,
    }
    #[derive(Serialize)]
    struct SetInfo<'a> {
        name: &'a str,
        has_null: bool,
        concepts: Vec<ConceptInfo<'a>>,
    }
    let sets: Vec<SetInfo<'_>> = s
        .db()
        .probe_sets()
        .iter()
        .map(|p| SetInfo {
            name: &p.name,
            has_null: p.null_embedding.is_some(),
            concepts: p
                .concepts
                .iter()
                .map(|c| ConceptInfo {
                    label: &c.label,
                    category: c.category.as_deref(),
                    validity: c.validity.as_str(),
                })
                .collect(),
        })
        .collect();
    Ok(respond(json(&sets)?))
}

#[derive(Deserialize)]
struct SignQuery {
    #[serde(default)]
    sign: Sign,
}

async fn component(
    State(s): State<AppState>,
    p: Result<Path<(String, usize)>, PathRejection>,
    q: Result<Query<SignQuery>, QueryRejection>,
) -> ApiResult {
    let (layer, index) = path(p)?;
    let sign = query(q)?.sign;
    let key = ComponentKey {
        layer: layer.clone(),
        index,
        sign,
    };
    let db = s.db();
    let rec = db.component(&key)?;
    let m = db.layer(&layer)?.decl.m_examples;

    #[derive(Serialize)]
    struct Example {
        rank: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        sample_id: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        crop_box: Option<[u32; 4]>,
        #[serde(skip_serializing_if = "Option::is_none")]
        activation: Option<f64>,
        thumbnail_url: Option<String>,
    }
    #[derive(Serialize)]
    struct TargetRelevance<'a> {
        target: &'a str,
        value: f32,
    }
    #[derive(Serialize)]
    struct Body<'a> {
        component_id: String,
        id: &'a lens_core::ComponentId,
        theta: &'a [f32],
        relevance: Option<Vec<TargetRelevance<'a>>>,
        examples: Vec<Example>,
    }
    let has_examples = rec.examples.is_some() || rec.activations.is_some() || rec.example_meta.is_some();
    let examples = if has_examples {
        (0..m)
            .map(|rank| {
                let meta = rec.example_meta.map(|meta| &meta[rank]);
                let thumb = ThumbnailKey {
                    layer: layer.clone(),
                    index,
                    sign,
                    rank,
                };
                Example {
                    rank,
                    sample_id: meta.map(|m| m.sample_id.clone()),
                    crop_box: meta.map(|m| m.crop_box),
                    activation: meta
                        .map(|m| m.activation)
                        .or_else(|| rec.activations.map(|a| f64::from(a[rank]))),
                    thumbnail_url: db.thumbnails().contains(&thumb).then(|| {
                        format!("/{}", thumb.relative_path().to_string_lossy().replace('\\', "/"))
                    }),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let body = Body {
        component_id: rec.id.key(),
        id: &rec.id,
        theta: rec.theta,
        relevance: rec.relevance.map(|r| {
            db.targets()
                .iter()
                .zip(r)
                .map(|(target, &value)| TargetRelevance { target, value })
                .collect()
        }),
        examples,
    };
    Ok(respond(json(&body)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum VectorInput {
    Floats(Vec<f32>),
    /// Little-endian f32 bytes, standard base64.
    Base64(String),
}

impl VectorInput {
    fn decode(self, what: &str) -> Result<Vec<f32>, ApiError> {
        match self {
            VectorInput::Floats(v) => Ok(v),
            VectorInput::Base64(s) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(s.as_bytes())
                    .map_err(|e| ApiError::bad_request(format!("{what}: invalid base64: {e}")))?;
                if bytes.len() % 4 != 0 {
                    return Err(ApiError::bad_request(format!(
                        "{what}: {} bytes is not a whole number of f32 values",
                        bytes.len()
                    )));
                }
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect())
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchRequest {
    query_text: Option<String>,
    vector: Option<VectorInput>,
    null_text: Option<String>,
    null_vector: Option<VectorInput>,
    layers: Option<Vec<String>>,
    top_k: Option<usize>,
}

fn layer_filter(layers: Option<Vec<String>>) -> LayerFilter {
    match layers {
        None => LayerFilter::All,
        Some(names) => LayerFilter::Only(names),
    }
}

async fn search_handler(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let req: SearchRequest = parse(&body)?;
    let exactly_one = |a: bool, b: bool, what: &str| -> Result<(), ApiError> {
        if a && b {
            return Err(ApiError::bad_request(format!("give either {what}_text or {what} vector, not both")));
        }
        Ok(())
    };
    exactly_one(req.query_text.is_some(), req.vector.is_some(), "query")?;
    exactly_one(req.null_text.is_some(), req.null_vector.is_some(), "null")?;

    if req.query_text.as_deref().is_some_and(|t| t.trim().is_empty()) {
        return Err(ApiError::bad_request("query text is empty"));
    }
    // the null prompt is usually the empty template, so it may be empty
    let texts: Vec<String> = [&req.query_text, &req.null_text].into_iter().flatten().cloned().collect();
    let mut embedded = if texts.is_empty() {
        Vec::new()
    } else {
        let client = s.0.embedder.as_ref().ok_or_else(|| {
            ApiError::new(
                crate::error::ErrorCode::UpstreamUnavailable,
                "text queries need an embedding sidecar and none is configured",
            )
        })?;
        client.embed_texts(&texts).await?
    }
    .into_iter()
    .map(Vector::into_inner);

    let probe = match (req.query_text, req.vector) {
        (Some(_), _) => embedded.next().expect("one vector per text"),
        (None, Some(v)) => v.decode("vector")?,
        (None, None) => return Err(ApiError::bad_request("one of query_text or vector is required")),
    };
    let null = match (req.null_text, req.null_vector) {
        (Some(_), _) => Some(embedded.next().expect("one vector per text")),
        (None, Some(v)) => Some(v.decode("null_vector")?),
        (None, None) => None,
    };
    let filter = layer_filter(req.layers);
    let top_k = req.top_k.unwrap_or(DEFAULT_TOP_K);
    let state = s.clone();
    let body = blocking(move || {
        for v in std::iter::once(&probe).chain(null.as_ref()) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(LensError::NonFinite {
                    context: "query vector".into(),
                }
                .into());
            }
        }
        let hits = search(state.db(), &probe, null.as_deref(), &filter, top_k)?;
        #[derive(Serialize)]
        struct Body {
            hits: Vec<lens_core::query::SearchHit>,
        }
        json(&Body { hits })
    })
    .await?;
    Ok(respond(body))
}

fn probe_set<'a>(db: &'a LensDb, name: &str) -> Result<&'a lens_core::ProbeSet, ApiError> {
    db.probe_set(name)
        .ok_or_else(|| ApiError::not_found(format!("unknown probe set {name:?}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    probe_set: String,
    tau: Option<f64>,
    layers: Option<Vec<String>>,
}

async fn label(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let req: LabelRequest = parse(&body)?;
    let state = s.clone();
    let body = blocking(move || {
        let db = state.db();
        let probes = probe_set(db, &req.probe_set)?;
        let tau = req.tau.unwrap_or(DEFAULT_TAU);
        if !tau.is_finite() {
            return Err(ApiError::bad_request("tau must be finite"));
        }
        let assignments = label_components(db, probes, &layer_filter(req.layers), tau)?;
        #[derive(Serialize)]
        struct Body<'a> {
            probe_set: &'a str,
            tau: f64,
            assignments: Vec<lens_core::query::LabelAssignment>,
        }
        json(&Body {
            probe_set: &req.probe_set,
            tau,
            assignments,
        })
    })
    .await?;
    Ok(respond(body))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditRequest {
    probe_set: String,
    target: String,
    layer: String,
    threshold: Option<f64>,
    #[serde(default)]
    allow_missing_null: bool,
}

async fn audit_handler(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let req: AuditRequest = parse(&body)?;
    let key = digest("audit", &req);
    if let Some(hit) = s.cached(&key) {
        return Ok(respond(hit));
    }
    let state = s.clone();
    let body = blocking(move || {
        let db = state.db();
        let probes = probe_set(db, &req.probe_set)?;
        let options = AuditOptions {
            threshold: req.threshold,
            allow_missing_null: req.allow_missing_null,
        };
        json(&audit(db, probes, &req.target, &req.layer, options)?)
    })
    .await?;
    s.store(key, body.clone());
    Ok(respond(body))
}

#[derive(Serialize, Deserialize)]
struct MetricsQuery {
    h: Option<usize>,
    seed: Option<u64>,
}

async fn metrics(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    q: Result<Query<MetricsQuery>, QueryRejection>,
) -> ApiResult {
    let layer = path(p)?;
    let q = query(q)?;
    let (h, seed) = (q.h.unwrap_or(DEFAULT_CLUSTERS), q.seed.unwrap_or(DEFAULT_SEED));
    let key = digest("metrics", &(&layer, h, seed));
    if let Some(hit) = s.cached(&key) {
        return Ok(respond(hit));
    }
    let state = s.clone();
    let body = blocking(move || json(&layer_metrics(state.db(), &layer, h, seed)?)).await?;
    s.store(key, body.clone());
    Ok(respond(body))
}

async fn projection(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let layer = path(p)?;
    let state = s.clone();
    let body = blocking(move || {
        let l = state.db().layer(&layer)?;
        let proj = project_2d(l.means())?;
        #[derive(Serialize)]
        struct Point {
            component_id: String,
            x: f64,
            y: f64,
        }
        #[derive(Serialize)]
        struct Body<'a> {
            layer: &'a str,
            explained_variance: [f64; 2],
            total_variance: f64,
            points: Vec<Point>,
        }
        json(&Body {
            layer: &layer,
            explained_variance: proj.explained_variance,
            total_variance: proj.total_variance,
            points: proj
                .coords
                .iter()
                .enumerate()
                .map(|(row, c)| Point {
                    component_id: l.key_of(row).to_string(),
                    x: c[0],
                    y: c[1],
                })
                .collect(),
        })
    })
    .await?;
    Ok(respond(body))
}

#[derive(Deserialize)]
struct CompareQuery {
    other: String,
    layer: String,
    other_layer: Option<String>,
}

async fn compare(State(s): State<AppState>, q: Result<Query<CompareQuery>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let state = s.clone();
    let body = blocking(move || {
        let other = state
            .0
            .others
            .get(&q.other)
            .ok_or_else(|| ApiError::not_found(format!("unknown database id {:?}", q.other)))?;
        let other_layer = q.other_layer.as_deref().unwrap_or(&q.layer);
        json(&compare_layers(state.db(), &q.layer, other, other_layer)?)
    })
    .await?;
    Ok(respond(body))
}

async fn thumbnail(
    State(s): State<AppState>,
    p: Result<Path<(String, String, String)>, PathRejection>,
) -> ApiResult {
    let (layer, dir, file) = path(p)?;
    let not_found = || ApiError::not_found(format!("no thumbnail {layer}/{dir}/{file}"));
    let (index, sign) = match dir.strip_suffix("-neg") {
        Some(i) => (i, Sign::Negative),
        None => (dir.as_str(), Sign::Positive),
    };
    let index: usize = index.parse().map_err(|_| not_found())?;
    let rank: usize = file
        .strip_suffix(".png")
        .and_then(|r| r.parse().ok())
        .ok_or_else(not_found)?;
    let key = ThumbnailKey {
        layer: layer.clone(),
        index,
        sign,
        rank,
    };
    let bytes = s.db().thumbnails().get(&key)?.ok_or_else(not_found)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

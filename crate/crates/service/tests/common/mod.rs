#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use lens_core::fixtures::{generate, LayerSpec, Planted, SyntheticDbSpec};
use lens_core::LensDb;
use lens_service::AppState;
use serde_json::{json, Value};

#[derive(Default)]
pub struct Stub {
    /// Dimension of the vectors produced.
    pub dim: usize,
    /// Dimension announced in the response; defaults to `dim`.
    pub reported_dim: Option<usize>,
    /// Fixed answers for known texts.
    pub table: HashMap<String, Vec<f32>>,
    /// Perturb every answer so that repeated texts differ.
    pub nondeterministic: bool,
    pub calls: AtomicU32,
}

fn hashed(text: &str, dim: usize) -> Vec<f32> {
    // FNV-1a seeded per coordinate
    (0..dim)
        .map(|j| {
            let mut h: u64 = 0xcbf29ce484222325 ^ j as u64;
            for b in text.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
            (h % 2001) as f32 / 1000.0 - 1.0 + 1e-3
        })
        .collect()
}

async fn embed(State(stub): State<Arc<Stub>>, Json(body): Json<Value>) -> Json<Value> {
    let texts: Vec<String> = serde_json::from_value(body["texts"].clone()).unwrap();
    let call = stub.calls.fetch_add(1, Ordering::SeqCst);
    let vectors: Vec<Vec<f32>> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut v = stub.table.get(t).cloned().unwrap_or_else(|| hashed(t, stub.dim));
            if stub.nondeterministic {
                v[0] += (call as f32 + i as f32 + 1.0) * 0.01;
            }
            v
        })
        .collect();
    Json(json!({ "dim": stub.reported_dim.unwrap_or(stub.dim), "vectors": vectors }))
}

async fn embed_images(State(stub): State<Arc<Stub>>, body: Bytes) -> Json<Value> {
    let text = String::from_utf8_lossy(&body);
    let n = text.matches("name=\"images\"").count();
    let vectors: Vec<Vec<f32>> = (0..n).map(|i| hashed(&format!("image-{i}"), stub.dim)).collect();
    Json(json!({ "dim": stub.dim, "vectors": vectors }))
}

async fn spawn(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

pub async fn start_stub(stub: Stub) -> String {
    let app = Router::new()
        .route("/embed", post(embed))
        .route("/embed_images", post(embed_images))
        .with_state(Arc::new(stub));
    spawn(app).await
}

pub async fn start_service(state: AppState) -> String {
    spawn(lens_service::router(state)).await
}

/// Three layers: planted blobs (with thumbnails), audit buckets, duplicates.
pub fn fixture_db(seed: u64) -> LensDb {
    let mut spec = SyntheticDbSpec::new(
        seed,
        16,
        vec![
            LayerSpec::new("blobs", Planted::OrthogonalBlobs { concepts: 2, per_concept: 5 }, 3),
            LayerSpec::new("buckets", Planted::AuditBuckets { per_bucket: 3 }, 2),
            LayerSpec::new("dups", Planted::Duplicated { pairs: 3 }, 0),
        ],
    );
    spec.thumbnails = 2;
    spec.targets = vec!["ox".into(), "cart".into()];
    generate(&spec).unwrap().0
}

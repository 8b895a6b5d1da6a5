//! Client for the embedding sidecar.
//!
//! Wire contract: `POST /embed {"texts": [...]}` and `POST /embed_images`
//! (multipart, one `images` part per file) both answer
//! `{"dim": d, "vectors": [[...], ...]}` with one vector per input, in order.

use std::time::Duration;

use lens_core::Vector;
use reqwest::multipart::{Form, Part};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum EmbedderError {
    #[error("nothing to embed")]
    EmptyInput,
    #[error("embedding sidecar unavailable: {0}")]
    Unavailable(String),
    #[error("embedding sidecar returned dimension {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("malformed sidecar response: {0}")]
    Malformed(String),
    #[error("embedding sidecar returned different vectors for the same input {0:?}")]
    NonDeterministic(String),
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct EmbedderClient {
    endpoint: String,
    timeout: Duration,
    expected_dim: usize,
    http: reqwest::Client,
}

impl EmbedderClient {
    pub fn new(endpoint: impl Into<String>, expected_dim: usize) -> Self {
        Self::with_timeout(endpoint, expected_dim, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(endpoint: impl Into<String>, expected_dim: usize, timeout: Duration) -> Self {
        EmbedderClient {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout,
            expected_dim,
            http: reqwest::Client::new(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn expected_dim(&self) -> usize {
        self.expected_dim
    }

    /// One vector per text, in order. Duplicate texts must come back with
    /// identical vectors.
    pub async fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedderError> {
        if texts.is_empty() {
            return Err(EmbedderError::EmptyInput);
        }
        let req = self
            .http
            .post(format!("{}/embed", self.endpoint))
            .timeout(self.timeout)
            .json(&EmbedRequest { texts });
        let vectors = self.send(req, texts.len()).await?;
        for (i, t) in texts.iter().enumerate() {
            if let Some(j) = texts[..i].iter().position(|u| u == t) {
                if vectors[i] != vectors[j] {
                    return Err(EmbedderError::NonDeterministic(t.clone()));
                }
            }
        }
        Ok(vectors)
    }

    /// Embeds encoded images given as `(file name, bytes)`.
    pub async fn embed_images(&self, images: Vec<(String, Vec<u8>)>) -> Result<Vec<Vector>, EmbedderError> {
        if images.is_empty() {
            return Err(EmbedderError::EmptyInput);
        }
        let n = images.len();
        let form = images.into_iter().fold(Form::new(), |form, (name, bytes)| {
            form.part("images", Part::bytes(bytes).file_name(name))
        });
        let req = self
            .http
            .post(format!("{}/embed_images", self.endpoint))
            .timeout(self.timeout)
            .multipart(form);
        self.send(req, n).await
    }

    async fn send(&self, req: reqwest::RequestBuilder, n: usize) -> Result<Vec<Vector>, EmbedderError> {
        let unavailable = |e: reqwest::Error| EmbedderError::Unavailable(e.to_string());
        let resp = req.send().await.map_err(unavailable)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedderError::Unavailable(format!("sidecar answered {status}")));
        }
        let body: EmbedResponse = resp
            .json()
            .await
            .map_err(|e| EmbedderError::Malformed(e.to_string()))?;
        if body.dim != self.expected_dim {
            return Err(EmbedderError::DimMismatch {
                expected: self.expected_dim,
                found: body.dim,
            });
        }
        if body.vectors.len() != n {
            return Err(EmbedderError::Malformed(format!(
                "{} vectors for {n} inputs",
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.expected_dim {
                    return Err(EmbedderError::DimMismatch {
                        expected: self.expected_dim,
                        found: v.len(),
                    });
                }
                Vector::new(v).map_err(|e| EmbedderError::Malformed(e.to_string()))
            })
            .collect()
    }
}

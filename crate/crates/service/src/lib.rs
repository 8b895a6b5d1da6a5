//! Read-only HTTP JSON API over one LensDB, plus the client for the
//! text/image embedding sidecar.
//!
//! Routes live under `/api/v1`; thumbnails are served from `/examples`.
//! Every non-success response carries an [`ApiError`] body.

mod api;
pub mod embedder;
pub mod error;

use std::net::SocketAddr;

pub use api::{router, AppState, DEFAULT_SEED, DEFAULT_TOP_K};
pub use embedder::{EmbedderClient, EmbedderError};
pub use error::{ApiError, ErrorCode};

/// Serves `state` on an already bound listener until the task is dropped.
pub async fn serve_listener(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves; `on_bound` receives the actual local address.
pub async fn serve(
    state: AppState,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::info!(%local, "serving");
    on_bound(local);
    serve_listener(state, listener).await
}

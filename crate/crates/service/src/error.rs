use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use lens_core::LensError;
use serde::Serialize;

use crate::embedder::EmbedderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    UpstreamUnavailable,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::UpstreamUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every non-success response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }
}

impl From<LensError> for ApiError {
    fn from(e: LensError) -> Self {
        let code = match &e {
            LensError::UnknownComponent(_)
            | LensError::UnknownLayer(_)
            | LensError::UnknownTarget(_) => ErrorCode::NotFound,
            LensError::Io { .. }
            | LensError::MissingBlob { .. }
            | LensError::SizeMismatch { .. }
            | LensError::CorruptManifest(_)
            | LensError::InvalidDatabase(_) => ErrorCode::Internal,
            _ => ErrorCode::BadRequest,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<EmbedderError> for ApiError {
    fn from(e: EmbedderError) -> Self {
        let code = match e {
            EmbedderError::EmptyInput => ErrorCode::BadRequest,
            _ => ErrorCode::UpstreamUnavailable,
        };
        ApiError::new(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), axum::Json(self)).into_response()
    }
}

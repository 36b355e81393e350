//! JSON error responses.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use heliot_core::engine::EngineError;
use heliot_core::ingest::RowDiagnostic;
use heliot_core::knowledge::StoreError;
use heliot_core::patients::PatientError;
use serde_json::json;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub diagnostics: Vec<RowDiagnostic>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            diagnostics: Vec::new(),
        }
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.diagnostics.is_empty() {
            body["diagnostics"] = json!(self.diagnostics);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Precondition(_) | StoreError::Invalid(_) => ApiError::unprocessable(e.to_string()),
            StoreError::Table(_) => ApiError::internal(e.to_string()),
        }
    }
}

impl From<PatientError> for ApiError {
    fn from(e: PatientError) -> Self {
        match e {
            PatientError::Invalid { .. } | PatientError::NothingToAssess | PatientError::Csv(_) => {
                ApiError::unprocessable(e.to_string())
            }
            PatientError::Table(_) => ApiError::internal(e.to_string()),
        }
    }
}

/// Status for engine failures that happen before any output is produced.
/// Backend failures map to `None`; they are reported as a stream error.
pub fn engine_status(e: &EngineError) -> Option<StatusCode> {
    match e {
        EngineError::NotFound(_) => Some(StatusCode::NOT_FOUND),
        EngineError::InvalidRequest(_) | EngineError::Prompt(_) => Some(StatusCode::UNPROCESSABLE_ENTITY),
        EngineError::Patient(PatientError::Invalid { .. } | PatientError::NothingToAssess) => {
            Some(StatusCode::UNPROCESSABLE_ENTITY)
        }
        EngineError::Store(_) | EngineError::Patient(_) | EngineError::Task(_) => {
            Some(StatusCode::INTERNAL_SERVER_ERROR)
        }
        EngineError::Gateway(_) | EngineError::Parse { .. } => None,
    }
}

//! HTTP facade over the decision engine: streamed assessments, patient
//! notes, drug lookup and batch evaluation.

pub mod error;
pub mod jobs;
pub mod openapi;
pub mod routes;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use heliot_core::config::Config;
use heliot_core::engine::Engine;
use heliot_core::gateway::GatewayError;
use heliot_core::ingest::{ingest_synonyms_csv, IngestError};
use heliot_core::knowledge::{KnowledgeStore, StoreError, StoreOptions};
use heliot_core::patients::{PatientError, PatientStore};
use thiserror::Error;

use crate::error::ApiError;
use crate::jobs::{JobRegistry, DEFAULT_BATCH_WORKERS};

/// Uploads up to this size are accepted by the batch endpoint.
pub const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub engine: Engine,
    pub jobs: Arc<JobRegistry>,
    pub api_token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        AppState {
            engine,
            jobs: Arc::new(JobRegistry::new(DEFAULT_BATCH_WORKERS)),
            api_token: None,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.api_token = token.filter(|t| !t.is_empty()).map(Arc::from);
        self
    }

    fn patients(&self) -> Result<Arc<PatientStore>, ApiError> {
        self.engine
            .patients()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no patient store configured"))
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("drug store: {0}")]
    Store(#[from] StoreError),
    #[error("patient store: {0}")]
    Patients(#[from] PatientError),
    #[error("synonyms: {0}")]
    Synonyms(#[from] IngestError),
    #[error("backend: {0}")]
    Backend(#[from] GatewayError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Opens the stores and backend named by `config`.
pub fn build_state(config: &Config) -> Result<AppState, ServerError> {
    let drugs = Arc::new(KnowledgeStore::open(&config.drug_db_path, StoreOptions::default())?);
    let patients = Arc::new(PatientStore::open(&config.patient_db_path)?);
    let backend = config.build_backend()?;
    let mut engine = Engine::new(drugs, backend)
        .with_patients(patients)
        .with_model(config.llm_model.clone());
    if let Some(path) = &config.synonyms_path {
        engine = engine.with_synonyms(Arc::new(ingest_synonyms_csv(path)?));
    }
    Ok(AppState::new(engine).with_token(config.api_token.clone()))
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.api_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_ref()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(request).await
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/assessments", post(routes::create_assessment))
        .route("/api/patients/{id}/notes", post(routes::append_note))
        .route("/api/patients/{id}/history", get(routes::history))
        .route("/api/drugs", get(routes::list_drugs))
        .route("/api/drugs/{code}", get(routes::get_drug))
        .route("/api/batches", post(routes::create_batch))
        .route("/api/batches/{id}", get(routes::get_batch))
        .route("/api/batches/{id}/results.csv", get(routes::batch_results))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .merge(api)
        .route("/api/openapi.json", get(routes::openapi))
        .route("/healthz", get(routes::healthz))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), ServerError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

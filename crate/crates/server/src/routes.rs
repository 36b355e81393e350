//! Request handlers.

use std::convert::Infallible;

use axum::body::{Body, Bytes};
use axum::extract::{Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::{DateTime, Utc};
use futures::StreamExt;
use heliot_core::engine::{AssessmentEvent, AssessmentRequest};
use heliot_core::generator::read_dataset_csv;
use heliot_core::ingest::IngestError;
use heliot_core::knowledge::DrugRecord;
use heliot_core::patients::{ClinicalNote, NoteSource, PatientHistory};
use serde::Deserialize;
use serde_json::json;

use crate::error::{engine_status, ApiError};
use crate::jobs::BatchJob;
use crate::AppState;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssessmentBody {
    pub drug_code: String,
    #[serde(default)]
    pub patient_id: Option<String>,
    #[serde(default)]
    pub clinical_note: Option<String>,
    #[serde(default)]
    pub language_hint: Option<String>,
}

impl From<AssessmentBody> for AssessmentRequest {
    fn from(b: AssessmentBody) -> Self {
        AssessmentRequest {
            drug_code: b.drug_code,
            patient_id: b.patient_id.filter(|p| !p.trim().is_empty()),
            current_note: b.clinical_note.unwrap_or_default(),
            language_hint: b.language_hint.filter(|l| !l.trim().is_empty()),
        }
    }
}

fn to_sse(event: AssessmentEvent) -> Event {
    match event {
        AssessmentEvent::Chunk(text) => Event::default().event("chunk").data(text),
        AssessmentEvent::Final(a) => match Event::default().event("final").json_data(&a) {
            Ok(ev) => ev,
            Err(e) => Event::default()
                .event("error")
                .data(format!("serializing assessment: {e}")),
        },
        AssessmentEvent::Error(e) => {
            tracing::warn!(error = %e, "assessment failed mid-stream");
            Event::default().event("error").data(e.to_string())
        }
    }
}

/// A complete event-stream body holding one error event.
fn sse_error(status: StatusCode, message: &str) -> Response {
    let data: String = message.lines().map(|l| format!("data: {l}\n")).collect();
    Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from(format!("event: error\n{data}\n")))
        .unwrap_or_else(|_| status.into_response())
}

pub async fn create_assessment(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let body: AssessmentBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("invalid body: {e}")))?;
    let request = AssessmentRequest::from(body);
    request.validate().map_err(|e| ApiError::unprocessable(e.to_string()))?;
    if state.engine.drugs().get_drug(request.drug_code.trim())?.is_none() {
        return Err(ApiError::not_found(format!("drug {:?} not found", request.drug_code)));
    }
    match state.engine.assess(&request).await {
        Ok(events) => {
            let stream = events.map(|ev| Ok::<_, Infallible>(to_sse(ev)));
            Ok(Sse::new(stream).into_response())
        }
        Err(e) => match engine_status(&e) {
            Some(status) => Err(ApiError::new(status, e.to_string())),
            None => {
                tracing::warn!(error = %e, "backend failed before streaming");
                Ok(sse_error(StatusCode::BAD_GATEWAY, &e.to_string()))
            }
        },
    }
}

#[derive(Debug, Deserialize)]
pub struct NoteBody {
    pub text: String,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default)]
    pub source: Option<NoteSource>,
}

pub async fn append_note(
    State(state): State<AppState>,
    Path(patient_id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<ClinicalNote>), ApiError> {
    let body: NoteBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("invalid body: {e}")))?;
    let store = state.patients()?;
    let note = ClinicalNote {
        patient_id,
        timestamp: body.timestamp.unwrap_or_else(Utc::now),
        text: body.text,
        source: body.source.unwrap_or(NoteSource::Api),
    };
    let stored = note.clone();
    tokio::task::spawn_blocking(move || store.append_note(note))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(stored)))
}

pub async fn history(
    State(state): State<AppState>,
    Path(patient_id): Path<String>,
) -> Result<Json<PatientHistory>, ApiError> {
    let store = state.patients()?;
    let history = tokio::task::spawn_blocking(move || store.get_history(&patient_id))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(history))
}

pub async fn get_drug(State(state): State<AppState>, Path(code): Path<String>) -> Result<Json<DrugRecord>, ApiError> {
    match state.engine.drugs().get_drug(&code)? {
        Some(record) => Ok(Json(record.as_ref().clone())),
        None => Err(ApiError::not_found(format!("drug {code:?} not found"))),
    }
}

#[derive(Debug, Deserialize)]
pub struct DrugQuery {
    #[serde(default)]
    pub atc_prefix: Option<String>,
}

pub async fn list_drugs(
    State(state): State<AppState>,
    Query(q): Query<DrugQuery>,
) -> Result<Json<Vec<DrugRecord>>, ApiError> {
    let drugs = state.engine.drugs().clone();
    let records = tokio::task::spawn_blocking(move || match q.atc_prefix.filter(|p| !p.is_empty()) {
        Some(prefix) => drugs.query_by_atc_prefix(&prefix),
        None => drugs.all(),
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(records))
}

pub async fn create_batch(
    State(state): State<AppState>,
    mut multipart: Multipart,
) -> Result<(StatusCode, Json<BatchJob>), ApiError> {
    let mut csv = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::unprocessable(format!("multipart: {e}")))?
    {
        let is_file = field.file_name().is_some() || matches!(field.name(), Some("file" | "dataset"));
        if is_file {
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::unprocessable(format!("multipart: {e}")))?;
            csv = Some(bytes);
            break;
        }
    }
    let csv = csv.ok_or_else(|| ApiError::unprocessable("no CSV file part in the upload"))?;
    let cases = read_dataset_csv(csv.as_ref()).map_err(|e| match e {
        IngestError::Rows(diagnostics) => ApiError {
            diagnostics,
            ..ApiError::unprocessable("malformed dataset CSV")
        },
        other => ApiError::unprocessable(other.to_string()),
    })?;
    if cases.is_empty() {
        return Err(ApiError::unprocessable("dataset has no rows"));
    }
    let job = state.jobs.submit(state.engine.clone(), cases);
    Ok((StatusCode::ACCEPTED, Json(job)))
}

pub async fn get_batch(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<BatchJob>, ApiError> {
    state
        .jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("batch {id:?} not found")))
}

pub async fn batch_results(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    match state.jobs.results(&id) {
        None => Err(ApiError::not_found(format!("batch {id:?} not found"))),
        Some(Err(job_state)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("batch {id:?} has no results (state {job_state:?})"),
        )),
        Some(Ok(csv)) => Ok((
            [
                (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
                (
                    header::CONTENT_DISPOSITION,
                    format!("attachment; filename=\"batch-{id}-results.csv\""),
                ),
            ],
            csv.as_ref().clone(),
        )
            .into_response()),
    }
}

pub async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "backendKind": state.engine.backend().kind(),
        "drugCount": state.engine.drugs().len(),
    }))
}

pub async fn openapi() -> Json<serde_json::Value> {
    Json(crate::openapi::document())
}

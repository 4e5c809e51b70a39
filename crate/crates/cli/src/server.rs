//! HTTP routes over a shared [`Session`]. Inference runs on the blocking
//! pool so slow edits do not stall other requests.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::session::{EditRequest, ServiceError, ServiceResult, Session};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::UnknownSample(_)
            | ServiceError::UnknownAttribute(_)
            | ServiceError::UnknownEdit(_)
            | ServiceError::UnknownImage(_) => StatusCode::NOT_FOUND,
            ServiceError::EtaOutOfRange { .. } | ServiceError::InvalidSteps(_) => StatusCode::BAD_REQUEST,
            ServiceError::Core(sdgan_core::Error::PlacementFailure(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.kind().to_string(), message: self.to_string() })).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBody {
    pub count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolateBody {
    pub edit_id: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesResponse {
    pub frames: Vec<String>,
}

async fn blocking<T, F>(session: Arc<Session>, f: F) -> ServiceResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Session) -> ServiceResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&session))
        .await
        .map_err(|e| ServiceError::Core(sdgan_core::Error::TrainingFailed(format!("worker panicked: {e}"))))?
}

async fn samples(State(s): State<Arc<Session>>, Json(body): Json<SampleBody>) -> ServiceResult<impl IntoResponse> {
    Ok(Json(blocking(s, move |s| s.sample(body.count, body.seed)).await?))
}

async fn edit(State(s): State<Arc<Session>>, Json(body): Json<EditRequest>) -> ServiceResult<impl IntoResponse> {
    Ok(Json(blocking(s, move |s| s.edit(&body)).await?))
}

async fn interpolate(
    State(s): State<Arc<Session>>,
    Json(body): Json<InterpolateBody>,
) -> ServiceResult<impl IntoResponse> {
    let frames = blocking(s, move |s| s.interpolate(&body.edit_id, body.steps)).await?;
    Ok(Json(FramesResponse { frames }))
}

async fn attributes(State(s): State<Arc<Session>>) -> ServiceResult<impl IntoResponse> {
    Ok(Json(s.attributes()?))
}

async fn image(State(s): State<Arc<Session>>, Path(file): Path<String>) -> ServiceResult<Response> {
    let id = file.strip_suffix(".png").ok_or_else(|| ServiceError::UnknownImage(file.clone()))?;
    let png = s.image(id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn export(State(s): State<Arc<Session>>) -> ServiceResult<Response> {
    let bytes = blocking(s, |s| s.export_bytes()).await?;
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-tar")
        .header(header::CONTENT_DISPOSITION, "attachment; filename=\"session.tar\"")
        .body(Body::from(bytes))
        .expect("static headers are valid"))
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/api/samples", post(samples))
        .route("/api/edit", post(edit))
        .route("/api/interpolate", post(interpolate))
        .route("/api/attributes", get(attributes))
        .route("/api/session/export", get(export))
        .route("/image/{file}", get(image))
        .with_state(session)
}

pub async fn serve(session: Arc<Session>, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session)).await
}

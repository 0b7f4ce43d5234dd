//! HTTP front of the annotation service.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ghostbench::eval::votes::Vote;
use ghostbench::run::session::{AnnotationService, ServiceError};
use ghostbench::run::store::{is_valid_hash, ImageStore};
use serde::Deserialize;
use tower_http::services::ServeDir;

pub struct AppState {
    pub service: AnnotationService,
    /// Searched in order for `/images/{hash}.png`.
    pub stores: Vec<ImageStore>,
    pub operator_token: Option<String>,
}

struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Deserialize)]
struct StartBody {
    annotator: String,
}

#[derive(Deserialize)]
struct VoteBody {
    item_id: String,
    vote: String,
}

async fn start(State(app): State<Arc<AppState>>, Json(body): Json<StartBody>) -> ApiResult<impl serde::Serialize> {
    Ok(Json(app.service.start(&body.annotator)?))
}

async fn next(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl serde::Serialize> {
    Ok(Json(app.service.next(&id)?))
}

async fn vote(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<VoteBody>,
) -> ApiResult<impl serde::Serialize> {
    let v: Vote = body
        .vote
        .parse()
        .map_err(|e: ghostbench::Error| ServiceError::BadRequest(e.to_string()))?;
    Ok(Json(app.service.vote(&id, &body.item_id, v)?))
}

async fn aggregate(State(app): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<impl serde::Serialize> {
    if let Some(token) = &app.operator_token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|h| h.to_str().ok())
            .and_then(|h| h.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return Err(ServiceError::Forbidden("operator token required".into()).into());
        }
    }
    Ok(Json(app.service.aggregate()?))
}

async fn image(State(app): State<Arc<AppState>>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(ServiceError::NotFound(format!("image {file}")));
    let hash = file.strip_suffix(".png").ok_or_else(not_found)?;
    if !is_valid_hash(hash) || !app.service.knows_image(hash) {
        return Err(not_found());
    }
    for store in &app.stores {
        if store.contains(hash) {
            let bytes = store.get_png(hash).map_err(ServiceError::from)?;
            return Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response());
        }
    }
    Err(not_found())
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", post(start))
        .route("/api/session/{id}/next", get(next))
        .route("/api/session/{id}/vote", post(vote))
        .route("/api/aggregate", get(aggregate))
        .route("/images/{file}", get(image))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: &str, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

//! HTTP service for interactive segmentation sessions.
//!
//! | method | path                      | body / result                                         |
//! |--------|---------------------------|-------------------------------------------------------|
//! | POST   | `/sessions`               | `{image, gt?}` (base64 PNG) → `{session_id, W, H}`    |
//! | POST   | `/sessions/{id}/clicks`   | `{x, y, positive}` → `{mask, iou?, click_count}`      |
//! | POST   | `/sessions/{id}/undo`     | → mask response of the previous click (409 if none)   |
//! | POST   | `/sessions/{id}/reset`    | → session summary with no clicks                      |
//! | GET    | `/sessions/{id}`          | → session summary                                     |
//! | GET    | `/healthz`                | → `{status, checkpoint_hash}`; 503 until a model loads |

pub mod letterbox;
pub mod session;

use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use mst_core::clicks::Click;
use mst_core::raster::{Image, Mask};
use mst_core::MstModel;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use session::{Session, SessionStore};

const BODY_LIMIT: usize = 32 * 1024 * 1024;
const MAX_IMAGE_SIDE: usize = 4096;

pub struct LoadedModel {
    pub model: MstModel<f32>,
    pub hash: String,
}

pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    sessions: SessionStore,
}

impl AppState {
    pub fn new(max_sessions: usize, ttl: Duration) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(None),
            sessions: SessionStore::new(max_sessions, ttl),
        })
    }

    pub fn with_model(model: MstModel<f32>, hash: String, max_sessions: usize) -> Arc<Self> {
        let state = Self::new(max_sessions, session::DEFAULT_TTL);
        state.set_model(model, hash);
        state
    }

    pub fn set_model(&self, model: MstModel<f32>, hash: String) {
        *self.model.write().unwrap() = Some(Arc::new(LoadedModel { model, hash }));
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model
            .read()
            .unwrap()
            .clone()
            .ok_or(ApiError::Unavailable("no model loaded".into()))
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    Unavailable(String),
    Internal(String),
}

impl ApiError {
    fn internal(e: impl std::fmt::Display) -> Self {
        Self::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            Self::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            Self::NotFound(m) => (StatusCode::NOT_FOUND, m),
            Self::Conflict(m) => (StatusCode::CONFLICT, m),
            Self::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            Self::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, m),
            Self::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub image: String,
    #[serde(default)]
    pub gt: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "H")]
    pub height: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClickRequest {
    pub x: usize,
    pub y: usize,
    pub positive: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct MaskQuery {
    #[serde(default)]
    pub soft: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResponse {
    /// Base64 PNG, 8-bit, 0 or 255, at the original image size.
    pub mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub click_count: usize,
    /// Base64 PNG of the foreground probabilities, only when `?soft=1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub session_id: String,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "H")]
    pub height: usize,
    pub clicks: Vec<ClickRequest>,
    pub click_count: usize,
    pub history_depth: usize,
    pub has_gt: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/clicks", post(click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/reset", post(reset))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    let text = text.split_once("base64,").map_or(text, |(_, rest)| rest);
    B64.decode(text.trim())
        .map_err(|e| ApiError::BadRequest(format!("{field}: invalid base64: {e}")))
}

fn encode_png(bytes: mst_core::Result<Vec<u8>>) -> Result<String, ApiError> {
    bytes.map(|b| B64.encode(b)).map_err(ApiError::internal)
}

fn lookup(state: &AppState, id: &str) -> Result<session::SessionHandle, ApiError> {
    state
        .sessions
        .get(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))
}

fn mask_response(session: &Session, soft: bool) -> Result<MaskResponse, ApiError> {
    Ok(MaskResponse {
        mask: encode_png(session.binary_mask().encode_png())?,
        iou: session.iou(),
        click_count: session.log.len(),
        soft: if soft { Some(encode_png(session.mask.encode_png())?) } else { None },
    })
}

fn summarize(id: String, session: &Session) -> Summary {
    Summary {
        session_id: id,
        width: session.width(),
        height: session.height(),
        clicks: session
            .log
            .iter()
            .map(|c| ClickRequest { x: c.x, y: c.y, positive: c.positive })
            .collect(),
        click_count: session.log.len(),
        history_depth: session.history_depth(),
        has_gt: session.gt.is_some(),
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let loaded = state.model()?;
    Ok(Json(Health {
        status: "ok".into(),
        checkpoint_hash: loaded.hash.clone(),
    }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let loaded = state.model()?;
    let image = Image::decode_png(&decode_b64("image", &req.image)?)
        .map_err(|e| ApiError::BadRequest(format!("image: {e}")))?;
    if image.width == 0 || image.height == 0 || image.width.max(image.height) > MAX_IMAGE_SIDE {
        return Err(ApiError::BadRequest(format!(
            "image sides must lie in 1..={MAX_IMAGE_SIDE}"
        )));
    }
    let gt = match &req.gt {
        Some(text) => {
            let gt = Mask::decode_png(&decode_b64("gt", text)?)
                .map_err(|e| ApiError::BadRequest(format!("gt: {e}")))?;
            if gt.width != image.width || gt.height != image.height {
                return Err(ApiError::BadRequest(format!(
                    "gt is {}x{}, image is {}x{}",
                    gt.width, gt.height, image.width, image.height
                )));
            }
            Some(gt)
        }
        None => None,
    };
    let side = loaded.model.config().image_size;
    let session = Session::new(&image, gt, side);
    let (width, height) = (session.width(), session.height());
    let session_id = state.sessions.insert(session);
    tracing::info!(%session_id, width, height, "session created");
    Ok((
        StatusCode::CREATED,
        Json(Created { session_id, width, height }),
    ))
}

async fn click(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<MaskQuery>,
    Json(req): Json<ClickRequest>,
) -> Result<Json<MaskResponse>, ApiError> {
    let handle = lookup(&state, &id)?;
    let loaded = state.model()?;
    let mut session = handle.lock().await;
    if req.x >= session.width() || req.y >= session.height() {
        return Err(ApiError::Unprocessable(format!(
            "click ({}, {}) outside the {}x{} image",
            req.x,
            req.y,
            session.width(),
            session.height()
        )));
    }
    let click = Click { x: req.x, y: req.y, positive: req.positive };
    let soft = query.soft == Some(1);
    // Posting the latest click again is a no-op, so retries return the same mask.
    if session.repeats_last(&click) {
        return Ok(Json(mask_response(&session, soft)?));
    }
    let clicks = session.with_click(click).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let input = session.input.clone();
    let (clicks, prediction) = tokio::task::spawn_blocking(move || {
        let p = loaded.model.predict(&input, &clicks);
        (clicks, p)
    })
    .await
    .map_err(ApiError::internal)?;
    let prediction = prediction.map_err(ApiError::internal)?;
    session.commit(click, clicks, prediction).map_err(ApiError::internal)?;
    Ok(Json(mask_response(&session, soft)?))
}

async fn undo(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<MaskQuery>,
) -> Result<Json<MaskResponse>, ApiError> {
    let handle = lookup(&state, &id)?;
    let mut session = handle.lock().await;
    if !session.undo() {
        return Err(ApiError::Conflict("nothing to undo".into()));
    }
    Ok(Json(mask_response(&session, query.soft == Some(1))?))
}

async fn reset(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Summary>, ApiError> {
    let handle = lookup(&state, &id)?;
    let mut session = handle.lock().await;
    session.reset();
    Ok(Json(summarize(id, &session)))
}

async fn summary(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Summary>, ApiError> {
    let handle = lookup(&state, &id)?;
    let session = handle.lock().await;
    Ok(Json(summarize(id, &session)))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}

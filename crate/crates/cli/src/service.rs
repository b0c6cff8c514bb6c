//! HTTP/JSON API consumed by the operator console.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/frames?page=&page_size=` | | `{frames: [{id, url}], total, page, page_size}` |
//! | GET | `/frames/{id}` | | image bytes |
//! | POST | `/classes` | `{name}` | `{id, name}` |
//! | POST | `/classes/{id}/supports` | `{frame_id, box}` | `{chip_id, shots}` |
//! | DELETE | `/classes/{id}/supports/{chip_id}` | | `{shots}` |
//! | POST | `/detect` | `{frame_id, class_ids?}` | `[{box, class_id, class_name, score}]` |
//! | GET | `/status` | | `{checkpoint_id, param_hash, classes: [...]}` |
//!
//! Boxes are `{x1, y1, x2, y2}` in image pixels. Errors are
//! `{"error": message}` with status 400, 404 or 409.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use airdet::BBox;

use crate::session::{Refusal, Session};

pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

impl From<Refusal> for ApiError {
    fn from(r: Refusal) -> Self {
        match r {
            Refusal::NotFound(m) => ApiError::new(StatusCode::NOT_FOUND, m),
            Refusal::BadRequest(m) => ApiError::new(StatusCode::BAD_REQUEST, m),
            Refusal::Conflict(m) => ApiError::new(StatusCode::CONFLICT, m),
            Refusal::Internal(e) => {
                log::error!("request failed: {e}");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Request and response bodies.
pub mod body {
    use super::*;

    #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct BoxJson {
        pub x1: f64,
        pub y1: f64,
        pub x2: f64,
        pub y2: f64,
    }

    impl From<BBox> for BoxJson {
        fn from(b: BBox) -> Self {
            BoxJson {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            }
        }
    }

    impl From<BoxJson> for BBox {
        fn from(b: BoxJson) -> Self {
            BBox::new(b.x1, b.y1, b.x2, b.y2)
        }
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct FrameEntry {
        pub id: String,
        pub url: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct FramePage {
        pub frames: Vec<FrameEntry>,
        pub total: usize,
        pub page: usize,
        pub page_size: usize,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct NewClass {
        pub name: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ClassCreated {
        pub id: u64,
        pub name: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct NewSupport {
        pub frame_id: String,
        #[serde(rename = "box")]
        pub bbox: BoxJson,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SupportAdded {
        pub chip_id: u64,
        pub shots: usize,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SupportRemoved {
        pub shots: usize,
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct DetectRequest {
        pub frame_id: String,
        #[serde(default)]
        pub class_ids: Option<Vec<u64>>,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct DetectionJson {
        #[serde(rename = "box")]
        pub bbox: BoxJson,
        pub class_id: u64,
        pub class_name: String,
        pub score: f64,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ClassStatus {
        pub id: u64,
        pub name: String,
        pub k: usize,
        pub chip_ids: Vec<u64>,
        pub prototype_hash: Option<String>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct Status {
        pub checkpoint_id: String,
        pub param_hash: String,
        pub frames: usize,
        pub classes: Vec<ClassStatus>,
    }
}

use body::*;

#[derive(Deserialize)]
struct PageQuery {
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Clone)]
pub struct AppState {
    pub session: Arc<Session>,
    pub page_size: usize,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/frames", get(list_frames))
        .route("/frames/{id}", get(frame_image))
        .route("/classes", post(create_class))
        .route("/classes/{id}/supports", post(add_support))
        .route("/classes/{id}/supports/{chip_id}", delete(remove_support))
        .route("/detect", post(detect))
        .route("/status", get(status))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn list_frames(State(st): State<AppState>, Query(q): Query<PageQuery>) -> ApiResult<Json<FramePage>> {
    let page_size = q.page_size.unwrap_or(st.page_size).clamp(1, 1000);
    let page = q.page.unwrap_or(0);
    let frames = &st.session.frames;
    let entries = frames
        .ids()
        .skip(page.saturating_mul(page_size))
        .take(page_size)
        .map(|id| FrameEntry {
            id: id.clone(),
            url: format!("/frames/{id}"),
        })
        .collect();
    Ok(Json(FramePage {
        frames: entries,
        total: frames.len(),
        page,
        page_size,
    }))
}

async fn frame_image(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = st
        .session
        .frames
        .path(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown frame `{id}`")))?
        .to_path_buf();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        _ => "image/jpeg",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn create_class(
    State(st): State<AppState>,
    req: std::result::Result<Json<NewClass>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<ClassCreated>)> {
    let Json(req) = req?;
    let id = st.session.add_class(&req.name)?;
    Ok((
        StatusCode::CREATED,
        Json(ClassCreated {
            id,
            name: req.name.trim().to_string(),
        }),
    ))
}

async fn add_support(
    State(st): State<AppState>,
    Path(class_id): Path<u64>,
    req: std::result::Result<Json<NewSupport>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SupportAdded>)> {
    let Json(req) = req?;
    let (chip_id, shots) = blocking(move || Ok(st.session.add_support(class_id, &req.frame_id, req.bbox.into())?)).await?;
    Ok((StatusCode::CREATED, Json(SupportAdded { chip_id, shots })))
}

async fn remove_support(State(st): State<AppState>, Path((class_id, chip_id)): Path<(u64, u64)>) -> ApiResult<Json<SupportRemoved>> {
    let shots = blocking(move || Ok(st.session.remove_support(class_id, chip_id)?)).await?;
    Ok(Json(SupportRemoved { shots }))
}

async fn detect(
    State(st): State<AppState>,
    req: std::result::Result<Json<DetectRequest>, JsonRejection>,
) -> ApiResult<Json<Vec<DetectionJson>>> {
    let Json(req) = req?;
    let out = blocking(move || {
        let session = &st.session;
        let image = session
            .frames
            .load(&req.frame_id)
            .map_err(Refusal::from)?
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown frame `{}`", req.frame_id)))?;
        let (protos, names) = {
            let protos = session.prototypes(req.class_ids.as_deref())?;
            (protos, session.class_names())
        };
        let protos: Vec<_> = protos.iter().map(|p| (**p).clone()).collect();
        let dets = session.model.detect(&image, &protos).map_err(Refusal::from)?;
        Ok(dets
            .into_iter()
            .map(|d| DetectionJson {
                bbox: d.bbox.into(),
                class_id: d.class_id,
                class_name: names.get(&d.class_id).cloned().unwrap_or_default(),
                score: d.score,
            })
            .collect())
    })
    .await?;
    Ok(Json(out))
}

async fn status(State(st): State<AppState>) -> ApiResult<Json<Status>> {
    let session = Arc::clone(&st.session);
    let out = blocking(move || {
        let classes = session.with_registry(|reg| {
            reg.classes
                .values()
                .map(|c| ClassStatus {
                    id: c.id,
                    name: c.name.clone(),
                    k: c.shots(),
                    chip_ids: c.supports.iter().map(|s| s.chip_id).collect(),
                    prototype_hash: c.prototype.as_ref().map(|p| p.content_hash()),
                })
                .collect()
        });
        Ok(Status {
            checkpoint_id: session.model.checkpoint_id.clone(),
            param_hash: session.model.param_hash(),
            frames: session.frames.len(),
            classes,
        })
    })
    .await?;
    Ok(Json(out))
}

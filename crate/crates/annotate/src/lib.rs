//! HTTP service for the browser scribble annotation tool.
//!
//! Serves one dataset split (`<root>/<split>/images`, `.../scribbles`) and
//! a per-split timing log, plus the tool's static assets:
//!
//! | method | path                   | body                                   |
//! |--------|------------------------|----------------------------------------|
//! | GET    | `/api/images`          | `[{"id", "annotated"}]`                |
//! | GET    | `/api/images/{id}`     | image bytes                            |
//! | GET    | `/api/scribbles/{id}`  | ternary PNG, 404 when not annotated    |
//! | PUT    | `/api/scribbles/{id}`  | ternary PNG (validated, stored as-is)  |
//! | GET    | `/api/timing`          | `[{"id", "elapsed_ms"}]`               |
//! | PUT    | `/api/timing`          | replaces the whole log                 |
//!
//! Saves replace files atomically, so concurrent writers to the same id
//! resolve to the last completed write.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use scribble_cod::data::{decode_scribble, list_raster_ids, load_image, write_atomic};
use scribble_cod::Error as CoreError;

const MAX_BODY: usize = 64 * 1024 * 1024;
const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone)]
pub struct AnnotatorConfig {
    pub root: PathBuf,
    pub split: String,
    /// Directory with the annotation UI build; a placeholder page is
    /// served when absent.
    pub static_dir: Option<PathBuf>,
}

impl AnnotatorConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AnnotatorConfig {
            root: root.into(),
            split: "train".into(),
            static_dir: None,
        }
    }

    fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    pub fn images_dir(&self) -> PathBuf {
        self.split_dir().join("images")
    }

    pub fn scribbles_dir(&self) -> PathBuf {
        self.split_dir().join("scribbles")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.split_dir().join(TIMING_FILE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingEntry {
    pub id: String,
    pub elapsed_ms: u64,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Unprocessable(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => {
                log::error!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AnnotatorConfig>;

/// Ids are file stems: ASCII letters, digits, `-`, `_` and `.`, not
/// starting with a dot.
fn check_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ApiError::BadRequest(format!("invalid image id `{id}`")))
    }
}

fn find_image(config: &AnnotatorConfig, id: &str) -> ApiResult<PathBuf> {
    check_id(id)?;
    let dir = config.images_dir();
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| ApiError::NotFound(format!("no image `{id}`")))
}

fn scribble_path(config: &AnnotatorConfig, id: &str) -> PathBuf {
    config.scribbles_dir().join(format!("{id}.png"))
}

fn read_file(path: &Path) -> ApiResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| ApiError::Internal(format!("reading {}: {e}", path.display())))
}

async fn list_images(State(config): State<Shared>) -> ApiResult<Json<Vec<ImageEntry>>> {
    let ids = match list_raster_ids(&config.images_dir()) {
        Ok(ids) => ids,
        Err(CoreError::MissingFile(_)) => Vec::new(),
        Err(e) => return Err(ApiError::Internal(e.to_string())),
    };
    let entries = ids
        .into_iter()
        .map(|id| ImageEntry {
            annotated: scribble_path(&config, &id).is_file(),
            id,
        })
        .collect();
    Ok(Json(entries))
}

async fn get_image(State(config): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let path = find_image(&config, &id)?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        _ => "image/jpeg",
    };
    Ok(([(header::CONTENT_TYPE, mime)], read_file(&path)?).into_response())
}

async fn get_scribble(State(config): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    check_id(&id)?;
    let path = scribble_path(&config, &id);
    if !path.is_file() {
        return Err(ApiError::NotFound(format!("no scribble for `{id}`")));
    }
    Ok(([(header::CONTENT_TYPE, "image/png")], read_file(&path)?).into_response())
}

async fn put_scribble(State(config): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<StatusCode> {
    let image_path = find_image(&config, &id)?;
    let map = decode_scribble(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let image = load_image(&image_path).map_err(|e| ApiError::Internal(e.to_string()))?;
    if map.dims() != image.dims() {
        return Err(ApiError::Unprocessable(format!(
            "scribble is {:?} but image `{id}` is {:?}",
            map.dims(),
            image.dims()
        )));
    }
    let path = scribble_path(&config, &id);
    tokio::task::spawn_blocking(move || write_atomic(&path, &body))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_timing(State(config): State<Shared>) -> ApiResult<Json<Vec<TimingEntry>>> {
    let path = config.timing_path();
    if !path.is_file() {
        return Ok(Json(Vec::new()));
    }
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes)
        .map(Json)
        .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))
}

async fn put_timing(State(config): State<Shared>, Json(entries): Json<Vec<TimingEntry>>) -> ApiResult<StatusCode> {
    for e in &entries {
        check_id(&e.id)?;
    }
    let bytes = serde_json::to_vec_pretty(&entries).map_err(|e| ApiError::Internal(e.to_string()))?;
    let path = config.timing_path();
    tokio::task::spawn_blocking(move || write_atomic(&path, &bytes))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(StatusCode::NO_CONTENT)
}

const PLACEHOLDER: &str = "<!doctype html><html><head><title>scribble annotator</title></head>\
<body><p>Annotation UI assets are not installed. The API is available under <code>/api</code>.</p></body></html>";

pub fn router(config: AnnotatorConfig) -> Router {
    let static_dir = config.static_dir.clone();
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}", get(get_image))
        .route("/api/scribbles/{id}", get(get_scribble).put(put_scribble))
        .route("/api/timing", get(get_timing).put(put_timing))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(Arc::new(config));
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

/// Binds `addr`; fails when the port is taken.
pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Serves until Ctrl-C.
pub async fn serve(listener: TcpListener, config: AnnotatorConfig) -> std::io::Result<()> {
    log::info!(
        "annotating {} on http://{}",
        config.split_dir().display(),
        listener.local_addr()?
    );
    axum::serve(listener, router(config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

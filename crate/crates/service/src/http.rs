//! JSON-over-HTTP front end for [`ReviewService`].

use std::collections::HashMap;
use std::future::Future;
use std::io::ErrorKind;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::state::{PageQuery, ReviewService, ServiceError};

type Shared = Arc<ReviewService>;

const FALLBACK_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Organoid review</title></head>\n<body><h1>Organoid review</h1><p>The review UI bundle is not installed. The JSON API is available under <code>/api/</code>.</p></body></html>\n";

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::UnknownInstance(_) => StatusCode::NOT_FOUND,
            ServiceError::BadPageParams(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run `f` on the blocking pool; the service does file IO and raster work.
async fn blocking<T, F>(svc: &Shared, f: F) -> ApiResult<T>
where
    F: FnOnce(&ReviewService) -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn parse_index(params: &HashMap<String, String>, key: &str) -> Result<Option<usize>, ServiceError> {
    match params.get(key).map(|s| s.trim()) {
        None | Some("") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| {
            ServiceError::BadPageParams(format!("{key} must be a non-negative integer, got `{v}`"))
        }),
    }
}

async fn list_instances(
    State(svc): State<Shared>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let query = PageQuery {
        group: params.get("group").cloned(),
        page: parse_index(&params, "page")?,
        page_size: parse_index(&params, "page_size")?,
    };
    let page = blocking(&svc, move |s| s.list_instances(&query)).await?;
    Ok(Json(page).into_response())
}

async fn get_crop(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let crop = blocking(&svc, move |s| s.get_crop(&id)).await?;
    Ok((
        [(header::CONTENT_TYPE, "image/x-portable-pixmap")],
        crop.ppm.to_bytes(),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct ExclusionBody {
    excluded: bool,
    #[serde(default)]
    reason: String,
}

async fn set_exclusion(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ExclusionBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    let entry = blocking(&svc, move |s| {
        s.set_exclusion(&id, body.excluded, &body.reason)
    })
    .await?;
    Ok(Json(entry).into_response())
}

async fn get_stats(State(svc): State<Shared>) -> ApiResult<Response> {
    let doc = blocking(&svc, |s| Ok(s.get_stats())).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], doc.to_json()).into_response())
}

async fn export(State(svc): State<Shared>) -> ApiResult<Response> {
    let paths = blocking(&svc, |s| s.export()).await?;
    Ok(Json(paths).into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

/// Resolve a URL path inside `root`, refusing anything that escapes it.
fn resolve_static(root: &Path, url_path: &str) -> Option<PathBuf> {
    let rel = Path::new(url_path.trim_start_matches('/'));
    let mut out = root.to_path_buf();
    for c in rel.components() {
        match c {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    Some(out)
}

async fn static_files(State(svc): State<Shared>, uri: Uri) -> Response {
    let path = uri.path();
    let is_index = path == "/" || path == "/index.html";
    if let Some(root) = svc.ui_dir() {
        let target = if is_index {
            Some(root.join("index.html"))
        } else {
            resolve_static(root, path)
        };
        if let Some(file) = target.filter(|f| f.is_file()) {
            if let Ok(bytes) = tokio::fs::read(&file).await {
                return ([(header::CONTENT_TYPE, content_type(&file))], bytes).into_response();
            }
        }
    }
    if is_index {
        return (
            [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
            FALLBACK_INDEX,
        )
            .into_response();
    }
    ApiError(StatusCode::NOT_FOUND, format!("no such resource `{path}`")).into_response()
}

pub fn router(svc: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/api/instances", get(list_instances))
        .route("/api/instances/{id}/crop", get(get_crop))
        .route("/api/instances/{id}/exclusion", post(set_exclusion))
        .route("/api/stats", get(get_stats))
        .route("/api/export", post(export))
        .fallback(static_files)
        .with_state(svc)
}

/// Bind to `127.0.0.1:port` (0 picks a free port).
pub async fn bind(port: u16) -> Result<TcpListener, ServiceError> {
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        ErrorKind::AddrInUse => ServiceError::PortInUse(port),
        _ => ServiceError::Io(e),
    })
}

/// Serve until `shutdown` resolves, then flush the exclusion list.
pub async fn serve(
    svc: Arc<ReviewService>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(svc.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    let svc2 = svc.clone();
    tokio::task::spawn_blocking(move || svc2.flush())
        .await
        .map_err(|e| ServiceError::PersistFailure(e.to_string()))??;
    Ok(())
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn interrupt() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = ctrl_c => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => ctrl_c.await,
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
}

//! HTTP API for jobs.
//!
//! ```text
//! POST /api/jobs                        multipart: mesh, query, config? -> 202 {id}
//! GET  /api/jobs/{id}                   state, views and candidates
//! GET  /api/jobs/{id}/views/{i}.png
//! GET  /api/jobs/{id}/masks/{i}/{j}.png
//! POST /api/jobs/{id}/selection         {"selections": {"<view>": [j, ..]}} -> 202
//! GET  /api/jobs/{id}/result            result.json plus the mesh for display
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::jobs::{JobManager, JobState, SelectionError, SubmitError};
use meshreason::pipeline::Selections;

pub fn router(jobs: Arc<JobManager>, upload_limit: usize) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(json!({"ok": true})) }))
        .route("/api/jobs", post(create_job))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/views/{file}", get(view_png))
        .route("/api/jobs/{id}/masks/{view}/{file}", get(mask_png))
        .route("/api/jobs/{id}/selection", post(post_selection))
        .route("/api/jobs/{id}/result", get(job_result))
        .layer(DefaultBodyLimit::max(upload_limit))
        .with_state(jobs)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what.into())
}

type ApiResult<T> = Result<T, ApiError>;

async fn create_job(State(jobs): State<Arc<JobManager>>, mut form: Multipart) -> ApiResult<Response> {
    let (mut mesh, mut query, mut config) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| bad(format!("multipart: {e}")))? {
        let name = field.name().unwrap_or("").to_string();
        match name.as_str() {
            "mesh" => {
                let file = field.file_name().unwrap_or("mesh.obj").to_string();
                let data = field.bytes().await.map_err(|e| bad(format!("mesh upload: {e}")))?;
                mesh = Some((file, data));
            }
            "query" => query = Some(field.text().await.map_err(|e| bad(format!("query: {e}")))?),
            "config" => {
                let text = field.text().await.map_err(|e| bad(format!("config: {e}")))?;
                if !text.trim().is_empty() {
                    let v: Value = serde_json::from_str(&text).map_err(|e| bad(format!("config: {e}")))?;
                    config = Some(v);
                }
            }
            other => return Err(bad(format!("unexpected form field {other:?}"))),
        }
    }
    let (file, data) = mesh.ok_or_else(|| bad("missing mesh file"))?;
    let query = query.ok_or_else(|| bad("missing query"))?;
    let id = tokio::task::spawn_blocking(move || jobs.submit(&file, &data, &query, config.as_ref()))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            SubmitError::BadRequest(m) => bad(m),
            SubmitError::Internal(e) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")),
        })?;
    log::info!("job {id} queued");
    Ok((StatusCode::ACCEPTED, Json(json!({"id": id}))).into_response())
}

async fn job_status(State(jobs): State<Arc<JobManager>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = jobs.get(&id).ok_or_else(|| not_found(format!("no job {id}")))?;
    let meta = job.snapshot();
    let views: Vec<Value> = meta
        .views
        .iter()
        .map(|v| {
            let cands: Vec<Value> = v
                .candidates
                .iter()
                .map(|c| {
                    json!({
                        "index": c.index,
                        "confidence": c.confidence,
                        "text": c.text,
                        "maskUrl": format!("/api/jobs/{id}/masks/{}/{}.png", v.index, c.index),
                    })
                })
                .collect();
            let mut o = json!({
                "index": v.index,
                "imageUrl": format!("/api/jobs/{id}/views/{}.png", v.index),
                "candidates": cands,
            });
            if let Some(e) = &v.error {
                o["error"] = json!(e);
            }
            o
        })
        .collect();
    let mut body = json!({
        "id": meta.id,
        "state": meta.state,
        "query": meta.query,
        "views": views,
        "selections": meta.selections,
    });
    if let Some(e) = meta.error {
        body["error"] = json!(e);
    }
    Ok(Json(body))
}

fn png_index(file: &str) -> ApiResult<usize> {
    file.strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| not_found(format!("no file {file}")))
}

async fn send_png(path: std::path::PathBuf) -> ApiResult<Response> {
    let data = tokio::task::spawn_blocking(move || std::fs::read(path))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|_| not_found("image not available"))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Bytes::from(data)).into_response())
}

async fn view_png(State(jobs): State<Arc<JobManager>>, Path((id, file)): Path<(String, String)>) -> ApiResult<Response> {
    let job = jobs.get(&id).ok_or_else(|| not_found(format!("no job {id}")))?;
    let i = png_index(&file)?;
    send_png(job.dir().join("views").join(format!("{i}.png"))).await
}

async fn mask_png(
    State(jobs): State<Arc<JobManager>>,
    Path((id, view, file)): Path<(String, usize, String)>,
) -> ApiResult<Response> {
    let job = jobs.get(&id).ok_or_else(|| not_found(format!("no job {id}")))?;
    let j = png_index(&file)?;
    send_png(job.dir().join("candidates").join(format!("{view}_{j}.png"))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionBody {
    selections: BTreeMap<String, Vec<usize>>,
}

async fn post_selection(
    State(jobs): State<Arc<JobManager>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let job = jobs.get(&id).ok_or_else(|| not_found(format!("no job {id}")))?;
    let body: SelectionBody = serde_json::from_slice(&body).map_err(|e| bad(format!("selection body: {e}")))?;
    let mut selections = Selections::new();
    for (k, v) in body.selections {
        let view: usize = k.parse().map_err(|_| bad(format!("view key {k:?} is not an index")))?;
        selections.insert(view, v);
    }
    jobs.select(&job, selections).map_err(|e| match e {
        SelectionError::NotReady(m) => ApiError(StatusCode::CONFLICT, m),
        SelectionError::Invalid(m) => bad(m),
    })?;
    Ok((StatusCode::ACCEPTED, Json(json!({"id": id, "state": JobState::Fusing}))).into_response())
}

async fn job_result(State(jobs): State<Arc<JobManager>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = jobs.get(&id).ok_or_else(|| not_found(format!("no job {id}")))?;
    let meta = job.snapshot();
    if meta.state != JobState::Done {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("job is {}", serde_json::to_value(meta.state).unwrap_or_default()),
        ));
    }
    let body = tokio::task::spawn_blocking(move || -> anyhow::Result<Value> {
        let text = std::fs::read_to_string(job.dir().join("result.json"))?;
        let mut result: Value = serde_json::from_str(&text)?;
        let mesh = job.viewer_mesh()?;
        let vertices: Vec<[f64; 3]> = mesh.vertices().iter().map(|v| [v.x, v.y, v.z]).collect();
        result["mesh"] = json!({
            "vertices": vertices,
            "faces": mesh.faces(),
            "labels": result["labels"].clone(),
        });
        Ok(result)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")))?;
    Ok(Json(body))
}

//! Job service over the detector library.
//!
//! Routes:
//!
//! * `GET /v1/health`
//! * `GET /v1/config?preset=toy|paper`: the preset as JSON and as `key=value` text
//! * `POST /v1/jobs`: submit a [`JobRequest`], answered with `202` and the job id
//! * `GET /v1/jobs/{id}`: state, progress log and output of a job
//!
//! Jobs run on the blocking thread pool; the HTTP side only moves JSON.

pub mod ops;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;

use stnet_api::{ConfigDump, ConfigSpec, ErrorBody, JobCreated, JobRequest, JobState, JobStatus, Preset};

#[derive(Default)]
pub struct AppState {
    jobs: Mutex<HashMap<u64, JobStatus>>,
    next_id: AtomicU64,
}

impl AppState {
    fn update(&self, id: u64, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.jobs.lock().expect("job table poisoned").get_mut(&id) {
            f(job);
        }
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Deserialize)]
struct ConfigQuery {
    #[serde(default)]
    preset: Preset,
}

async fn default_config(Query(q): Query<ConfigQuery>) -> Response {
    let spec = ConfigSpec {
        preset: q.preset,
        ..ConfigSpec::default()
    };
    match spec.resolve() {
        Ok(config) => Json(ConfigDump {
            text: config.dump(),
            config,
        })
        .into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn submit(State(state): State<Arc<AppState>>, Json(req): Json<JobRequest>) -> Response {
    let id = state.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    state.jobs.lock().expect("job table poisoned").insert(
        id,
        JobStatus {
            id,
            op: req.name().to_string(),
            state: JobState::Queued,
            log: Vec::new(),
            output: None,
            error: None,
        },
    );
    tracing::info!(id, op = req.name(), "job queued");
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        worker.update(id, |j| j.state = JobState::Running);
        let result = ops::run(&req, &mut |line| worker.update(id, |j| j.log.push(line)));
        match &result {
            Ok(_) => tracing::info!(id, "job succeeded"),
            Err(e) => tracing::warn!(id, error = %e, "job failed"),
        }
        worker.update(id, |j| match result {
            Ok(out) => {
                j.output = Some(out);
                j.state = JobState::Succeeded;
            }
            Err(e) => {
                j.error = Some(e.to_string());
                j.state = JobState::Failed;
            }
        });
    });
    (StatusCode::ACCEPTED, Json(JobCreated { id })).into_response()
}

async fn job(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Response {
    let jobs = state.jobs.lock().expect("job table poisoned");
    match jobs.get(&id) {
        Some(j) => Json(j.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no job {id}")),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/config", get(default_config))
        .route("/v1/jobs", post(submit))
        .route("/v1/jobs/{id}", get(job))
        .with_state(state)
}

/// Serves on an already bound listener until the future is dropped.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(AppState::default()))).await
}

/// Binds `addr` (port 0 picks a free port) and serves in a background task.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(local)
}

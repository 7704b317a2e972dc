//! JSON-over-HTTP front end for a [`Session`].

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use styleprobe_core::generator::ChannelId;
use styleprobe_core::manipulation::EditSpec;
use styleprobe_core::pipeline::{DetectParams, ObjectiveSpec};
use styleprobe_core::Error as CoreError;

use crate::error::ServiceError;
use crate::ops::{Op, Selection};
use crate::session::Session;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Core(CoreError::FingerprintMismatch { .. }) => StatusCode::CONFLICT,
            ServiceError::Core(e) if e.is_numeric() => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Core(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ServiceError>;

/// Unwraps a JSON body, mapping every extractor rejection to 400.
fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    payload.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

async fn run(session: Arc<Session>, op: Op, request_id: Option<String>) -> ApiResult {
    tokio::task::spawn_blocking(move || session.execute(op, request_id))
        .await
        .map_err(|e| ServiceError::Io(format!("worker failed: {e}")))?
        .map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRequest {
    request_id: Option<String>,
    seed: u64,
    #[serde(default)]
    index: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectRequest {
    request_id: Option<String>,
    objective: ObjectiveSpec,
    k: usize,
    n_samples: Option<usize>,
    #[serde(default)]
    seed: u64,
}

/// Either an explicit edit or one derived from a stored detection.
#[derive(Deserialize)]
#[serde(untagged)]
enum EditBody {
    Explicit {
        edit_spec: EditSpec,
    },
    FromDetection {
        detection_id: String,
        selection: Selection,
        alpha: f64,
    },
}

#[derive(Deserialize)]
struct EditRequest {
    request_id: Option<String>,
    sample_id: String,
    #[serde(flatten)]
    edit: EditBody,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TruncateRequest {
    request_id: Option<String>,
    sample_id: String,
    ks: Option<Vec<usize>>,
    #[serde(default = "default_avg_samples")]
    avg_samples: usize,
    #[serde(default)]
    avg_seed: u64,
}

fn default_avg_samples() -> usize {
    1000
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurateRequest {
    request_id: Option<String>,
    channel: ChannelId,
    tag: String,
    #[serde(default)]
    note: String,
    timestamp: Option<u64>,
}

async fn session_info(State(s): State<Arc<Session>>) -> Json<Value> {
    let snap = s.snapshot();
    let wb = s.engine().workbench();
    Json(json!({
        "id": snap.id,
        "fingerprint": snap.fingerprint,
        "seq": snap.seq,
        "spec": wb.generator.spec().name,
        "resolution": wb.generator.resolution(),
        "probes": wb.probes.iter().map(|p| p.spec().name.clone()).collect::<Vec<_>>(),
        "regions": wb.layout.regions.iter().map(|r| r.name.clone()).collect::<Vec<_>>(),
        "bounds": s.engine().bounds(),
        "artifacts": snap.artifacts,
    }))
}

async fn layers(State(s): State<Arc<Session>>) -> Json<Value> {
    let wb = s.engine().workbench();
    Json(json!({ "spec": wb.generator.spec(), "exclusions": wb.exclusions }))
}

async fn sample(State(s): State<Arc<Session>>, payload: Result<Json<SampleRequest>, JsonRejection>) -> ApiResult {
    let r = body(payload)?;
    run(s, Op::Sample { seed: r.seed, index: r.index }, r.request_id).await
}

async fn detect(State(s): State<Arc<Session>>, payload: Result<Json<DetectRequest>, JsonRejection>) -> ApiResult {
    let r = body(payload)?;
    let samples = r.n_samples.unwrap_or(s.engine().workbench().config.detection.n_target);
    let params = DetectParams {
        objective: r.objective,
        samples,
        k: r.k,
        seed: r.seed,
    };
    run(s, Op::Detect(params), r.request_id).await
}

async fn edit(State(s): State<Arc<Session>>, payload: Result<Json<EditRequest>, JsonRejection>) -> ApiResult {
    let r = body(payload)?;
    let op = match r.edit {
        EditBody::Explicit { edit_spec } => Op::Edit {
            sample: r.sample_id,
            edit: edit_spec,
        },
        EditBody::FromDetection {
            detection_id,
            selection,
            alpha,
        } => Op::DetectionEdit {
            sample: r.sample_id,
            detection: detection_id,
            selection,
            alpha,
        },
    };
    run(s, op, r.request_id).await
}

async fn truncate(State(s): State<Arc<Session>>, payload: Result<Json<TruncateRequest>, JsonRejection>) -> ApiResult {
    let r = body(payload)?;
    let ks = r.ks.unwrap_or_else(|| (0..=s.engine().workbench().generator.spec().len()).collect());
    let op = Op::Truncate {
        sample: r.sample_id,
        ks,
        avg_samples: r.avg_samples,
        avg_seed: r.avg_seed,
    };
    run(s, op, r.request_id).await
}

async fn curate(State(s): State<Arc<Session>>, payload: Result<Json<CurateRequest>, JsonRejection>) -> ApiResult {
    let r = body(payload)?;
    let timestamp = r.timestamp.unwrap_or_else(|| {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    });
    let op = Op::Curate {
        channel: r.channel,
        tag: r.tag,
        note: r.note,
        timestamp,
    };
    run(s, op, r.request_id).await
}

async fn curations(State(s): State<Arc<Session>>) -> Json<Value> {
    Json(json!({ "curations": s.snapshot().curations }))
}

async fn image(State(s): State<Arc<Session>>, Path(name): Path<String>) -> Result<Response, ServiceError> {
    if !name.ends_with(".png") {
        return Err(ServiceError::NotFound(name));
    }
    let bytes = s.read_file(&name)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/api/session", get(session_info))
        .route("/api/layers", get(layers))
        .route("/api/sample", post(sample))
        .route("/api/detect", post(detect))
        .route("/api/edit", post(edit))
        .route("/api/truncate", post(truncate))
        .route("/api/image/{name}", get(image))
        .route("/api/curate", post(curate))
        .route("/api/curations", get(curations))
        .with_state(session)
}

/// Serves `session` on `host:port` until the process is stopped.
pub async fn serve(session: Arc<Session>, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(session)).await
}

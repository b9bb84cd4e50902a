//! HTTP/JSON review service over completed audit runs.
//!
//! Curators page through flagged images, view them (blurred on request),
//! inspect nearest-neighbor evidence, and record verdicts. Verdicts can seed
//! a background re-tune whose result is stored as a new prompt-set version
//! and only goes live on explicit activation. Everything is under `/api/v1`.

mod error;
pub mod jobs;
pub mod registry;
pub mod run;
pub mod verdicts;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use offscan_core::audit::{AuditSummary, Evidence};
use offscan_core::prompt::{Provenance, TuneConfig};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use error::{ServiceError, ServiceResult};
pub use jobs::{JobState, JobStatus, Jobs, DEFAULT_MIN_VERDICTS};
pub use run::{FlaggedQuery, Page, ReviewItem, Run, RunSources, StatusFilter};
pub use verdicts::{Decision, Verdict, VerdictCounts, VerdictRequest};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Minimum keep/offensive verdicts before a re-tune may start.
    pub min_verdicts: usize,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            min_verdicts: DEFAULT_MIN_VERDICTS,
            cors_origin: None,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    runs: Arc<BTreeMap<String, Arc<Run>>>,
    jobs: Arc<Jobs>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(runs: Vec<Run>, config: ServiceConfig) -> ServiceResult<Self> {
        let mut map = BTreeMap::new();
        for r in runs {
            let id = r.id.clone();
            if map.insert(id.clone(), Arc::new(r)).is_some() {
                return Err(ServiceError::BadRequest(format!("two runs are named {id:?}")));
            }
        }
        Ok(Self {
            runs: Arc::new(map),
            jobs: Arc::new(Jobs::default()),
            config: Arc::new(config),
        })
    }

    /// Opens every directory as a run.
    pub fn open(dirs: &[PathBuf], config: ServiceConfig) -> ServiceResult<Self> {
        let runs = dirs.iter().map(|d| Run::open(d)).collect::<ServiceResult<Vec<_>>>()?;
        Self::new(runs, config)
    }

    pub fn run(&self, id: &str) -> ServiceResult<Arc<Run>> {
        self.runs
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownRun(id.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_methods(Any)
        .allow_headers(Any)
        .allow_origin(match state.config.cors_origin.as_deref().map(HeaderValue::from_str) {
            Some(Ok(origin)) => AllowOrigin::exact(origin),
            _ => AllowOrigin::from(Any),
        });
    let api = Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{run}/flagged", get(list_flagged))
        .route("/runs/{run}/image/{*id}", get(get_image))
        .route("/runs/{run}/evidence/{*id}", get(get_evidence))
        .route("/runs/{run}/verdicts", post(submit_verdict).get(verdict_history))
        .route("/runs/{run}/summary", get(get_summary))
        .route("/runs/{run}/retune", post(start_retune))
        .route("/runs/{run}/promptsets", get(list_promptsets))
        .route("/runs/{run}/promptsets/{version}/activate", post(activate))
        .route("/jobs/{job}", get(get_job));
    Router::new()
        .nest("/api/v1", api)
        .layer(cors)
        .with_state(state)
}

#[derive(Debug, Serialize)]
struct RunInfo {
    id: String,
    total_scanned: usize,
    total_flagged: usize,
    threshold: f64,
    backend_id: String,
    active_version: u32,
    has_embeddings: bool,
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<RunInfo>> {
    Json(
        state
            .runs
            .values()
            .map(|r| RunInfo {
                id: r.id.clone(),
                total_scanned: r.summary().total_scanned,
                total_flagged: r.summary().total_flagged,
                threshold: r.summary().metadata.threshold,
                backend_id: r.summary().metadata.backend_id.clone(),
                active_version: r.registry().active_version(),
                has_embeddings: r.has_embeddings(),
            })
            .collect(),
    )
}

async fn list_flagged(
    State(state): State<AppState>,
    Path(run): Path<String>,
    query: Result<Query<FlaggedQuery>, axum::extract::rejection::QueryRejection>,
) -> ServiceResult<Json<Page>> {
    let Query(query) = query.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    Ok(Json(state.run(&run)?.list_flagged(&query)?))
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    #[serde(default)]
    blur: u8,
}

async fn get_image(
    State(state): State<AppState>,
    Path((run, id)): Path<(String, String)>,
    Query(q): Query<ImageQuery>,
) -> ServiceResult<Response> {
    let run = state.run(&run)?;
    let path = run.image_path(&id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ServiceError::NotFound(format!("{id}: {e}")))?;
    let (bytes, ty) = if q.blur != 0 {
        let blurred = tokio::task::spawn_blocking(move || run::blur_image(&bytes))
            .await
            .map_err(|e| ServiceError::Storage(e.to_string()))??;
        (blurred, "image/png")
    } else {
        (bytes, run::content_type(&path))
    };
    Ok(([(header::CONTENT_TYPE, ty)], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct EvidenceQuery {
    k: Option<usize>,
}

#[derive(Debug, Serialize)]
struct EvidenceResponse {
    record: offscan_core::audit::AuditRecord,
    prompt_version: u32,
    #[serde(flatten)]
    evidence: Evidence,
}

async fn get_evidence(
    State(state): State<AppState>,
    Path((run, id)): Path<(String, String)>,
    Query(q): Query<EvidenceQuery>,
) -> ServiceResult<Json<EvidenceResponse>> {
    let run = state.run(&run)?;
    let k = q.k.unwrap_or(5);
    if k == 0 {
        return Err(ServiceError::BadRequest("k must be >= 1".into()));
    }
    let record = run.record(&id)?.clone();
    let prompt_version = run.registry().active_version();
    let evidence = tokio::task::spawn_blocking(move || run.evidence(&id, k))
        .await
        .map_err(|e| ServiceError::Storage(e.to_string()))??;
    Ok(Json(EvidenceResponse {
        record,
        prompt_version,
        evidence,
    }))
}

async fn submit_verdict(
    State(state): State<AppState>,
    Path(run): Path<String>,
    body: Result<Json<VerdictRequest>, axum::extract::rejection::JsonRejection>,
) -> ServiceResult<(StatusCode, Json<Verdict>)> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let run = state.run(&run)?;
    run.record(&req.id)?;
    if req.reviewer.trim().is_empty() {
        return Err(ServiceError::BadRequest("reviewer must not be empty".into()));
    }
    let verdict = Verdict {
        id: req.id,
        decision: req.decision,
        note: req.note.filter(|n| !n.is_empty()),
        reviewer: req.reviewer,
        timestamp: verdicts::now_seconds(),
    };
    // The log mutex serializes writers; fsync happens off the async runtime.
    let stored = verdict.clone();
    tokio::task::spawn_blocking(move || run.verdicts().append(stored))
        .await
        .map_err(|e| ServiceError::Storage(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(verdict)))
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    id: String,
}

#[derive(Debug, Serialize)]
struct HistoryResponse {
    id: String,
    active: Option<Verdict>,
    history: Vec<Verdict>,
}

async fn verdict_history(
    State(state): State<AppState>,
    Path(run): Path<String>,
    Query(q): Query<HistoryQuery>,
) -> ServiceResult<Json<HistoryResponse>> {
    let run = state.run(&run)?;
    run.record(&q.id)?;
    let log = run.verdicts();
    Ok(Json(HistoryResponse {
        active: log.active(&q.id).cloned(),
        history: log.history(&q.id).to_vec(),
        id: q.id,
    }))
}

#[derive(Debug, Serialize)]
struct SummaryResponse {
    run: String,
    summary: AuditSummary,
    active_version: u32,
    active_provenance: Provenance,
    verdicts: VerdictCounts,
    min_verdicts: usize,
}

async fn get_summary(State(state): State<AppState>, Path(run): Path<String>) -> ServiceResult<Json<SummaryResponse>> {
    let r = state.run(&run)?;
    let (active_version, active_provenance) = {
        let registry = r.registry();
        (registry.active_version(), registry.active().provenance.clone())
    };
    let verdicts = r.verdicts().counts();
    Ok(Json(SummaryResponse {
        run: r.id.clone(),
        summary: r.summary().clone(),
        active_version,
        active_provenance,
        verdicts,
        min_verdicts: state.config.min_verdicts,
    }))
}

#[derive(Debug, Default, Deserialize)]
struct RetuneRequest {
    #[serde(default)]
    config: TuneConfig,
}

async fn start_retune(
    State(state): State<AppState>,
    Path(run): Path<String>,
    body: Option<Json<RetuneRequest>>,
) -> ServiceResult<(StatusCode, Json<JobStatus>)> {
    let run = state.run(&run)?;
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let job = jobs::spawn_retune(state.jobs.clone(), run, req.config, state.config.min_verdicts)?;
    Ok((StatusCode::ACCEPTED, Json(state.jobs.get(&job)?)))
}

async fn get_job(State(state): State<AppState>, Path(job): Path<String>) -> ServiceResult<Json<JobStatus>> {
    Ok(Json(state.jobs.get(&job)?))
}

async fn list_promptsets(
    State(state): State<AppState>,
    Path(run): Path<String>,
) -> ServiceResult<Json<Vec<registry::VersionInfo>>> {
    Ok(Json(state.run(&run)?.registry().list()))
}

#[derive(Debug, Serialize)]
struct Activated {
    active_version: u32,
}

async fn activate(
    State(state): State<AppState>,
    Path((run, version)): Path<(String, String)>,
) -> ServiceResult<Json<Activated>> {
    let run = state.run(&run)?;
    let version: u32 = version
        .trim_start_matches('v')
        .parse()
        .map_err(|_| ServiceError::BadRequest(format!("bad version {version:?}")))?;
    run.registry_mut().activate(version)?;
    Ok(Json(Activated { active_version: version }))
}

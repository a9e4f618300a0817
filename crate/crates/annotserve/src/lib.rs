//! Annotation service: hands out scan queries with six CAD proposals, takes
//! back ranked selections and appends them to a JSONL store that the
//! benchmark reads directly.
//!
//! The data directory holds the pair `manifest.tsv` (the scan queries), the
//! CAD `catalog.tsv` and [`LATENTS_FILE`], the autoencoder latents of the
//! catalog used for proposal sampling.

mod payload;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SecondsFormat, Utc};
use scancad::benchmark::{append_annotation, read_annotations, AnnotationRecord};
use scancad::datagen::{read_catalog, read_manifest, PairedSample};
use scancad::embedspace::{propose_candidates, read_embeddings_file};
use scancad::voxel::read_grid_file;
use serde::Deserialize;
use tower_http::cors::CorsLayer;

pub use payload::{GridPayload, ProposalPayload, Stats, Submission, TaskPayload};

pub const LATENTS_FILE: &str = "ae_latents.scem";
pub const DEFAULT_ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const DEFAULT_LEASE: Duration = Duration::from_secs(15 * 60);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] scancad::Error),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) | ServiceError::Core(scancad::Error::InvalidRecord(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub annotations_file: PathBuf,
    pub lease: Duration,
    pub seed: u64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        ServiceConfig {
            annotations_file: data_dir.join(DEFAULT_ANNOTATIONS_FILE),
            data_dir,
            lease: DEFAULT_LEASE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct ScanQuery {
    scan_id: String,
    category: String,
    proposals: Vec<String>,
}

#[derive(Debug)]
struct Lease {
    annotator: Option<String>,
    expires: Instant,
}

#[derive(Debug, Default)]
struct Ledger {
    /// Accepted annotations per query, in query order. Task `scan#r` is open
    /// while exactly `r` annotations exist for `scan`.
    done: Vec<u32>,
    leases: HashMap<String, Lease>,
    stats: Stats,
}

pub struct Service {
    config: ServiceConfig,
    queries: Vec<ScanQuery>,
    by_scan: HashMap<String, usize>,
    grids: HashMap<String, PathBuf>,
    ledger: Mutex<Ledger>,
}

fn task_id(scan_id: &str, round: u32) -> String {
    format!("{scan_id}#{round}")
}

fn parse_task_id(task_id: &str) -> Option<(&str, u32)> {
    let (scan, round) = task_id.rsplit_once('#')?;
    Some((scan, round.parse().ok()?))
}

impl Service {
    /// Loads the query list, grid locations and proposals, then replays the
    /// existing annotation store.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let dir = &config.data_dir;
        let latents = read_embeddings_file(dir.join(LATENTS_FILE))?;
        let mut grids = HashMap::new();
        for e in read_catalog(dir)? {
            grids.insert(e.cad_id, e.path);
        }
        let mut queries = Vec::new();
        let mut by_scan = HashMap::new();
        for e in read_manifest(dir)? {
            let [scan_id, _, _, cad_id] = PairedSample::object_ids(&e.id);
            let proposals = propose_candidates(&latents, &cad_id, config.seed)?;
            for p in &proposals {
                if !grids.contains_key(p) {
                    return Err(ServiceError::NotFound(format!("proposed CAD `{p}` is not in the catalog")));
                }
            }
            grids.insert(scan_id.clone(), e.scan);
            by_scan.insert(scan_id.clone(), queries.len());
            queries.push(ScanQuery {
                scan_id,
                category: e.category,
                proposals,
            });
        }
        let mut ledger = Ledger {
            done: vec![0; queries.len()],
            ..Ledger::default()
        };
        if config.annotations_file.exists() {
            for rec in read_annotations(&config.annotations_file)? {
                if let Some(&q) = by_scan.get(&rec.scan_id) {
                    ledger.done[q] += 1;
                }
                ledger.count(&rec);
            }
        }
        ledger.stats.pending_scans = ledger.done.iter().filter(|&&d| d == 0).count();
        Ok(Service {
            config,
            queries,
            by_scan,
            grids,
            ledger: Mutex::new(ledger),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Ledger> {
        self.ledger.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// The least-annotated query whose open task is not leased to someone
    /// else, leased to `annotator`. An annotator holding a live lease gets the
    /// same task back.
    pub fn next_task(&self, annotator: Option<&str>) -> Result<Option<TaskPayload>, ServiceError> {
        let now = Instant::now();
        let chosen = {
            let mut ledger = self.lock();
            ledger.leases.retain(|_, l| l.expires > now);
            let held = annotator.and_then(|a| {
                ledger
                    .leases
                    .iter()
                    .filter(|(_, l)| l.annotator.as_deref() == Some(a))
                    .map(|(t, _)| t.clone())
                    .min()
            });
            let chosen = held.or_else(|| {
                (0..self.queries.len())
                    .filter(|&q| !ledger.leases.contains_key(&task_id(&self.queries[q].scan_id, ledger.done[q])))
                    .min_by_key(|&q| (ledger.done[q], q))
                    .map(|q| task_id(&self.queries[q].scan_id, ledger.done[q]))
            });
            if let Some(t) = &chosen {
                ledger.leases.insert(
                    t.clone(),
                    Lease {
                        annotator: annotator.map(str::to_string),
                        expires: now + self.config.lease,
                    },
                );
            }
            chosen
        };
        chosen.map(|t| self.task_payload(&t)).transpose()
    }

    fn task_payload(&self, task: &str) -> Result<TaskPayload, ServiceError> {
        let (scan, _) = parse_task_id(task).ok_or_else(|| ServiceError::NotFound(task.to_string()))?;
        let q = &self.queries[self.by_scan[scan]];
        let proposals = q
            .proposals
            .iter()
            .map(|id| {
                Ok(ProposalPayload {
                    cad_id: id.clone(),
                    grid: self.grid(id)?,
                })
            })
            .collect::<Result<_, ServiceError>>()?;
        Ok(TaskPayload {
            task_id: task.to_string(),
            scan: self.grid(&q.scan_id)?,
            proposals,
            hint_image_url: None,
        })
    }

    pub fn grid(&self, object_id: &str) -> Result<GridPayload, ServiceError> {
        let path = self
            .grids
            .get(object_id)
            .ok_or_else(|| ServiceError::NotFound(format!("grid `{object_id}`")))?;
        Ok(GridPayload::encode(&read_grid_file(path)?))
    }

    /// Validates and stores one answer. At most one answer is accepted per
    /// task; later ones get [`ServiceError::Conflict`].
    pub fn submit(&self, sub: Submission) -> Result<AnnotationRecord, ServiceError> {
        let unknown = || ServiceError::NotFound(format!("task `{}`", sub.task_id));
        let (scan, round) = parse_task_id(&sub.task_id).ok_or_else(unknown)?;
        let &q = self.by_scan.get(scan).ok_or_else(unknown)?;
        let query = &self.queries[q];
        if sub.annotator.trim().is_empty() {
            return Err(ServiceError::Invalid("annotator name is empty".into()));
        }
        let record = AnnotationRecord {
            scan_id: query.scan_id.clone(),
            proposed: query.proposals.clone(),
            ranked_selection: sub.ranked_selection,
            annotator: sub.annotator,
            category: query.category.clone(),
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        };
        record.validate()?;
        let mut ledger = self.lock();
        let done = ledger.done[q];
        if round < done {
            return Err(ServiceError::Conflict(format!("task `{}` is already answered", sub.task_id)));
        }
        if round > done {
            return Err(unknown());
        }
        append_annotation(&self.config.annotations_file, &record)?;
        ledger.done[q] += 1;
        if done == 0 {
            ledger.stats.pending_scans -= 1;
        }
        ledger.leases.remove(&sub.task_id);
        ledger.count(&record);
        Ok(record)
    }

    pub fn stats(&self) -> Stats {
        self.lock().stats.clone()
    }
}

impl Ledger {
    fn count(&mut self, rec: &AnnotationRecord) {
        self.stats.total += 1;
        *self.stats.per_category.entry(rec.category.clone()).or_default() += 1;
        *self.stats.per_annotator.entry(rec.annotator.clone()).or_default() += 1;
    }
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    annotator: Option<String>,
}

async fn get_task(State(svc): State<Arc<Service>>, Query(q): Query<TaskQuery>) -> Result<Response, ServiceError> {
    Ok(match svc.next_task(q.annotator.as_deref())? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn post_annotation(
    State(svc): State<Arc<Service>>,
    Json(sub): Json<Submission>,
) -> Result<Json<AnnotationRecord>, ServiceError> {
    tokio::task::spawn_blocking(move || svc.submit(sub))
        .await
        .map_err(|e| ServiceError::Invalid(e.to_string()))?
        .map(Json)
}

async fn get_voxels(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Result<Json<GridPayload>, ServiceError> {
    svc.grid(&id).map(Json)
}

async fn get_stats(State(svc): State<Arc<Service>>) -> Json<Stats> {
    Json(svc.stats())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/task", get(get_task))
        .route("/api/annotation", post(post_annotation))
        .route("/api/voxels/{id}", get(get_voxels))
        .route("/api/stats", get(get_stats))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

/// Binds `addr` and serves until the process ends. Returns the bound address
/// through `on_bind` first, which helps when `addr` uses port 0.
pub async fn serve(service: Service, addr: SocketAddr, on_bind: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bind(listener.local_addr()?);
    axum::serve(listener, router(Arc::new(service))).await
}

/// The annotation file path for a data directory and an optional override.
pub fn annotations_path(data_dir: &Path, file: Option<&Path>) -> PathBuf {
    match file {
        Some(f) if f.is_absolute() => f.to_path_buf(),
        Some(f) => data_dir.join(f),
        None => data_dir.join(DEFAULT_ANNOTATIONS_FILE),
    }
}

//! Survey HTTP service: serves image pairs, records responses to the
//! append-only comparison log and exposes live ranking snapshots.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/api/participants` | register `{participant_id?}` |
//! | GET | `/api/indicators` | names and question texts |
//! | GET | `/api/pair?indicator=&participant=` | next pair |
//! | POST | `/api/response` | `{indicator, left, right, winner, participant}` |
//! | GET | `/api/scores?indicator=&format=json\|csv` | ranking snapshot |
//! | GET | `/api/progress?participant=` | per-indicator counts |

pub mod sim;
mod state;

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use vata_core::data::{load_json, ImageManifest};
use vata_core::trueskill::{score_indicator, IndicatorScoring, ScoringConfig};
use vata_core::Indicator;

pub use state::{Rejection, ServedPair, StateDigest, SurveyState, TARGET_PER_INDICATOR};

/// Header carrying the number of comparisons a snapshot was computed from.
pub const SNAPSHOT_HEADER: &str = "x-vata-comparisons";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_port")]
    pub port: u16,
    pub manifest_path: PathBuf,
    pub log_path: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub scoring: ScoringConfig,
}

fn default_port() -> u16 {
    8080
}

#[derive(Clone)]
struct Snapshot {
    n_comparisons: usize,
    json: Arc<String>,
    csv: Arc<String>,
}

pub struct Service {
    state: Mutex<SurveyState>,
    scoring: ScoringConfig,
    image_ids: Vec<String>,
    cache: Mutex<HashMap<Indicator, Snapshot>>,
    inflight: Mutex<HashSet<Indicator>>,
    next_participant: Mutex<u64>,
}

impl Service {
    pub fn new(state: SurveyState, scoring: ScoringConfig) -> vata_core::Result<Arc<Service>> {
        scoring.validate()?;
        Ok(Arc::new(Service {
            image_ids: state.image_ids(),
            state: Mutex::new(state),
            scoring,
            cache: Mutex::new(HashMap::new()),
            inflight: Mutex::new(HashSet::new()),
            next_participant: Mutex::new(1),
        }))
    }

    pub fn open(cfg: &ServiceConfig) -> vata_core::Result<Arc<Service>> {
        let manifest: ImageManifest = load_json(&cfg.manifest_path)?;
        let state = SurveyState::open(manifest, &cfg.log_path, cfg.seed)?;
        Service::new(state, cfg.scoring.clone())
    }

    pub fn with_state<T>(&self, f: impl FnOnce(&SurveyState) -> T) -> T {
        f(&self.state.lock().expect("state lock"))
    }

    fn compute(&self, indicator: Indicator) -> vata_core::Result<Snapshot> {
        let comparisons = self.with_state(|s| s.comparisons(indicator));
        let scoring = score_indicator(&comparisons, indicator, &self.image_ids, &self.scoring)?;
        Ok(Snapshot {
            n_comparisons: comparisons.len(),
            json: Arc::new(snapshot_json(&scoring)),
            csv: Arc::new(scoring.to_csv()?),
        })
    }

    fn store(&self, indicator: Indicator, snap: Snapshot) {
        let mut cache = self.cache.lock().expect("cache lock");
        let newer = cache.get(&indicator).map_or(true, |old| old.n_comparisons < snap.n_comparisons);
        if newer {
            cache.insert(indicator, snap);
        }
    }
}

fn snapshot_json(s: &IndicatorScoring) -> String {
    let rows: Vec<_> = (0..s.ranking.image_ids.len())
        .map(|i| {
            json!({
                "image_id": s.ranking.image_ids[i],
                "mu": s.ranking.mean_mu[i],
                "sigma2": s.ranking.mean_sigma2[i],
                "normalized": s.normalized[i],
                "score": s.scores[i],
            })
        })
        .collect();
    serde_json::to_string(&json!({
        "indicator": s.diagnostics.indicator,
        "n_comparisons": s.ranking.n_comparisons,
        "scores": rows,
        "diagnostics": s.diagnostics,
    }))
    .expect("snapshot serializes")
}

struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> ApiError {
        ApiError(status, json!({ "error": msg.into() }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<Rejection> for ApiError {
    fn from(r: Rejection) -> ApiError {
        match r {
            Rejection::UnknownParticipant => ApiError::new(StatusCode::NOT_FOUND, "unknown participant"),
            Rejection::UnknownImage(id) => ApiError::new(StatusCode::BAD_REQUEST, format!("unknown image {id}")),
            Rejection::BadWinner => ApiError::new(StatusCode::BAD_REQUEST, "winner must be left or right"),
            Rejection::Complete(progress) => ApiError(
                StatusCode::CONFLICT,
                json!({ "error": "indicator complete", "target": TARGET_PER_INDICATOR, "progress": progress }),
            ),
            Rejection::NotServed => ApiError::new(StatusCode::CONFLICT, "pair was not served to this participant"),
            Rejection::AlreadyAnswered => ApiError::new(StatusCode::CONFLICT, "pair already answered"),
            Rejection::Exhausted => ApiError::new(StatusCode::CONFLICT, "no unanswered pairs left"),
            Rejection::Io(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e),
        }
    }
}

fn indicator(name: &str) -> Result<Indicator, ApiError> {
    name.parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("unknown indicator {name}")))
}

#[derive(Deserialize)]
struct Register {
    participant_id: Option<String>,
}

async fn register(State(svc): State<Arc<Service>>, body: Option<Json<Register>>) -> Result<Response, ApiError> {
    let requested = body.and_then(|Json(b)| b.participant_id);
    let mut st = svc.state.lock().expect("state lock");
    let id = match requested {
        Some(id) if id.trim().is_empty() => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty participant id"));
        }
        Some(id) => id,
        None => loop {
            let mut next = svc.next_participant.lock().expect("counter lock");
            let id = format!("participant-{:04}", *next);
            *next += 1;
            if !st.is_registered(&id) {
                break id;
            }
        },
    };
    let status = if st.register(&id) { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(json!({ "participant_id": id }))).into_response())
}

async fn indicators() -> Json<serde_json::Value> {
    let list: Vec<_> = Indicator::all()
        .into_iter()
        .map(|i| json!({ "name": i.name(), "question_text": i.question_text() }))
        .collect();
    Json(json!({ "indicators": list, "target": TARGET_PER_INDICATOR }))
}

#[derive(Deserialize)]
struct PairQuery {
    indicator: String,
    participant: String,
}

async fn pair(State(svc): State<Arc<Service>>, Query(q): Query<PairQuery>) -> Result<Json<ServedPair>, ApiError> {
    let ind = indicator(&q.indicator)?;
    let served = svc.state.lock().expect("state lock").next_pair(ind, &q.participant)?;
    Ok(Json(served))
}

#[derive(Deserialize)]
struct ResponseBody {
    indicator: String,
    left: String,
    right: String,
    winner: String,
    participant: String,
}

async fn response(State(svc): State<Arc<Service>>, Json(b): Json<ResponseBody>) -> Result<Response, ApiError> {
    let ind = b
        .indicator
        .parse::<Indicator>()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown indicator {}", b.indicator)))?;
    let count = svc
        .state
        .lock()
        .expect("state lock")
        .record(ind, &b.left, &b.right, &b.winner, &b.participant)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "indicator": ind, "progress": count, "target": TARGET_PER_INDICATOR })),
    )
        .into_response())
}

#[derive(Deserialize)]
struct ScoresQuery {
    indicator: String,
    format: Option<String>,
}

async fn scores(State(svc): State<Arc<Service>>, Query(q): Query<ScoresQuery>) -> Result<Response, ApiError> {
    let ind = indicator(&q.indicator)?;
    let csv = match q.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown format {other}"))),
    };
    let current = svc.with_state(|s| s.comparison_count(ind));
    if current == 0 {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no comparisons for {ind}")));
    }
    let cached = svc.cache.lock().expect("cache lock").get(&ind).cloned();
    let snap = match cached {
        Some(s) if s.n_comparisons == current => s,
        Some(stale) => {
            // serve the previous snapshot while a fresh one is computed
            if svc.inflight.lock().expect("inflight lock").insert(ind) {
                let svc = svc.clone();
                tokio::task::spawn_blocking(move || {
                    match svc.compute(ind) {
                        Ok(s) => svc.store(ind, s),
                        Err(e) => log::error!("snapshot for {ind} failed: {e}"),
                    }
                    svc.inflight.lock().expect("inflight lock").remove(&ind);
                });
            }
            stale
        }
        None => {
            let worker = svc.clone();
            let fresh = tokio::task::spawn_blocking(move || worker.compute(ind))
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            svc.store(ind, fresh.clone());
            fresh
        }
    };
    let (body, mime) = if csv {
        (snap.csv.as_str().to_owned(), "text/csv")
    } else {
        (snap.json.as_str().to_owned(), "application/json")
    };
    let mut resp = (StatusCode::OK, body).into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(mime));
    headers.insert(SNAPSHOT_HEADER, HeaderValue::from(snap.n_comparisons));
    Ok(resp)
}

#[derive(Deserialize)]
struct ProgressQuery {
    participant: String,
}

async fn progress(
    State(svc): State<Arc<Service>>,
    Query(q): Query<ProgressQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let p = svc
        .with_state(|s| s.progress(&q.participant))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown participant"))?;
    Ok(Json(json!({
        "participant": q.participant,
        "target": TARGET_PER_INDICATOR,
        "progress": p,
    })))
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/api/participants", post(register))
        .route("/api/indicators", get(indicators))
        .route("/api/pair", get(pair))
        .route("/api/response", post(response))
        .route("/api/scores", get(scores))
        .route("/api/progress", get(progress))
        .with_state(svc)
}

/// Binds `0.0.0.0:port` and serves until the process ends.
pub async fn serve(cfg: &ServiceConfig) -> vata_core::Result<()> {
    let svc = Service::open(cfg)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("survey service listening on {addr}");
    axum::serve(listener, router(svc)).await?;
    Ok(())
}

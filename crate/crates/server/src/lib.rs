//! Review API over a pipeline output directory: candidate queue, candidate
//! timelines with window imagery, decisions, and bias reports.

pub mod wire;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use impactscan::analytics::BiasReport;
use impactscan::candidates::{read_candidates, TiBins};
use impactscan::catalog::{
    CandidateFilter, CatalogError, CatalogStore, Decision, ReviewStatus, ReviewedCandidate,
    DEFAULT_HINT_RADIUS_M,
};
use impactscan::layout::{catalog_bias, read_json, ExpectedFile, OutputLayout, Selection};
use impactscan::raster::{render_context_png, ArchiveSource, DirectoryArchive};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::set_header::SetResponseHeaderLayer;

use wire::*;

/// Members at or above this posterior are outlined.
pub const OUTLINE_THRESHOLD: f64 = 0.95;
/// Context pixels around a member window in rendered images.
pub const IMAGE_MARGIN_PX: usize = 50;
pub const DEFAULT_PAGE_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("review store: {0}")]
    Store(#[from] CatalogError),
    #[error("archive: {0}")]
    Archive(#[from] impactscan::raster::RasterError),
    #[error("candidates: {0}")]
    Candidates(#[from] impactscan::candidates::CandidateError),
    #[error("bad CORS origin `{0}`")]
    Cors(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

pub struct AppState {
    pub store: CatalogStore,
    pub archive: Box<dyn ArchiveSource + Send>,
    pub layout: OutputLayout,
}

impl AppState {
    /// Opens the review store under `layout`, creating it from the built
    /// candidates on first use.
    pub fn open(
        layout: OutputLayout,
        archive_dir: PathBuf,
        bins: &TiBins,
    ) -> Result<Self, ServerError> {
        let review = layout.review_dir();
        let store = if review.join("store.json").exists() {
            CatalogStore::open(&review)?
        } else {
            let cands = read_candidates(&layout.candidates())?;
            CatalogStore::create(&review, &cands, bins)?
        };
        Ok(Self {
            store,
            archive: Box::new(DirectoryArchive::open(&archive_dir)?),
            layout,
        })
    }
}

/// Error response with a `{code, message}` body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema_version: API_SCHEMA_VERSION,
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::UnknownCandidate(_) => Self::not_found(e.to_string()),
            CatalogError::IllegalTransition { .. } => {
                Self::new(StatusCode::CONFLICT, "illegal_transition", e.to_string())
            }
            CatalogError::InvalidQuery(_) => Self::bad_request(e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Shared, cors_origins: &[String]) -> Result<Router, ServerError> {
    let cors = if cors_origins.is_empty() {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins = cors_origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| ServerError::Cors(o.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        CorsLayer::new().allow_origin(AllowOrigin::list(origins))
    }
    .allow_methods(Any)
    .allow_headers([header::CONTENT_TYPE]);
    Ok(Router::new()
        .route("/candidates", get(list_candidates))
        .route("/candidates/{id}", get(candidate_detail))
        .route("/candidates/{id}/decision", post(post_decision))
        .route("/candidates/{id}/members/{k}/image.png", get(member_image))
        .route("/reports/bias", get(bias_report))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(SetResponseHeaderLayer::overriding(
            HeaderName::from_static("x-schema-version"),
            HeaderValue::from(API_SCHEMA_VERSION),
        ))
        .layer(cors)
        .with_state(state))
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, cfg: &ServerConfig) -> Result<(), ServerError> {
    let app = router(Arc::new(state), &cfg.cors_origins)?;
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn parse<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    q.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError::bad_request(format!("invalid value `{v}` for `{key}`")))
        })
        .transpose()
}

fn formation_of(r: &ReviewedCandidate) -> Option<FormationDates> {
    r.candidate.formation.as_ref().map(|f| FormationDates {
        before_observation: f.before.observation_id.clone(),
        before_date: f.before.acquired_at,
        after_observation: f.after.observation_id.clone(),
        after_date: f.after.acquired_at,
    })
}

const LIST_KEYS: [&str; 8] = [
    "status",
    "bin",
    "min_conf",
    "max_conf",
    "lat_min",
    "lat_max",
    "page",
    "page_size",
];

async fn list_candidates(
    State(st): State<Shared>,
    q: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<CandidatePageBody>> {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if let Some(k) = q.keys().find(|k| !LIST_KEYS.contains(&k.as_str())) {
        return Err(ApiError::bad_request(format!(
            "unknown query parameter `{k}`"
        )));
    }
    let status = q
        .get("status")
        .map(|s| s.parse::<ReviewStatus>().map_err(ApiError::bad_request))
        .transpose()?;
    let filter = CandidateFilter {
        status,
        ti_bin: parse(&q, "bin")?,
        lat_min: parse(&q, "lat_min")?,
        lat_max: parse(&q, "lat_max")?,
        min_confidence: parse(&q, "min_conf")?,
        max_confidence: parse(&q, "max_conf")?,
    };
    let page = parse(&q, "page")?.unwrap_or(1);
    let page_size = parse(&q, "page_size")?.unwrap_or(DEFAULT_PAGE_SIZE);
    let p = st.store.query(&filter, page, page_size)?;
    Ok(Json(CandidatePageBody {
        schema_version: API_SCHEMA_VERSION,
        total: p.total,
        page: p.page,
        page_size: p.page_size,
        items: p
            .items
            .iter()
            .map(|r| CandidateSummary {
                id: r.candidate.id.clone(),
                status: r.status,
                confidence: r.candidate.confidence,
                center: r.candidate.center,
                n_members: r.candidate.members.len(),
                ti_value: r.candidate.ti_value,
                ti_bin: r.ti_bin,
                formation: formation_of(r),
            })
            .collect(),
    }))
}

async fn candidate_detail(
    State(st): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<Json<CandidateDetail>> {
    let r = st
        .store
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown candidate {id}")))?;
    let c = &r.candidate;
    let entry = st.store.entry_for(&id);
    let history = st
        .store
        .history(&id)?
        .into_iter()
        .map(|d| DecisionView {
            decision_id: d.decision_id,
            from: d.from,
            status: d.status,
            reviewer: d.reviewer,
            notes: d.notes,
            supervisor_override: d.supervisor_override,
            timestamp: d.timestamp,
        })
        .collect();
    Ok(Json(CandidateDetail {
        schema_version: API_SCHEMA_VERSION,
        id: c.id.clone(),
        status: r.status,
        confidence: c.confidence,
        center: c.center,
        outline_threshold: OUTLINE_THRESHOLD,
        members: c
            .members
            .iter()
            .enumerate()
            .map(|(k, m)| MemberView {
                index: k,
                observation_id: m.window.observation_id.clone(),
                acquired_at: m.acquired_at,
                p_pos: m.p_pos,
                outlined: m.p_pos >= OUTLINE_THRESHOLD,
                window: m.window.clone(),
                image_url: format!("/candidates/{}/members/{k}/image.png", c.id),
            })
            .collect(),
        formation: formation_of(&r),
        ti_value: c.ti_value,
        ti_source: c.ti_source,
        ti_bin: r.ti_bin,
        ti_bin_label: r.ti_bin.map(|b| st.store.bins().label(b)),
        nearest_catalog_entry: st
            .store
            .nearest_entry(c.center, DEFAULT_HINT_RADIUS_M, Some(&c.id))
            .map(|n| CatalogHint {
                impact_id: n.impact_id,
                distance_m: n.distance_m,
            }),
        impact_id: entry.as_ref().map(|e| e.impact_id.clone()),
        followup_image_url: entry.and_then(|e| e.followup_image),
        history,
    }))
}

async fn post_decision(
    State(st): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<Json<DecisionResponse>> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if st.store.get(&id).is_none() {
        return Err(ApiError::not_found(format!("unknown candidate {id}")));
    }
    let decision = Decision {
        status: req.status,
        reviewer: req.reviewer,
        notes: req.notes,
        supervisor_override: req.supervisor_override,
    };
    let store_id = id.clone();
    let rec = tokio::task::spawn_blocking(move || st.store.record_decision(&store_id, decision))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(DecisionResponse {
        schema_version: API_SCHEMA_VERSION,
        candidate_id: id,
        decision_id: rec.decision_id,
        from: rec.from,
        status: rec.status,
    }))
}

async fn member_image(
    State(st): State<Shared>,
    Path((id, k)): Path<(String, String)>,
) -> ApiResult<Response> {
    let r = st
        .store
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown candidate {id}")))?;
    let member = k
        .parse::<usize>()
        .ok()
        .and_then(|k| r.candidate.members.get(k).cloned())
        .ok_or_else(|| ApiError::not_found(format!("candidate {id} has no member `{k}`")))?;
    let png = tokio::task::spawn_blocking(move || {
        let obs = st.archive.load(&member.window.observation_id)?;
        render_context_png(&obs, &member.window, IMAGE_MARGIN_PX)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "image_unavailable", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn missing_outputs(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, "pipeline_outputs_missing", message)
}

async fn bias_report(
    State(st): State<Shared>,
    q: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<BiasReport>> {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let sel: Selection = q
        .get("selection")
        .ok_or_else(|| ApiError::bad_request("missing `selection`"))?
        .parse()
        .map_err(ApiError::bad_request)?;
    match sel {
        Selection::TopK | Selection::Stratified => {
            let path = st.layout.bias_json(sel);
            if !path.exists() {
                return Err(missing_outputs(format!(
                    "no {sel} bias report; run `select` and `report` first"
                )));
            }
            read_json(&path)
                .map(Json)
                .map_err(|e| ApiError::internal(e.to_string()))
        }
        Selection::Catalog => {
            let path = st.layout.expected();
            if !path.exists() {
                return Err(missing_outputs(
                    "no expected distribution; run `report` first",
                ));
            }
            let expected: ExpectedFile =
                read_json(&path).map_err(|e| ApiError::internal(e.to_string()))?;
            let entries = st.store.entries();
            if !entries.iter().any(|e| e.thermal_inertia.is_some()) {
                return Err(missing_outputs(
                    "the catalog has no confirmed impacts with thermal inertia",
                ));
            }
            catalog_bias(&entries, &expected)
                .map(Json)
                .map_err(|e| ApiError::internal(e.to_string()))
        }
    }
}

//! HTTP+JSON API behind the review UI: abnormality classes and their
//! candidate descriptions, the selection action, evaluation runs and
//! per-case overlay payloads. Everything is read from the file-backed
//! knowledge store and run directories; the only write is a selection.

use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use attrground_core::geometry::BoundingBox;
use attrground_core::knowledge::{
    export_prompt_dictionary, DefinitionStore, KnowledgeError, KnowledgeStore, Selector,
};
use attrground_core::metrics::{match_boxes, score_pairs, PairScore};
use attrground_core::runs::{RunError, RunStore};

pub const DEFAULT_PORT: u16 = 7700;

/// Published description of every endpoint.
pub const API_SCHEMA: &str = include_str!("../../../docs/openapi.json");

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "webp"];

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub definitions: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub runs: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub ui: Option<PathBuf>,
}

struct AppState {
    config: ServiceConfig,
    store: Option<KnowledgeStore>,
    runs: Option<RunStore>,
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn unavailable(what: &str) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, format!("{what} is not configured or missing"))
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        log::error!("{message}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<KnowledgeError> for ApiError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::UnknownClass(c) => ApiError::not_found(format!("no candidate pool for class {c:?}")),
            KnowledgeError::IndexOutOfRange { index, len } => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({
                    "error": format!("index {index} out of range"),
                    "index": index,
                    "min": 0,
                    "max": len.saturating_sub(1),
                    "candidates": len,
                }),
            },
            KnowledgeError::Uncovered(classes) => ApiError {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "some classes have no selection", "uncovered": classes }),
            },
            other => ApiError::internal(other),
        }
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::InvalidId(id) => ApiError::not_found(format!("no run {id:?}")),
            other => ApiError::internal(other),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn knowledge(state: &AppState) -> Result<&KnowledgeStore, ApiError> {
    state.store.as_ref().ok_or_else(|| ApiError::unavailable("knowledge store"))
}

fn runs(state: &AppState) -> Result<&RunStore, ApiError> {
    state.runs.as_ref().ok_or_else(|| ApiError::unavailable("run directory"))
}

/// Read on every request so edits on disk show up without a restart.
fn definitions(state: &AppState) -> Result<DefinitionStore, ApiError> {
    let path = state
        .config
        .definitions
        .as_deref()
        .ok_or_else(|| ApiError::unavailable("definition store"))?;
    if !path.is_file() {
        return Err(ApiError::unavailable("definition store"));
    }
    DefinitionStore::load(path).map_err(ApiError::internal)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_name: String,
    pub definition: String,
    pub has_candidates: bool,
    pub has_selection: bool,
}

async fn list_classes(State(state): State<Shared>) -> ApiResult<Vec<ClassSummary>> {
    let defs = definitions(&state)?;
    let (selections, pools) = match &state.store {
        Some(store) => (store.current_selections()?, store.pools()?),
        None => Default::default(),
    };
    let key = attrground_core::dataset::class_key;
    let out = defs
        .iter()
        .map(|d| ClassSummary {
            class_name: d.class_name.clone(),
            definition: d.definition.clone(),
            has_candidates: pools.iter().any(|p| key(&p.class_name) == key(&d.class_name)),
            has_selection: selections.keys().any(|c| key(c) == key(&d.class_name)),
        })
        .collect();
    Ok(Json(out))
}

async fn get_candidates(State(state): State<Shared>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let pool = knowledge(&state)?
        .load_pool(&name)?
        .ok_or_else(|| ApiError::not_found(format!("no candidate pool for class {name:?}")))?;
    Ok(Json(pool).into_response())
}

async fn get_selection(State(state): State<Shared>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let sel = knowledge(&state)?
        .current_selection(&name)?
        .ok_or_else(|| ApiError::not_found(format!("no selection for class {name:?}")))?;
    Ok(Json(sel).into_response())
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct SelectionBody {
    pub index: usize,
}

async fn post_selection(
    State(state): State<Shared>,
    Path(name): Path<String>,
    Json(body): Json<SelectionBody>,
) -> Result<Response, ApiError> {
    let store = knowledge(&state)?.clone();
    let stored = tokio::task::spawn_blocking(move || store.select(&name, body.index, Selector::Human))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(stored).into_response())
}

async fn get_dictionary(State(state): State<Shared>) -> Result<Response, ApiError> {
    let defs = definitions(&state)?;
    let selections = knowledge(&state)?.current_selections()?;
    let dict = export_prompt_dictionary(&selections, &defs.class_names())?;
    Ok(Json(dict).into_response())
}

async fn list_runs(State(state): State<Shared>) -> Result<Response, ApiError> {
    Ok(Json(runs(&state)?.list()?).into_response())
}

async fn get_run(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let store = runs(&state)?;
    let record = store.get(&id)?.ok_or_else(|| ApiError::not_found(format!("no run {id:?}")))?;
    let report = store.report(&id)?;
    Ok(Json(json!({ "record": record, "report": report })).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: usize,
    pub image_id: String,
    pub class_name: String,
    pub gt_boxes: usize,
    pub predictions: usize,
}

async fn list_cases(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let store = runs(&state)?;
    store.get(&id)?.ok_or_else(|| ApiError::not_found(format!("no run {id:?}")))?;
    let out: Vec<CaseSummary> = store
        .cases(&id)?
        .into_iter()
        .enumerate()
        .map(|(case_id, c)| CaseSummary {
            case_id,
            image_id: c.image_id,
            class_name: c.class_name,
            gt_boxes: c.gt.len(),
            predictions: c.preds.len(),
        })
        .collect();
    Ok(Json(out).into_response())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayGt {
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayPrediction {
    pub index: usize,
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub rank: usize,
}

/// Everything the overlay view draws for one case. `canvas` is the image
/// extent when known, otherwise the smallest extent holding every box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayPayload {
    pub run_id: String,
    pub case_id: usize,
    pub image_id: String,
    pub class_name: String,
    pub dims: Option<Extent>,
    pub canvas: Extent,
    pub image_url: Option<String>,
    pub gt: Vec<OverlayGt>,
    pub predictions: Vec<OverlayPrediction>,
    pub pairs: Vec<PairScore>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

fn image_file(dir: &FsPath, image_id: &str) -> Option<String> {
    let safe = !image_id.is_empty() && !image_id.contains(['/', '\\']) && !image_id.starts_with('.');
    if !safe {
        return None;
    }
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| format!("{image_id}.{ext}"))
        .find(|name| dir.join(name).is_file())
}

fn canvas_for(boxes: impl Iterator<Item = BoundingBox>) -> Extent {
    let (mut w, mut h) = (1.0f64, 1.0f64);
    for b in boxes {
        w = w.max(b.x2);
        h = h.max(b.y2);
    }
    Extent {
        width: w.ceil() as u32,
        height: h.ceil() as u32,
    }
}

async fn get_case(
    State(state): State<Shared>,
    Path((id, case_id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let store = runs(&state)?;
    store.get(&id)?.ok_or_else(|| ApiError::not_found(format!("no run {id:?}")))?;
    let not_found = || ApiError::not_found(format!("no case {case_id:?} in run {id:?}"));
    let index: usize = case_id.parse().map_err(|_| not_found())?;
    let case = store.cases(&id)?.into_iter().nth(index).ok_or_else(not_found)?;

    let matching = match_boxes(&case.gt, &case.preds);
    let pairs = score_pairs(&case, &matching);
    let dims = case.dims.map(|d| Extent {
        width: d.width,
        height: d.height,
    });
    let canvas = dims.unwrap_or_else(|| canvas_for(case.gt.iter().copied().chain(case.preds.iter().map(|p| p.bbox))));
    let image_url = state
        .config
        .images
        .as_deref()
        .and_then(|dir| image_file(dir, &case.image_id))
        .map(|name| format!("/images/{name}"));
    let payload = OverlayPayload {
        run_id: id,
        case_id: index,
        image_id: case.image_id.clone(),
        class_name: case.class_name.clone(),
        dims,
        canvas,
        image_url,
        gt: case
            .gt
            .iter()
            .enumerate()
            .map(|(index, b)| OverlayGt { index, bbox: b.coords() })
            .collect(),
        predictions: case
            .preds
            .iter()
            .enumerate()
            .map(|(index, p)| OverlayPrediction {
                index,
                label: p.label.clone(),
                bbox: p.bbox.coords(),
                score: p.score,
                rank: p.rank,
            })
            .collect(),
        pairs,
        unmatched_predictions: matching.unmatched_preds,
        unmatched_gt: matching.unmatched_gts,
    };
    Ok(Json(payload).into_response())
}

async fn schema() -> Response {
    ([("content-type", "application/json")], API_SCHEMA).into_response()
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

/// Builds the application. Missing directories are tolerated: the endpoints
/// that need them answer 503.
pub fn router(config: ServiceConfig) -> Router {
    let store = config
        .store
        .as_deref()
        .filter(|p| p.is_dir())
        .and_then(|p| KnowledgeStore::open(p).ok());
    let runs = config.runs.clone().map(RunStore::new);
    let images = config.images.clone();
    let ui = config.ui.clone();
    let state = Arc::new(AppState { config, store, runs });

    let api = Router::new()
        .route("/health", get(health))
        .route("/schema", get(schema))
        .route("/classes", get(list_classes))
        .route("/classes/{name}/candidates", get(get_candidates))
        .route("/classes/{name}/selection", get(get_selection).post(post_selection))
        .route("/dictionary", get(get_dictionary))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/cases", get(list_cases))
        .route("/runs/{id}/cases/{case_id}", get(get_case))
        .fallback(api_not_found)
        .with_state(state);

    let mut app = Router::new().nest("/api", api);
    if let Some(dir) = images {
        app = app.nest_service("/images", ServeDir::new(dir));
    }
    if let Some(dir) = ui {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app
}

/// Serves until interrupted.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

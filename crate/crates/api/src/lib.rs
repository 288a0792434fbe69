//! REST service over a recital store.
//!
//! Read routes are open and never change a digest. `POST /api/review/{id}`
//! needs the configured curator token in the `X-Curator-Token` header and
//! a `curator` field naming the agent. Lists take `offset`/`limit`
//! (default 0/100, at most 1000) and answer with
//! `{items, offset, limit, total}`. Errors answer with
//! `{"error": {"code", "message"}}`.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Arc, RwLock, RwLockReadGuard};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use recital_core::cook::ConfidenceTier;
use recital_core::linkage::{EntityKind, LinkStatus};
use recital_core::progress::progress;
use recital_core::provenance::{lineage, prov_json};
use recital_core::review::{self, Resolution, ReviewFilter, ReviewReason, ReviewStatus};
use recital_core::surrogate::layout_reconstitution;
use recital_core::views::{self, ListFilter, Paging};
use recital_core::{Config, Error, RecordId, Stage, Store};

pub const CURATOR_HEADER: &str = "x-curator-token";

/// Every route with the record kinds it returns.
pub const ROUTES: &[(&str, &[&str])] = &[
    ("/api/registers", &["raw:register"]),
    ("/api/registers/{id}/pages", &["raw:page"]),
    ("/api/pages/{id}", &["raw:page", "raw:category_vote", "cooked:cooked_page"]),
    ("/api/pages/{id}/marks", &["raw:mark"]),
    ("/api/pages/{id}/clusters", &["cooked:mark_cluster", "cooked:cooked_transcript"]),
    ("/api/pages/{id}/transcripts", &["raw:transcript", "raw:verification"]),
    ("/api/pages/{id}/surrogate", &[]),
    ("/api/transcripts/{id}", &["raw:transcript", "cooked:cooked_transcript"]),
    ("/api/volunteers", &[]),
    ("/api/volunteers/{id}/activity", &["cs:classification"]),
    ("/api/plays", &["domain:canonical_entity"]),
    ("/api/persons", &["domain:canonical_entity"]),
    ("/api/shows", &["domain:show"]),
    ("/api/shows/{id}", &["domain:show", "domain:financial_entry"]),
    ("/api/financial-entries", &["domain:financial_entry"]),
    ("/api/link-decisions", &["domain:link_decision"]),
    ("/api/progress", &[]),
    ("/api/review", &[]),
    ("/api/review/{id}", &[]),
    ("/api/lineage/{record}", &[]),
    ("/api/snapshot", &[]),
    ("/api/records/{stage}/{kind}", &["*"]),
    ("/api/records/{stage}/{kind}/{serial}", &["*"]),
];

pub struct AppState {
    pub store: RwLock<Store>,
    pub config: Config,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(store: Store, config: Config) -> Shared {
        Arc::new(AppState {
            store: RwLock::new(store),
            config,
        })
    }

    fn read(&self) -> RwLockReadGuard<'_, Store> {
        self.store.read().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownId(_) | Error::NotFound { .. } => StatusCode::NOT_FOUND,
            Error::InvalidKind { .. } | Error::BadRecordId(_) | Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            Error::Conflict(_) | Error::Locked(_) => StatusCode::CONFLICT,
            Error::Precondition(_) => StatusCode::PRECONDITION_FAILED,
            Error::Invariant { .. } | Error::StageConstraint(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T = Json<Value>> = Result<T, ApiError>;

fn ok<T: Serialize>(value: T) -> ApiResult {
    Ok(Json(serde_json::to_value(value)?))
}

/// Query string parameters, parsed by hand so bad values get reason codes.
struct Params(HashMap<String, String>);

impl Params {
    fn parse<T: FromStr>(&self, key: &str) -> ApiResult<Option<T>> {
        self.0
            .get(key)
            .map(|v| v.parse().map_err(|_| ApiError::bad(format!("bad value `{v}` for `{key}`"))))
            .transpose()
    }

    fn paging(&self) -> ApiResult<Paging> {
        Ok(Paging::new(self.parse("offset")?, self.parse("limit")?)?)
    }

    fn filter(&self) -> ApiResult<ListFilter> {
        Ok(ListFilter {
            tier: self.parse::<ConfidenceTier>("tier")?,
            stage: self.parse::<Stage>("stage")?,
            volunteer: self.0.get("volunteer").cloned(),
        })
    }

    fn flag(&self, key: &str) -> ApiResult<bool> {
        Ok(self.parse::<bool>(key)?.unwrap_or(false))
    }

    /// Filters, then paginates.
    fn list<T: Serialize>(&self, items: Vec<T>) -> ApiResult {
        let paging = self.paging()?;
        ok(paging.apply(self.filter()?.apply(items)))
    }
}

type Q = Query<HashMap<String, String>>;

fn record_id(text: &str) -> ApiResult<RecordId> {
    Ok(text.parse::<RecordId>()?)
}

fn snake<T: for<'de> Deserialize<'de>>(key: &str, text: &str) -> ApiResult<T> {
    serde_json::from_value(Value::String(text.to_string()))
        .map_err(|_| ApiError::bad(format!("bad value `{text}` for `{key}`")))
}

async fn index() -> Json<Value> {
    Json(json!({"routes": ROUTES.iter().map(|(p, _)| *p).collect::<Vec<_>>()}))
}

async fn registers(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    Params(q).list(views::registers(&s.read())?)
}

async fn register_pages(State(s): State<Shared>, Path(id): Path<String>, Query(q): Q) -> ApiResult {
    Params(q).list(views::register_pages(&s.read(), &record_id(&id)?)?)
}

async fn page(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    ok(views::page(&s.read(), &record_id(&id)?)?)
}

async fn page_marks(State(s): State<Shared>, Path(id): Path<String>, Query(q): Q) -> ApiResult {
    Params(q).list(views::page_marks(&s.read(), &record_id(&id)?)?)
}

async fn page_clusters(State(s): State<Shared>, Path(id): Path<String>, Query(q): Q) -> ApiResult {
    let params = Params(q);
    let mut clusters = views::page_clusters(&s.read(), &record_id(&id)?)?;
    if let Some(tier) = params.parse::<ConfidenceTier>("tier")? {
        clusters.retain(|c| c.transcript.as_ref().is_some_and(|t| t.record.tier == tier));
    }
    ok(params.paging()?.apply(clusters))
}

async fn page_transcripts(State(s): State<Shared>, Path(id): Path<String>, Query(q): Q) -> ApiResult {
    Params(q).list(views::page_transcripts(&s.read(), &record_id(&id)?)?)
}

async fn page_surrogate(State(s): State<Shared>, Path(id): Path<String>, Query(q): Q) -> ApiResult<Response> {
    let id = record_id(&id)?;
    let doc = layout_reconstitution(&s.read(), &s.config, &id)?;
    let mode = q.get("mode").map(String::as_str).unwrap_or("layout");
    Ok(match mode {
        "layout" => Json(doc).into_response(),
        "text" => Json(json!({
            "page_id": id,
            "text": doc.text(&s.config.marker_open, &s.config.marker_close),
        }))
        .into_response(),
        "svg" => ([("content-type", "image/svg+xml")], doc.svg()).into_response(),
        other => return Err(ApiError::bad(format!("unknown surrogate mode `{other}`"))),
    })
}

async fn transcript(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    ok(views::transcript(&s.read(), &record_id(&id)?)?)
}

async fn volunteers(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    let params = Params(q);
    let mut list = views::volunteers(&s.read())?;
    if let Some(v) = params.0.get("volunteer") {
        list.retain(|a| &a.volunteer == v);
    }
    ok(params.paging()?.apply(list))
}

async fn volunteer_activity(State(s): State<Shared>, Path(id): Path<String>, Query(q): Q) -> ApiResult {
    Params(q).list(views::volunteer_activity(&s.read(), &id)?)
}

async fn plays(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    Params(q).list(views::entities(&s.read(), EntityKind::Play)?)
}

async fn persons(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    Params(q).list(views::entities(&s.read(), EntityKind::Person)?)
}

async fn shows(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    Params(q).list(views::shows(&s.read())?)
}

async fn show(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    ok(views::show(&s.read(), &record_id(&id)?)?)
}

async fn financial_entries(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    Params(q).list(views::financial_entries(&s.read())?)
}

async fn link_decisions(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    let params = Params(q);
    let status = params.0.get("status").map(|v| snake::<LinkStatus>("status", v)).transpose()?;
    params.list(views::link_decisions(&s.read(), status)?)
}

async fn get_progress(State(s): State<Shared>) -> ApiResult {
    ok(progress(&s.read())?)
}

async fn review_list(State(s): State<Shared>, Query(q): Q) -> ApiResult {
    let params = Params(q);
    let filter = ReviewFilter {
        status: params.0.get("status").map(|v| snake::<ReviewStatus>("status", v)).transpose()?,
        reason: params.0.get("reason").map(|v| snake::<ReviewReason>("reason", v)).transpose()?,
        stage: params.parse::<Stage>("stage")?,
    };
    ok(params.paging()?.apply(review::list(&s.read(), &filter)))
}

fn item_id(text: &str) -> ApiResult<u64> {
    text.parse().map_err(|_| ApiError::bad(format!("bad review item id `{text}`")))
}

async fn review_get(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    ok(review::get(&s.read(), item_id(&id)?)?)
}

#[derive(Deserialize)]
struct ResolveBody {
    curator: String,
    #[serde(flatten)]
    resolution: Resolution,
}

async fn review_resolve(
    State(s): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: String,
) -> ApiResult {
    let Some(expected) = s.config.curator_token.as_deref() else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "review_disabled", "no curator token is configured"));
    };
    let given = headers.get(CURATOR_HEADER).and_then(|v| v.to_str().ok());
    if given != Some(expected) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong curator token"));
    }
    let item = item_id(&id)?;
    let body: ResolveBody =
        serde_json::from_str(&body).map_err(|e| ApiError::bad(format!("bad resolution body: {e}")))?;
    let mut store = s.store.write().unwrap_or_else(|e| e.into_inner());
    let superseding = review::resolve(&mut store, &s.config, item, &body.resolution, &body.curator)?;
    ok(json!({"item": review::get(&store, item)?, "superseding": superseding}))
}

async fn get_lineage(State(s): State<Shared>, Path(record): Path<String>, Query(q): Q) -> ApiResult {
    let store = s.read();
    let lineage = lineage(&store, &record_id(&record)?)?;
    match q.get("format").map(String::as_str) {
        None | Some("graph") => ok(lineage),
        Some("prov") => ok(prov_json(&store, &lineage.edges)),
        Some(other) => Err(ApiError::bad(format!("unknown lineage format `{other}`"))),
    }
}

async fn snapshot(State(s): State<Shared>) -> ApiResult {
    ok(s.read().snapshot())
}

async fn records(State(s): State<Shared>, Path((stage, kind)): Path<(String, String)>, Query(q): Q) -> ApiResult {
    let params = Params(q);
    let stage = stage.parse::<Stage>()?;
    ok(views::records(&s.read(), stage, &kind, &params.filter()?, params.paging()?)?)
}

async fn record(
    State(s): State<Shared>,
    Path((stage, kind, serial)): Path<(String, String, String)>,
    Query(q): Q,
) -> ApiResult {
    let params = Params(q);
    let id = record_id(&format!("{stage}:{kind}:{serial}"))?;
    ok(views::record(&s.read(), &id, params.flag("exact")?)?)
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such route")
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api", get(index))
        .route("/api/registers", get(registers))
        .route("/api/registers/{id}/pages", get(register_pages))
        .route("/api/pages/{id}", get(page))
        .route("/api/pages/{id}/marks", get(page_marks))
        .route("/api/pages/{id}/clusters", get(page_clusters))
        .route("/api/pages/{id}/transcripts", get(page_transcripts))
        .route("/api/pages/{id}/surrogate", get(page_surrogate))
        .route("/api/transcripts/{id}", get(transcript))
        .route("/api/volunteers", get(volunteers))
        .route("/api/volunteers/{id}/activity", get(volunteer_activity))
        .route("/api/plays", get(plays))
        .route("/api/persons", get(persons))
        .route("/api/shows", get(shows))
        .route("/api/shows/{id}", get(show))
        .route("/api/financial-entries", get(financial_entries))
        .route("/api/link-decisions", get(link_decisions))
        .route("/api/progress", get(get_progress))
        .route("/api/review", get(review_list))
        .route("/api/review/{id}", get(review_get).post(review_resolve))
        .route("/api/lineage/{record}", get(get_lineage))
        .route("/api/snapshot", get(snapshot))
        .route("/api/records/{stage}/{kind}", get(records))
        .route("/api/records/{stage}/{kind}/{serial}", get(record))
        .fallback(fallback)
        .with_state(state)
}

/// Binds `api.bind:api.port` and serves until the process ends.
pub async fn serve(store: Store, config: Config) -> std::io::Result<()> {
    let addr = format!("{}:{}", config.api_bind, config.api_port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    eprintln!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(store, config))).await
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/api.md")]
mod book_api {}

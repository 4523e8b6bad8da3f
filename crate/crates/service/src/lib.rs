//! HTTP service for live rating studies.
//!
//! Routes:
//! - `POST /studies/{id}/sessions` with `{"worker_id": ...}`
//! - `GET /sessions/{id}` and `GET /sessions/{id}/next`
//! - `POST /sessions/{id}/ratings` with `{"item_index", "rating", "completion_time_s", "comment"}`
//! - `GET /studies/{id}/export?format=csv|jsonl&paper-filters=true`

pub mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use perception_core::corpus::Corpus;
use perception_core::features::{self, SaliencyMap, Sentence};
use perception_core::plan::{ItemKind, PlanItem, StudyPlan};
use perception_core::records::{self, RatingRecord, VisualizationCondition};
use perception_core::render::{render_map, RenderMode, RenderSpec};
use perception_core::simulate::{failed_all_traps, TrapOutcome};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Mutex, RwLock};

pub use store::{read_events, EventLog, LogEvent};

/// Points of the rating scale.
pub const LIKERT_POINTS: u8 = 7;
pub const LIKERT_LABELS: [&str; 2] = ["not important at all", "very important"];
pub const LOG_FILE: &str = "events.jsonl";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line} is not a valid event: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },
    #[error("log replay: {0}")]
    Replay(String),
    #[error("study {0} was stored with a different plan; use a new data directory")]
    StudyMismatch(String),
    #[error("duplicate study id {0}")]
    DuplicateStudy(String),
    #[error("study {study}: sentence {sentence} is missing from the corpus")]
    MissingSentence { study: String, sentence: String },
}

/// A study as served: its plan, the sentences it shows and how to draw them.
#[derive(Debug, Clone)]
pub struct StudyDefinition {
    pub id: String,
    pub plan: StudyPlan,
    pub corpus: Corpus,
    pub render: RenderSpec,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct StoredStudy {
    id: String,
    plan: StudyPlan,
    render: RenderSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Complete,
    /// Complete, and every trap was failed.
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub study_id: String,
    pub worker_id: String,
    pub slot: usize,
    pub cursor: usize,
    pub item_count: usize,
    pub status: SessionStatus,
    pub trap_results: Vec<bool>,
}

impl Session {
    fn advance(&mut self, trap: Option<bool>) {
        self.cursor += 1;
        self.trap_results.extend(trap);
        if self.cursor == self.item_count {
            let all_failed = !self.trap_results.is_empty() && self.trap_results.iter().all(|p| !p);
            self.status = if all_failed { SessionStatus::Excluded } else { SessionStatus::Complete };
        }
    }
}

struct StudyRuntime {
    def: StudyDefinition,
    sentences: HashMap<String, Sentence>,
    /// Serializes slot allocation.
    allocation: Mutex<Allocation>,
}

#[derive(Default)]
struct Allocation {
    next_slot: usize,
    by_worker: HashMap<String, String>,
}

pub struct Service {
    studies: BTreeMap<String, StudyRuntime>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    log: EventLog,
}

fn session_id(study: &str, slot: usize) -> String {
    format!("{study}-{slot:04}")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Io { path: path.to_path_buf(), source: e }
}

impl Service {
    /// Opens `data_dir`, storing study definitions on first use and
    /// replaying the event log.
    pub fn open(data_dir: &Path, studies: Vec<StudyDefinition>) -> Result<Arc<Self>, ServiceError> {
        let study_dir = data_dir.join("studies");
        std::fs::create_dir_all(&study_dir).map_err(io_err(&study_dir))?;
        let mut runtimes = BTreeMap::new();
        for def in studies {
            let stored = StoredStudy { id: def.id.clone(), plan: def.plan.clone(), render: def.render.clone() };
            let path = study_dir.join(format!("{}.json", def.id));
            match std::fs::read(&path) {
                Ok(bytes) => {
                    let old: StoredStudy = serde_json::from_slice(&bytes)
                        .map_err(|_| ServiceError::StudyMismatch(def.id.clone()))?;
                    if old != stored {
                        return Err(ServiceError::StudyMismatch(def.id.clone()));
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    let bytes = serde_json::to_vec_pretty(&stored).expect("study serializes");
                    let tmp = path.with_extension("json.tmp");
                    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
                    std::fs::File::open(&tmp).and_then(|f| f.sync_all()).map_err(io_err(&tmp))?;
                    std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
            let sentences: HashMap<String, Sentence> =
                def.corpus.sentences.iter().map(|s| (s.id.clone(), s.clone())).collect();
            if let Some(missing) = def.plan.sentence_ids.iter().find(|id| !sentences.contains_key(*id)) {
                return Err(ServiceError::MissingSentence { study: def.id.clone(), sentence: missing.clone() });
            }
            let id = def.id.clone();
            let runtime = StudyRuntime { def, sentences, allocation: Mutex::new(Allocation::default()) };
            if runtimes.insert(id.clone(), runtime).is_some() {
                return Err(ServiceError::DuplicateStudy(id));
            }
        }

        let log = EventLog::open(&data_dir.join(LOG_FILE))?;
        let mut sessions: HashMap<String, Session> = HashMap::new();
        for ev in log.events() {
            match ev {
                LogEvent::SessionCreated { study_id, session_id, worker_id, slot } => {
                    let study = runtimes
                        .get_mut(&study_id)
                        .ok_or_else(|| ServiceError::Replay(format!("unknown study {study_id}")))?;
                    let alloc = study.allocation.get_mut();
                    if slot != alloc.next_slot {
                        return Err(ServiceError::Replay(format!("session {session_id} has slot {slot}")));
                    }
                    alloc.next_slot += 1;
                    alloc.by_worker.insert(worker_id.clone(), session_id.clone());
                    let item_count = study.def.plan.participants[slot].items.len();
                    sessions.insert(
                        session_id.clone(),
                        Session {
                            session_id,
                            study_id,
                            worker_id,
                            slot,
                            cursor: 0,
                            item_count,
                            status: SessionStatus::Active,
                            trap_results: vec![],
                        },
                    );
                }
                LogEvent::Response { session_id, item_index, trap, .. } => {
                    let s = sessions
                        .get_mut(&session_id)
                        .ok_or_else(|| ServiceError::Replay(format!("response for unknown session {session_id}")))?;
                    if item_index != s.cursor || s.status != SessionStatus::Active {
                        return Err(ServiceError::Replay(format!("session {session_id}: unexpected item {item_index}")));
                    }
                    s.advance(trap.map(|t| t.passed));
                }
            }
        }
        let sessions = sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        Ok(Arc::new(Service { studies: runtimes, sessions: RwLock::new(sessions), log }))
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    fn study(&self, id: &str) -> Result<&StudyRuntime, ApiError> {
        self.studies.get(id).ok_or_else(|| ApiError::not_found("unknown_study", format!("no study {id}")))
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id}")))
    }

    async fn append(&self, event: LogEvent) -> Result<(), ApiError> {
        let log = self.log.clone();
        tokio::task::spawn_blocking(move || log.append(event))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(|e| ApiError::internal(e.to_string()))
    }

    pub async fn create_session(&self, study_id: &str, worker_id: &str) -> Result<Session, ApiError> {
        if worker_id.trim().is_empty() {
            return Err(ApiError::bad_request("invalid_worker", "worker_id must not be empty"));
        }
        let study = self.study(study_id)?;
        let mut alloc = study.allocation.lock().await;
        if let Some(existing) = alloc.by_worker.get(worker_id) {
            return Err(ApiError::conflict(
                "duplicate_worker",
                format!("worker {worker_id} already has session {existing} in study {study_id}"),
            ));
        }
        let slot = alloc.next_slot;
        let Some(plan) = study.def.plan.participants.get(slot) else {
            return Err(ApiError::conflict(
                "plan_exhausted",
                format!("all {slot} participant slots of study {study_id} are taken"),
            ));
        };
        let session = Session {
            session_id: session_id(study_id, slot),
            study_id: study_id.to_string(),
            worker_id: worker_id.to_string(),
            slot,
            cursor: 0,
            item_count: plan.items.len(),
            status: SessionStatus::Active,
            trap_results: vec![],
        };
        self.append(LogEvent::SessionCreated {
            study_id: study_id.to_string(),
            session_id: session.session_id.clone(),
            worker_id: worker_id.to_string(),
            slot,
        })
        .await?;
        alloc.next_slot += 1;
        alloc.by_worker.insert(worker_id.to_string(), session.session_id.clone());
        self.sessions
            .write()
            .await
            .insert(session.session_id.clone(), Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub async fn get_session(&self, id: &str) -> Result<Session, ApiError> {
        Ok(self.session(id).await?.lock().await.clone())
    }

    pub async fn next_item(&self, id: &str) -> Result<NextItem, ApiError> {
        let session = self.session(id).await?.lock().await.clone();
        let study = self.study(&session.study_id)?;
        let progress = Progress { completed: session.cursor, total: session.item_count };
        if session.cursor == session.item_count {
            return Ok(NextItem { session_id: session.session_id, done: true, progress, item: None });
        }
        let item = &study.def.plan.participants[session.slot].items[session.cursor];
        let payload = item_payload(study, item, session.cursor)?;
        Ok(NextItem { session_id: session.session_id, done: false, progress, item: Some(payload) })
    }

    pub async fn submit_rating(&self, id: &str, sub: RatingSubmission) -> Result<RatingAck, ApiError> {
        if !(1..=LIKERT_POINTS).contains(&sub.rating) {
            return Err(ApiError::bad_request(
                "rating_out_of_range",
                format!("rating {} outside 1..={LIKERT_POINTS}", sub.rating),
            ));
        }
        if !(sub.completion_time_s.is_finite() && sub.completion_time_s > 0.0) {
            return Err(ApiError::bad_request(
                "invalid_completion_time",
                format!("completion time {} must be positive", sub.completion_time_s),
            ));
        }
        let handle = self.session(id).await?;
        let mut session = handle.lock().await;
        if session.status != SessionStatus::Active {
            return Err(ApiError::conflict("session_complete", format!("session {id} is complete")));
        }
        if sub.item_index != session.cursor {
            return Err(ApiError::conflict(
                "stale_item",
                format!("item {} already answered or not yet shown; current item is {}", sub.item_index, session.cursor),
            ));
        }
        let study = self.study(&session.study_id)?;
        let item = &study.def.plan.participants[session.slot].items[session.cursor];
        let (record, trap) = match &item.kind {
            ItemKind::Trap { expected_rating, .. } => (
                None,
                Some(TrapOutcome {
                    worker_id: session.worker_id.clone(),
                    display_index: item.display_index,
                    expected: *expected_rating,
                    given: sub.rating,
                    passed: sub.rating == *expected_rating,
                }),
            ),
            ItemKind::Sentence { sentence_id } => {
                let sentence = &study.sentences[sentence_id];
                let map = SaliencyMap::new(sentence_id.clone(), item.scores.clone());
                let contexts = features::extract(sentence, &map, item.display_index as usize, &study.def.corpus.lexicons)
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                let record = RatingRecord {
                    worker_id: session.worker_id.clone(),
                    sentence_id: sentence_id.clone(),
                    token_index: item.target_token,
                    context: contexts[item.target_token].clone(),
                    rating: sub.rating,
                    completion_time_s: sub.completion_time_s,
                    comment: sub.comment.filter(|c| !c.trim().is_empty()),
                    display_index: item.display_index,
                    condition: item.condition,
                };
                (Some(record), None)
            }
        };
        let passed = trap.as_ref().map(|t| t.passed);
        self.append(LogEvent::Response {
            study_id: session.study_id.clone(),
            session_id: session.session_id.clone(),
            item_index: session.cursor,
            record,
            trap,
        })
        .await?;
        session.advance(passed);
        Ok(RatingAck {
            accepted: true,
            cursor: session.cursor,
            done: session.cursor == session.item_count,
        })
    }

    /// Export of everything logged for the study so far.
    pub fn export(&self, study_id: &str, format: ExportFormat, paper_filters: bool) -> Result<Vec<u8>, ApiError> {
        self.study(study_id)?;
        export_events(&self.log.events(), study_id, format, paper_filters).map_err(|e| ApiError::internal(e.to_string()))
    }
}

/// Records and trap outcomes of one study in log order.
pub fn study_data(events: &[LogEvent], study_id: &str) -> (Vec<RatingRecord>, Vec<TrapOutcome>) {
    let mut recs = Vec::new();
    let mut traps = Vec::new();
    for ev in events {
        if let LogEvent::Response { study_id: s, record, trap, .. } = ev {
            if s == study_id {
                recs.extend(record.clone());
                traps.extend(trap.clone());
            }
        }
    }
    (recs, traps)
}

/// Export as a pure function of the log. Records of workers who failed every
/// trap, long words and slow answers are flagged; `paper_filters` drops them.
pub fn export_events(
    events: &[LogEvent],
    study_id: &str,
    format: ExportFormat,
    paper_filters: bool,
) -> Result<Vec<u8>, records::RecordError> {
    let (mut recs, traps) = study_data(events, study_id);
    let failed: HashSet<String> = failed_all_traps(&traps).into_iter().collect();
    if paper_filters {
        recs = records::apply_filters(&recs, &failed);
    }
    let mut out = Vec::new();
    match format {
        ExportFormat::Csv => records::write_csv(&mut out, &recs, &failed)?,
        ExportFormat::Jsonl => records::write_jsonl(&mut out, &recs, &failed)?,
    }
    Ok(out)
}

/// The sentence drawn for an item. Its id is the item position so that
/// trap items cannot be told apart by their markup.
pub fn item_sentence(study: &StudyDefinition, item: &PlanItem) -> Option<Sentence> {
    let mut sentence = match &item.kind {
        ItemKind::Sentence { sentence_id } => study.corpus.sentences.iter().find(|s| &s.id == sentence_id)?.clone(),
        ItemKind::Trap { tokens, .. } => {
            let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
            Sentence::from_words("", &words)
        }
    };
    sentence.id = format!("item-{}", item.display_index);
    Some(sentence)
}

pub fn render_mode(condition: VisualizationCondition) -> RenderMode {
    match condition {
        VisualizationCondition::Saliency => RenderMode::Heatmap,
        VisualizationCondition::Corrected => RenderMode::CorrectedHeatmap,
        VisualizationCondition::Bars => RenderMode::Bars,
    }
}

pub fn question(word: &str) -> String {
    format!("How important (1-{LIKERT_POINTS}) do you think the word \"{word}\" was to the model?")
}

fn item_payload(study: &StudyRuntime, item: &PlanItem, index: usize) -> Result<ItemPayload, ApiError> {
    let sentence = item_sentence(&study.def, item)
        .ok_or_else(|| ApiError::internal(format!("item {} has no sentence", item.display_index)))?;
    let mode = render_mode(item.condition);
    let spec = RenderSpec { mode, ..study.def.render.clone() };
    let map = SaliencyMap::new(sentence.id.clone(), item.scores.clone());
    let rendered = render_map(&sentence, &map, &spec).map_err(|e| ApiError::internal(e.to_string()))?;
    let tokens: Vec<String> = sentence.tokens.iter().map(|t| t.surface.clone()).collect();
    let word = tokens[item.target_token].clone();
    Ok(ItemPayload {
        item_index: index,
        display_index: item.display_index,
        tokens,
        target_token: item.target_token,
        question: question(&word),
        target_word: word,
        mode,
        markup: rendered.html,
        svg: rendered.svg,
        likert_points: LIKERT_POINTS,
        likert_labels: LIKERT_LABELS.map(String::from),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPayload {
    pub item_index: usize,
    pub display_index: u32,
    pub tokens: Vec<String>,
    pub target_token: usize,
    pub target_word: String,
    pub question: String,
    pub mode: RenderMode,
    /// Self-contained HTML.
    pub markup: String,
    pub svg: String,
    pub likert_points: u8,
    pub likert_labels: [String; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub session_id: String,
    pub done: bool,
    pub progress: Progress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub item_index: usize,
    pub rating: u8,
    pub completion_time_s: f64,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingAck {
    pub accepted: bool,
    pub cursor: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: ExportFormat,
    #[serde(default, rename = "paper-filters")]
    paper_filters: bool,
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    worker_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }
    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }
    fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
    fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }
    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.status.as_u16(), self.body.code, self.body.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request("invalid_body", e.body_text())
    }
}

type Shared = State<Arc<Service>>;

async fn create_session_route(
    State(svc): Shared,
    UrlPath(study): UrlPath<String>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Session>), ApiError> {
    let Json(body) = body?;
    Ok((StatusCode::CREATED, Json(svc.create_session(&study, &body.worker_id).await?)))
}

async fn session_route(State(svc): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, ApiError> {
    Ok(Json(svc.get_session(&id).await?))
}

async fn next_route(State(svc): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<NextItem>, ApiError> {
    Ok(Json(svc.next_item(&id).await?))
}

async fn rating_route(
    State(svc): Shared,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<RatingSubmission>, JsonRejection>,
) -> Result<Json<RatingAck>, ApiError> {
    let Json(body) = body?;
    Ok(Json(svc.submit_rating(&id, body).await?))
}

async fn export_route(
    State(svc): Shared,
    UrlPath(study): UrlPath<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let bytes = svc.export(&study, q.format, q.paper_filters)?;
    let content_type = match q.format {
        ExportFormat::Csv => "text/csv; charset=utf-8",
        ExportFormat::Jsonl => "application/x-ndjson",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

async fn studies_route(State(svc): Shared) -> Json<BTreeSet<String>> {
    Json(svc.studies.keys().cloned().collect())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/studies", get(studies_route))
        .route("/studies/{id}/sessions", post(create_session_route))
        .route("/studies/{id}/export", get(export_route))
        .route("/sessions/{id}", get(session_route))
        .route("/sessions/{id}/next", get(next_route))
        .route("/sessions/{id}/ratings", post(rating_route))
        .with_state(service)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

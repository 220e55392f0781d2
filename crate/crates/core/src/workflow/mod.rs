//! Supervised generation sessions: fetch candidate examples, confirm shots,
//! generate, review, and finalize into the corpus, one step at a time.
//!
//! Every state change is an [`Event`] appended to `sessions/<id>.jsonl`
//! before it is applied, so a session can always be rebuilt by replay.

mod session;

pub use session::{Event, LogRecord, ReplayError, Session, StepState, StepStatus};

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ensemble::{EnsembleConfig, Variation, DEFAULT_FUZZY_THRESHOLD, DEFAULT_VOTE_THRESHOLD};
use crate::gateway::Gateway;
use crate::model::{validate_document, DocId, FmeaDocument, Provenance, StepKind};
use crate::pipeline::generate;
use crate::prompt::{format_example, render_block, PromptMode, Shot};
use crate::retrieval::{query_text, ExampleCandidate, Retriever, DEFAULT_K, MAX_K};
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct WorkflowError {
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl WorkflowError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        WorkflowError {
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    fn io(e: std::io::Error) -> Self {
        WorkflowError::new("IO_ERROR", e.to_string())
    }
}

impl From<StoreError> for WorkflowError {
    fn from(e: StoreError) -> Self {
        let detail = match &e {
            StoreError::InvalidDocument { violations, .. } => json!({ "violations": violations }),
            _ => Value::Null,
        };
        WorkflowError::new(e.code(), e.to_string()).with_detail(detail)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub short_description: String,
    #[serde(default)]
    pub equipment_name: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    /// One variation per provider, shots in confirmed order.
    #[serde(default)]
    pub providers: Option<Vec<String>>,
    /// Full variation list; takes precedence over `providers`.
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    /// Generated items the reviewer keeps, possibly edited.
    #[serde(default)]
    pub accepted: Vec<String>,
    /// Items the reviewer adds.
    #[serde(default)]
    pub added: Vec<String>,
    /// Boundary description; defaults to the generated one.
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalizeRequest {
    #[serde(default)]
    pub skip: Vec<StepKind>,
    #[serde(default)]
    pub skip_remaining: bool,
    #[serde(default)]
    pub doc_id: Option<DocId>,
}

#[derive(Debug, Clone)]
pub struct WorkflowSettings {
    /// Ids that may serve as shots besides the shown candidates.
    pub training_ids: Vec<DocId>,
    /// Variations used when a generate request names none.
    pub default_ensemble: EnsembleConfig,
    /// Where session logs go; `None` keeps sessions in memory only.
    pub sessions_dir: Option<PathBuf>,
}

type SessionCell = Arc<Mutex<Session>>;

pub struct WorkflowService {
    retriever: Arc<Retriever>,
    gateway: Arc<Gateway>,
    settings: RwLock<WorkflowSettings>,
    sessions: RwLock<HashMap<String, SessionCell>>,
}

/// Each session serializes its own writers; different sessions proceed
/// independently.
impl WorkflowService {
    pub fn new(retriever: Arc<Retriever>, gateway: Arc<Gateway>, settings: WorkflowSettings) -> Self {
        WorkflowService {
            retriever,
            gateway,
            settings: RwLock::new(settings),
            sessions: RwLock::new(HashMap::new()),
        }
    }

    pub fn retriever(&self) -> &Arc<Retriever> {
        &self.retriever
    }

    pub fn set_training_ids(&self, ids: Vec<DocId>) {
        self.settings.write().expect("settings lock").training_ids = ids;
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        let dir = self.settings.read().expect("settings lock").sessions_dir.clone()?;
        Some(dir.join(format!("{id}.jsonl")))
    }

    fn append(&self, session: &Session, event: Event) -> Result<LogRecord, WorkflowError> {
        let record = LogRecord {
            seq: session.version + 1,
            at: Utc::now(),
            event,
        };
        if let Some(path) = self.log_path(&session.session_id) {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(WorkflowError::io)?;
            }
            let mut line = serde_json::to_string(&record).expect("records serialize");
            line.push('\n');
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(WorkflowError::io)?;
            file.write_all(line.as_bytes()).map_err(WorkflowError::io)?;
            file.flush().map_err(WorkflowError::io)?;
        }
        Ok(record)
    }

    /// Record `event` and apply it to the in-memory session.
    fn commit(&self, session: &mut Session, event: Event) -> Result<(), WorkflowError> {
        let record = self.append(session, event)?;
        session
            .apply(&record)
            .map_err(|e| WorkflowError::new("INTERNAL", e.to_string()))
    }

    /// Read a session log from disk.
    pub fn read_log(&self, id: &str) -> Result<Vec<LogRecord>, WorkflowError> {
        let not_found = || WorkflowError::new("NOT_FOUND", format!("session {id} not found"));
        if !is_session_id(id) {
            return Err(not_found());
        }
        let path = self.log_path(id).ok_or_else(not_found)?;
        let file = fs::File::open(&path).map_err(|_| not_found())?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(WorkflowError::io)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LogRecord = serde_json::from_str(&line).map_err(|e| {
                WorkflowError::new("CORRUPT", format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            records.push(record);
        }
        Ok(records)
    }

    /// Rebuild a session from its log alone.
    pub fn replay(&self, id: &str) -> Result<Session, WorkflowError> {
        Session::replay(&self.read_log(id)?).map_err(|e| WorkflowError::new("CORRUPT", e.to_string()))
    }

    fn cell(&self, id: &str) -> Result<SessionCell, WorkflowError> {
        if let Some(cell) = self.sessions.read().expect("sessions lock").get(id) {
            return Ok(cell.clone());
        }
        // not in memory: recover from the log, if any
        let session = self.replay(id)?;
        let mut sessions = self.sessions.write().expect("sessions lock");
        Ok(sessions
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(session)))
            .clone())
    }

    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, WorkflowError>,
    ) -> Result<T, WorkflowError> {
        let cell = self.cell(id)?;
        let mut session = cell.lock().expect("session lock");
        f(&mut session)
    }

    pub fn create_session(&self, req: CreateRequest) -> Result<Session, WorkflowError> {
        let desc = req.short_description.trim();
        if desc.is_empty() {
            return Err(WorkflowError::new("EMPTY_INPUT", "short_description is empty"));
        }
        if desc.contains(['\n', '\r']) {
            return Err(WorkflowError::new("INVALID_ARGUMENT", "short_description must be one line"));
        }
        let equipment_name = req
            .equipment_name
            .as_deref()
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .unwrap_or(desc)
            .to_string();
        let id = uuid::Uuid::new_v4().simple().to_string();
        let record = LogRecord {
            seq: 1,
            at: Utc::now(),
            event: Event::Created {
                session_id: id.clone(),
                short_description: desc.to_string(),
                equipment_name,
            },
        };
        let session = Session::start(&record).expect("created record starts a session");
        if let Some(path) = self.log_path(&id) {
            let mut line = serde_json::to_string(&record).expect("records serialize");
            line.push('\n');
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(WorkflowError::io)?;
            }
            fs::write(&path, line).map_err(WorkflowError::io)?;
        }
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn get_session(&self, id: &str) -> Result<Session, WorkflowError> {
        self.with_session(id, |s| Ok(s.clone()))
    }

    /// The input this session feeds into `step`: the short description for
    /// the boundary, the reviewed block of the previous step otherwise.
    fn step_input(session: &Session, step: StepKind) -> String {
        match step.previous() {
            None => session.short_description.clone(),
            Some(prev) => {
                let s = session.step(prev);
                render_block(prev, s.accepted_description.as_deref(), &s.accepted)
            }
        }
    }

    fn retrieval_query(session: &Session, step: StepKind) -> String {
        match step.previous() {
            None => session.short_description.clone(),
            Some(prev) => {
                let s = session.step(prev);
                query_text(s.accepted_description.as_deref(), &s.accepted)
            }
        }
    }

    pub fn get_candidates(&self, id: &str, step: StepKind, k: Option<usize>) -> Result<Vec<ExampleCandidate>, WorkflowError> {
        let k = k.unwrap_or(DEFAULT_K);
        if !(1..=MAX_K).contains(&k) {
            return Err(WorkflowError::new("INVALID_ARGUMENT", format!("k must be between 1 and {MAX_K}")));
        }
        self.with_session(id, |session| {
            open_step(session, step, &[StepStatus::Ready, StepStatus::CandidatesShown, StepStatus::Generated])?;
            let pool = self.settings.read().expect("settings lock").training_ids.clone();
            let candidates = if pool.is_empty() {
                Vec::new()
            } else {
                let query = Self::retrieval_query(session, step);
                self.retriever
                    .rank_candidates(step, &query, &pool, k)
                    .map_err(|e| WorkflowError::new(e.code(), e.to_string()))?
            };
            self.commit(
                session,
                Event::CandidatesShown {
                    step,
                    candidates: candidates.clone(),
                },
            )?;
            Ok(candidates)
        })
    }

    pub fn confirm_shots(&self, id: &str, step: StepKind, doc_ids: Vec<DocId>) -> Result<Session, WorkflowError> {
        self.with_session(id, |session| {
            open_step(session, step, &[StepStatus::CandidatesShown, StepStatus::Generated])?;
            let state = session.step(step);
            let training: HashSet<DocId> = self
                .settings
                .read()
                .expect("settings lock")
                .training_ids
                .iter()
                .cloned()
                .collect();
            let mut seen = HashSet::new();
            for d in &doc_ids {
                if !seen.insert(d) {
                    return Err(WorkflowError::new("INVALID_ARGUMENT", format!("example {d} listed twice")));
                }
                let known = state.candidates.iter().any(|c| &c.doc_id == d) || training.contains(d);
                let usable = known
                    && self
                        .retriever
                        .store()
                        .get(d)
                        .is_ok_and(|doc| format_example(&doc, step).is_ok());
                if !usable {
                    return Err(WorkflowError::new("UNKNOWN_EXAMPLE", format!("{d} is not an available example"))
                        .with_detail(json!({ "doc_id": d })));
                }
            }
            self.commit(session, Event::ShotsConfirmed { step, doc_ids })?;
            Ok(session.clone())
        })
    }

    fn ensemble_for(&self, req: &GenerateRequest) -> Result<EnsembleConfig, WorkflowError> {
        let cfg = match (&req.ensemble, &req.providers) {
            (Some(cfg), _) => cfg.clone(),
            (None, Some(providers)) => EnsembleConfig {
                variations: providers
                    .iter()
                    .map(|p| Variation {
                        provider_id: p.clone(),
                        shot_order: 0,
                    })
                    .collect(),
                vote_threshold: DEFAULT_VOTE_THRESHOLD,
                fuzzy_threshold: DEFAULT_FUZZY_THRESHOLD,
            },
            (None, None) => self.settings.read().expect("settings lock").default_ensemble.clone(),
        };
        cfg.validate()
            .map_err(|e| WorkflowError::new("INVALID_ARGUMENT", e.to_string()))?;
        if let Some(v) = cfg.variations.iter().find(|v| !self.gateway.contains(&v.provider_id)) {
            return Err(WorkflowError::new("UNKNOWN_PROVIDER", format!("unknown provider `{}`", v.provider_id)));
        }
        Ok(cfg)
    }

    pub fn generate(&self, id: &str, step: StepKind, req: GenerateRequest) -> Result<Session, WorkflowError> {
        let cfg = self.ensemble_for(&req)?;
        self.with_session(id, |session| {
            open_step(session, step, &[StepStatus::CandidatesShown, StepStatus::Generated])?;
            let mut shots = Vec::new();
            for d in &session.step(step).confirmed_shots {
                let doc = self.retriever.store().get(d)?;
                shots.push(Shot::from_document(&doc, step).map_err(|e| WorkflowError::new(e.code(), e.to_string()))?);
            }
            let mode = if shots.is_empty() {
                PromptMode::ZeroShot
            } else {
                PromptMode::Dfsp
            };
            let query = Self::step_input(session, step);
            let generation = generate(&self.gateway, step, mode, &query, &shots, &cfg)
                .map_err(|e| WorkflowError::new(e.code(), e.to_string()))?;
            if generation.result.is_none() {
                return Err(WorkflowError::new("GENERATION_FAILED", "no variation produced a usable response")
                    .with_detail(json!({ "variations": generation.variations })));
            }
            self.commit(session, Event::Generated { step, generation })?;
            Ok(session.clone())
        })
    }

    pub fn review(&self, id: &str, step: StepKind, req: ReviewRequest) -> Result<Session, WorkflowError> {
        self.with_session(id, |session| {
            let state = session.step(step);
            if state.status != StepStatus::Generated {
                return Err(WorkflowError::new(
                    "STEP_NOT_GENERATED",
                    format!("{step} has no generated result to review"),
                )
                .with_detail(json!({ "step": step, "status": state.status })));
            }
            let mut items = Vec::new();
            let mut seen = HashSet::new();
            for item in req.accepted.iter().chain(&req.added) {
                let item = item.trim();
                if item.is_empty() {
                    continue;
                }
                check_line(item)?;
                if seen.insert(item.to_lowercase()) {
                    items.push(item.to_string());
                }
            }
            let description = if step == StepKind::Boundary {
                let d = req
                    .description
                    .clone()
                    .or_else(|| state.generated.as_ref()?.result.as_ref()?.fragment.description.clone())
                    .map(|d| d.trim().to_string())
                    .filter(|d| !d.is_empty());
                if let Some(d) = &d {
                    if d.lines().any(|l| l.trim_start().starts_with("###")) {
                        return Err(WorkflowError::new("INVALID_REVIEW", "description lines may not start with ###"));
                    }
                }
                d
            } else {
                None
            };
            let mut draft = session.draft_document.clone();
            draft
                .apply_step(step, description.clone(), &items)
                .map_err(|e| WorkflowError::new("INVALID_REVIEW", e.to_string()).with_detail(json!({ "entry": e.entry })))?;
            self.commit(
                session,
                Event::Reviewed {
                    step,
                    description,
                    items,
                    draft,
                },
            )?;
            Ok(session.clone())
        })
    }

    pub fn finalize(&self, id: &str, req: FinalizeRequest) -> Result<FmeaDocument, WorkflowError> {
        self.with_session(id, |session| {
            if let Some(doc_id) = &session.finalized {
                return Err(WorkflowError::new("ALREADY_FINALIZED", format!("session already produced {doc_id}")));
            }
            for step in [StepKind::Boundary, StepKind::FailureLocations] {
                if session.step(step).status != StepStatus::Reviewed {
                    return Err(WorkflowError::new("STEP_NOT_GENERATED", format!("{step} has not been reviewed"))
                        .with_detail(json!({ "step": step, "status": session.step(step).status })));
                }
            }
            let mut skipped = Vec::new();
            for step in &StepKind::ALL[2..] {
                if session.step(*step).status == StepStatus::Reviewed {
                    continue;
                }
                if req.skip_remaining || req.skip.contains(step) {
                    skipped.push(*step);
                } else {
                    return Err(WorkflowError::new(
                        "STEP_NOT_REVIEWED",
                        format!("{step} is neither reviewed nor skipped"),
                    )
                    .with_detail(json!({ "step": step })));
                }
            }
            let doc_id = req
                .doc_id
                .clone()
                .unwrap_or_else(|| DocId::new(format!("gen-{}", session.session_id)));
            if !doc_id.is_well_formed() {
                return Err(WorkflowError::new("INVALID_ARGUMENT", format!("malformed doc_id `{doc_id}`")));
            }
            let mut draft = session.draft_document.clone();
            for step in &skipped {
                draft.apply_step(*step, None, &[]).expect("clearing a step never fails");
            }
            let doc = draft.to_document(
                doc_id.clone(),
                &session.equipment_name,
                &session.short_description,
                Provenance::Generated,
            );
            let report = validate_document(&doc);
            if !report.is_ok() {
                return Err(WorkflowError::new("INVALID_DOCUMENT", "the reviewed document does not validate")
                    .with_detail(json!({ "violations": report.violations })));
            }
            self.retriever.store().ingest(doc.clone())?;
            self.commit(session, Event::Finalized { doc_id, skipped })?;
            Ok(doc)
        })
    }
}

fn is_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

fn open_step(session: &Session, step: StepKind, allowed: &[StepStatus]) -> Result<(), WorkflowError> {
    if session.finalized.is_some() {
        return Err(WorkflowError::new("ALREADY_FINALIZED", "the session is finalized"));
    }
    let status = session.step(step).status;
    if allowed.contains(&status) {
        return Ok(());
    }
    let detail = json!({ "step": step, "status": status });
    Err(match status {
        StepStatus::Locked => WorkflowError::new(
            "STEP_LOCKED",
            format!(
                "{step} is locked until {} is reviewed",
                step.previous().map_or("nothing", |p| p.as_str())
            ),
        ),
        StepStatus::Reviewed => WorkflowError::new("STEP_REVIEWED", format!("{step} is already reviewed")),
        _ => WorkflowError::new("INVALID_STATE", format!("{step} is {status:?}")),
    }
    .with_detail(detail))
}

fn check_line(item: &str) -> Result<(), WorkflowError> {
    if item.chars().any(char::is_control) || item.starts_with("###") {
        return Err(WorkflowError::new("INVALID_REVIEW", format!("item `{}` is not a single plain line", item.escape_debug())));
    }
    Ok(())
}

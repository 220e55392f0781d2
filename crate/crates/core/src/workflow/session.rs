//! Session state and the events it is rebuilt from.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{DocId, DraftDocument, StepKind};
use crate::pipeline::Generation;
use crate::retrieval::ExampleCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepStatus {
    Locked,
    Ready,
    CandidatesShown,
    Generated,
    Reviewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub status: StepStatus,
    pub candidates: Vec<ExampleCandidate>,
    pub confirmed_shots: Vec<DocId>,
    pub generated: Option<Generation>,
    /// Reviewed description (boundary only).
    pub accepted_description: Option<String>,
    pub accepted: Vec<String>,
}

impl StepState {
    fn new(status: StepStatus) -> Self {
        StepState {
            status,
            candidates: Vec::new(),
            confirmed_shots: Vec::new(),
            generated: None,
            accepted_description: None,
            accepted: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        short_description: String,
        equipment_name: String,
    },
    CandidatesShown {
        step: StepKind,
        candidates: Vec<ExampleCandidate>,
    },
    ShotsConfirmed {
        step: StepKind,
        doc_ids: Vec<DocId>,
    },
    Generated {
        step: StepKind,
        generation: Generation,
    },
    Reviewed {
        step: StepKind,
        description: Option<String>,
        items: Vec<String>,
        draft: DraftDocument,
    },
    Finalized {
        doc_id: DocId,
        skipped: Vec<StepKind>,
    },
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub short_description: String,
    pub equipment_name: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub version: u64,
    pub steps: BTreeMap<StepKind, StepState>,
    pub draft_document: DraftDocument,
    pub finalized: Option<DocId>,
    pub skipped: Vec<StepKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("session log is inconsistent at record {seq}: {message}")]
pub struct ReplayError {
    pub seq: u64,
    pub message: String,
}

impl Session {
    /// Start a session from its `Created` record.
    pub fn start(record: &LogRecord) -> Result<Session, ReplayError> {
        let Event::Created {
            session_id,
            short_description,
            equipment_name,
        } = &record.event
        else {
            return Err(ReplayError {
                seq: record.seq,
                message: "log does not start with a created event".into(),
            });
        };
        let steps = StepKind::ALL
            .into_iter()
            .map(|s| {
                let status = if s == StepKind::Boundary {
                    StepStatus::Ready
                } else {
                    StepStatus::Locked
                };
                (s, StepState::new(status))
            })
            .collect();
        Ok(Session {
            session_id: session_id.clone(),
            short_description: short_description.clone(),
            equipment_name: equipment_name.clone(),
            created_at: record.at,
            updated_at: record.at,
            version: 1,
            steps,
            draft_document: DraftDocument::default(),
            finalized: None,
            skipped: Vec::new(),
        })
    }

    pub fn step(&self, step: StepKind) -> &StepState {
        &self.steps[&step]
    }

    fn step_mut(&mut self, step: StepKind) -> &mut StepState {
        self.steps.get_mut(&step).expect("every step has a state")
    }

    /// Apply one already-validated record. The service checks preconditions
    /// before recording, so a failure here means the log was tampered with.
    pub fn apply(&mut self, record: &LogRecord) -> Result<(), ReplayError> {
        let bad = |m: &str| ReplayError {
            seq: record.seq,
            message: m.to_string(),
        };
        if record.seq != self.version + 1 {
            return Err(bad("sequence gap"));
        }
        match &record.event {
            Event::Created { .. } => return Err(bad("duplicate created event")),
            Event::CandidatesShown { step, candidates } => {
                let s = self.step_mut(*step);
                if !matches!(s.status, StepStatus::Ready | StepStatus::CandidatesShown | StepStatus::Generated) {
                    return Err(bad("candidates for a step that is not open"));
                }
                s.candidates = candidates.clone();
                if s.status == StepStatus::Ready {
                    s.status = StepStatus::CandidatesShown;
                }
            }
            Event::ShotsConfirmed { step, doc_ids } => {
                let s = self.step_mut(*step);
                if !matches!(s.status, StepStatus::CandidatesShown | StepStatus::Generated) {
                    return Err(bad("shots for a step without candidates"));
                }
                s.confirmed_shots = doc_ids.clone();
            }
            Event::Generated { step, generation } => {
                let s = self.step_mut(*step);
                if !matches!(s.status, StepStatus::CandidatesShown | StepStatus::Generated) {
                    return Err(bad("generation for a step without candidates"));
                }
                s.generated = Some(generation.clone());
                s.status = StepStatus::Generated;
            }
            Event::Reviewed {
                step,
                description,
                items,
                draft,
            } => {
                let s = self.step_mut(*step);
                if s.status != StepStatus::Generated {
                    return Err(bad("review of a step that was not generated"));
                }
                s.status = StepStatus::Reviewed;
                s.accepted_description = description.clone();
                s.accepted = items.clone();
                self.draft_document = draft.clone();
                if let Some(next) = step.next() {
                    let n = self.step_mut(next);
                    if n.status == StepStatus::Locked {
                        n.status = StepStatus::Ready;
                    }
                }
            }
            Event::Finalized { doc_id, skipped } => {
                if self.finalized.is_some() {
                    return Err(bad("session finalized twice"));
                }
                self.finalized = Some(doc_id.clone());
                self.skipped = skipped.clone();
            }
        }
        self.version = record.seq;
        self.updated_at = record.at;
        Ok(())
    }

    /// Rebuild a session from its full log.
    pub fn replay(records: &[LogRecord]) -> Result<Session, ReplayError> {
        let (first, rest) = records.split_first().ok_or(ReplayError {
            seq: 0,
            message: "empty log".into(),
        })?;
        let mut session = Session::start(first)?;
        for r in rest {
            session.apply(r)?;
        }
        Ok(session)
    }

    /// Step-order invariant: a step is open only once its predecessor has been
    /// reviewed, and a step is reviewed only with a generation behind it.
    pub fn check_step_order(&self) -> Result<(), String> {
        for step in StepKind::ALL {
            let s = self.step(step);
            if let Some(prev) = step.previous() {
                if s.status != StepStatus::Locked && self.step(prev).status != StepStatus::Reviewed {
                    return Err(format!("{step} is {:?} while {prev} is {:?}", s.status, self.step(prev).status));
                }
            }
            if s.status >= StepStatus::Generated && s.generated.is_none() {
                return Err(format!("{step} is {:?} without a generation", s.status));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sessions always serialize")
    }
}

//! The nested FMEA document: boundary, failure locations, degradation
//! mechanisms and influences, preventative tasks and job plans.
//!
//! Documents are plain values. [`validate_document`] checks every reference
//! and text invariant at once and reports all violations as data.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Separator between the fields of a qualified step entry line.
pub const FIELD_SEP: &str = " :: ";
/// Separator between task names inside a job plan entry line.
pub const TASK_SEP: &str = "; ";

/// One pipeline step, in unlock order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    #[serde(alias = "boundary_components")]
    Boundary,
    FailureLocations,
    Mechanisms,
    Influences,
    Tasks,
    JobPlans,
}

impl StepKind {
    pub const ALL: [StepKind; 6] = [
        StepKind::Boundary,
        StepKind::FailureLocations,
        StepKind::Mechanisms,
        StepKind::Influences,
        StepKind::Tasks,
        StepKind::JobPlans,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Boundary => "boundary",
            StepKind::FailureLocations => "failure_locations",
            StepKind::Mechanisms => "mechanisms",
            StepKind::Influences => "influences",
            StepKind::Tasks => "tasks",
            StepKind::JobPlans => "job_plans",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn previous(self) -> Option<StepKind> {
        self.index().checked_sub(1).map(|i| Self::ALL[i])
    }

    pub fn next(self) -> Option<StepKind> {
        Self::ALL.get(self.index() + 1).copied()
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown step kind `{0}`")]
pub struct UnknownStep(pub String);

impl FromStr for StepKind {
    type Err = UnknownStep;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "boundary" | "boundary_components" => Ok(StepKind::Boundary),
            "failure_locations" | "locations" => Ok(StepKind::FailureLocations),
            "mechanisms" => Ok(StepKind::Mechanisms),
            "influences" => Ok(StepKind::Influences),
            "tasks" => Ok(StepKind::Tasks),
            "job_plans" => Ok(StepKind::JobPlans),
            _ => Err(UnknownStep(s.to_string())),
        }
    }
}

/// Corpus-wide document identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(String);

impl DocId {
    pub fn new(id: impl Into<String>) -> Self {
        DocId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Ids double as file names in the corpus directory.
    pub fn is_well_formed(&self) -> bool {
        !self.0.is_empty()
            && !self.0.starts_with('.')
            && self
                .0
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DocId {
    fn from(s: &str) -> Self {
        DocId(s.to_string())
    }
}

impl From<String> for DocId {
    fn from(s: String) -> Self {
        DocId(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentItem {
    pub name: String,
}

impl ComponentItem {
    pub fn new(name: impl Into<String>) -> Self {
        ComponentItem { name: name.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquipmentBoundary {
    pub description: String,
    pub components: Vec<ComponentItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureLocation {
    pub id: String,
    pub name: String,
    pub component_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationMechanism {
    pub id: String,
    pub name: String,
    pub location_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationInfluence {
    pub id: String,
    pub name: String,
    pub mechanism_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreventativeTask {
    pub id: String,
    pub description: String,
    pub location_ref: String,
    pub mechanism_ref: Option<String>,
    pub influence_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobPlan {
    pub id: String,
    pub name: String,
    pub task_refs: Vec<String>,
    pub schedule: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Authored,
    Generated,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmeaDocument {
    pub doc_id: DocId,
    pub equipment_name: String,
    pub short_description: String,
    pub boundary: EquipmentBoundary,
    pub locations: Vec<FailureLocation>,
    pub mechanisms: Vec<DegradationMechanism>,
    pub influences: Vec<DegradationInfluence>,
    pub tasks: Vec<PreventativeTask>,
    pub job_plans: Vec<JobPlan>,
    pub provenance: Provenance,
}

impl FmeaDocument {
    /// Canonical JSON text (field order as declared, compact).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn location(&self, id: &str) -> Option<&FailureLocation> {
        self.locations.iter().find(|l| l.id == id)
    }

    pub fn mechanism(&self, id: &str) -> Option<&DegradationMechanism> {
        self.mechanisms.iter().find(|m| m.id == id)
    }

    pub fn influence(&self, id: &str) -> Option<&DegradationInfluence> {
        self.influences.iter().find(|i| i.id == id)
    }

    pub fn task(&self, id: &str) -> Option<&PreventativeTask> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// Number of items the document holds for a step.
    pub fn step_len(&self, step: StepKind) -> usize {
        match step {
            StepKind::Boundary => self.boundary.components.len(),
            StepKind::FailureLocations => self.locations.len(),
            StepKind::Mechanisms => self.mechanisms.len(),
            StepKind::Influences => self.influences.len(),
            StepKind::Tasks => self.tasks.len(),
            StepKind::JobPlans => self.job_plans.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    InvalidDocId,
    EmptyField,
    InvalidText,
    DuplicateComponent,
    DuplicateId,
    DanglingRef,
    InconsistentRef,
    EmptyTaskRefs,
    DuplicateEntry,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::InvalidDocId => "INVALID_DOC_ID",
            ViolationCode::EmptyField => "EMPTY_FIELD",
            ViolationCode::InvalidText => "INVALID_TEXT",
            ViolationCode::DuplicateComponent => "DUPLICATE_COMPONENT",
            ViolationCode::DuplicateId => "DUPLICATE_ID",
            ViolationCode::DanglingRef => "DANGLING_REF",
            ViolationCode::InconsistentRef => "INCONSISTENT_REF",
            ViolationCode::EmptyTaskRefs => "EMPTY_TASK_REFS",
            ViolationCode::DuplicateEntry => "DUPLICATE_ENTRY",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single broken invariant. `id` names the offending entity id, the
/// dangling reference, or the field when no entity id applies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> BTreeSet<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    fn push(&mut self, code: ViolationCode, id: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            code,
            id: id.into(),
            message: message.into(),
        });
    }
}

/// Why a piece of text cannot be stored as-is.
fn text_problem(text: &str, multiline: bool) -> Option<&'static str> {
    if text.trim().is_empty() {
        return Some("empty");
    }
    if text.trim() != text {
        return Some("leading or trailing whitespace");
    }
    if text
        .chars()
        .any(|c| c.is_control() && !(multiline && c == '\n'))
    {
        return Some("control characters");
    }
    if text.lines().any(|l| l.trim_start().starts_with("###")) {
        return Some("line starting with a section header marker");
    }
    None
}

struct Checker<'a> {
    doc: &'a FmeaDocument,
    report: ValidationReport,
}

impl<'a> Checker<'a> {
    fn text(&mut self, owner: &str, field: &str, value: &str, multiline: bool) -> bool {
        match text_problem(value, multiline) {
            None => true,
            Some("empty") => {
                self.report
                    .push(ViolationCode::EmptyField, owner, format!("{field} is empty"));
                false
            }
            Some(problem) => {
                self.report
                    .push(ViolationCode::InvalidText, owner, format!("{field}: {problem}"));
                false
            }
        }
    }

    /// Names that appear inside qualified entry lines must not contain the
    /// field separator.
    fn entry_name(&mut self, owner: &str, field: &str, value: &str) {
        if self.text(owner, field, value, false) && value.contains("::") {
            self.report.push(
                ViolationCode::InvalidText,
                owner,
                format!("{field} contains the `::` field separator"),
            );
        }
    }

    fn run(mut self) -> ValidationReport {
        let doc = self.doc;
        if !doc.doc_id.is_well_formed() {
            self.report.push(
                ViolationCode::InvalidDocId,
                doc.doc_id.as_str(),
                "doc_id must be non-empty ASCII alphanumerics, '-', '_' or '.'",
            );
        }
        self.text("equipment_name", "equipment_name", &doc.equipment_name, false);
        self.text("short_description", "short_description", &doc.short_description, false);
        self.text("boundary", "boundary.description", &doc.boundary.description, true);

        let mut seen_components = HashSet::new();
        for c in &doc.boundary.components {
            self.entry_name(&c.name, "component name", &c.name);
            if !seen_components.insert(c.name.to_lowercase()) {
                self.report.push(
                    ViolationCode::DuplicateComponent,
                    &c.name,
                    "component names must be unique ignoring case",
                );
            }
        }

        let mut ids = HashSet::new();
        let all_ids = doc
            .locations
            .iter()
            .map(|l| &l.id)
            .chain(doc.mechanisms.iter().map(|m| &m.id))
            .chain(doc.influences.iter().map(|i| &i.id))
            .chain(doc.tasks.iter().map(|t| &t.id))
            .chain(doc.job_plans.iter().map(|j| &j.id));
        for id in all_ids {
            if id.trim().is_empty() {
                self.report
                    .push(ViolationCode::EmptyField, id, "entity id is empty");
            } else if !ids.insert(id.as_str()) {
                self.report
                    .push(ViolationCode::DuplicateId, id, "entity ids must be unique");
            }
        }

        for l in &doc.locations {
            self.entry_name(&l.id, "location name", &l.name);
            if let Some(c) = &l.component_ref {
                if !seen_components.contains(&c.to_lowercase()) {
                    self.report.push(
                        ViolationCode::DanglingRef,
                        c,
                        format!("location {} names an unknown component", l.id),
                    );
                }
            }
        }
        for m in &doc.mechanisms {
            self.entry_name(&m.id, "mechanism name", &m.name);
            if doc.location(&m.location_ref).is_none() {
                self.report.push(
                    ViolationCode::DanglingRef,
                    &m.location_ref,
                    format!("mechanism {} names an unknown location", m.id),
                );
            }
        }
        for i in &doc.influences {
            self.entry_name(&i.id, "influence name", &i.name);
            if doc.mechanism(&i.mechanism_ref).is_none() {
                self.report.push(
                    ViolationCode::DanglingRef,
                    &i.mechanism_ref,
                    format!("influence {} names an unknown mechanism", i.id),
                );
            }
        }
        for t in &doc.tasks {
            self.check_task(t);
        }
        for j in &doc.job_plans {
            self.entry_name(&j.id, "job plan name", &j.name);
            self.text(&j.id, "schedule", &j.schedule, false);
            if j.task_refs.is_empty() {
                self.report
                    .push(ViolationCode::EmptyTaskRefs, &j.id, "job plan has no tasks");
            }
            for r in &j.task_refs {
                if doc.task(r).is_none() {
                    self.report.push(
                        ViolationCode::DanglingRef,
                        r,
                        format!("job plan {} names an unknown task", j.id),
                    );
                }
            }
        }

        // components are covered by DUPLICATE_COMPONENT
        for step in StepKind::ALL.into_iter().skip(1) {
            let mut seen = HashSet::new();
            for line in step_entries(doc, step) {
                if !seen.insert(line.to_lowercase()) {
                    self.report.push(
                        ViolationCode::DuplicateEntry,
                        &line,
                        format!("{step} repeats an entry"),
                    );
                }
            }
        }
        self.report
    }

    fn check_task(&mut self, t: &PreventativeTask) {
        let doc = self.doc;
        if self.text(&t.id, "task description", &t.description, false)
            && (t.description.contains("::") || t.description.contains(';'))
        {
            self.report.push(
                ViolationCode::InvalidText,
                &t.id,
                "task description contains `::` or `;`",
            );
        }
        let location_ok = doc.location(&t.location_ref).is_some();
        if !location_ok {
            self.report.push(
                ViolationCode::DanglingRef,
                &t.location_ref,
                format!("task {} names an unknown location", t.id),
            );
        }
        let mechanism = match &t.mechanism_ref {
            Some(r) => match doc.mechanism(r) {
                Some(m) => Some(m),
                None => {
                    self.report.push(
                        ViolationCode::DanglingRef,
                        r,
                        format!("task {} names an unknown mechanism", t.id),
                    );
                    None
                }
            },
            None => None,
        };
        if let (true, Some(m)) = (location_ok, mechanism) {
            if m.location_ref != t.location_ref {
                self.report.push(
                    ViolationCode::InconsistentRef,
                    &t.id,
                    "task mechanism belongs to a different location",
                );
            }
        }
        if let Some(r) = &t.influence_ref {
            match doc.influence(r) {
                None => self.report.push(
                    ViolationCode::DanglingRef,
                    r,
                    format!("task {} names an unknown influence", t.id),
                ),
                Some(inf) if doc.mechanism(&inf.mechanism_ref).is_some() => {
                    let consistent = match &t.mechanism_ref {
                        Some(m) => mechanism.is_none() || *m == inf.mechanism_ref,
                        None => false,
                    };
                    if !consistent {
                        self.report.push(
                            ViolationCode::InconsistentRef,
                            &t.id,
                            "task influence does not belong to the task mechanism",
                        );
                    }
                }
                Some(_) => {}
            }
        }
    }
}

/// Check every document invariant; violations are returned, never raised.
pub fn validate_document(doc: &FmeaDocument) -> ValidationReport {
    Checker {
        doc,
        report: ValidationReport::default(),
    }
    .run()
}

/// Names (or task descriptions) of a step's items in document order.
pub fn flatten_step_items(doc: &FmeaDocument, step: StepKind) -> Vec<String> {
    match step {
        StepKind::Boundary => doc.boundary.components.iter().map(|c| c.name.clone()).collect(),
        StepKind::FailureLocations => doc.locations.iter().map(|l| l.name.clone()).collect(),
        StepKind::Mechanisms => doc.mechanisms.iter().map(|m| m.name.clone()).collect(),
        StepKind::Influences => doc.influences.iter().map(|i| i.name.clone()).collect(),
        StepKind::Tasks => doc.tasks.iter().map(|t| t.description.clone()).collect(),
        StepKind::JobPlans => doc.job_plans.iter().map(|j| j.name.clone()).collect(),
    }
}

/// Structured content of one step as it appears in a formatted block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepContent {
    pub description: Option<String>,
    pub items: Vec<String>,
}

/// Step content of a document: boundary description plus entry lines.
pub fn step_content(doc: &FmeaDocument, step: StepKind) -> StepContent {
    StepContent {
        description: (step == StepKind::Boundary).then(|| doc.boundary.description.clone()),
        items: step_entries(doc, step),
    }
}

/// Entry lines of a step. Later steps qualify each entry with its parents so
/// that the line alone identifies where it hangs in the document:
///
/// - mechanisms: `<name> :: <location>`
/// - influences: `<name> :: <mechanism> :: <location>`
/// - tasks: `<description> :: <location>[ :: <mechanism>[ :: <influence>]]`
/// - job plans: `<name> :: <task>; <task> :: <schedule>`
pub fn step_entries(doc: &FmeaDocument, step: StepKind) -> Vec<String> {
    let loc_name = |id: &str| doc.location(id).map_or("?", |l| l.name.as_str()).to_string();
    let mech = |id: &str| doc.mechanism(id);
    match step {
        StepKind::Boundary | StepKind::FailureLocations => flatten_step_items(doc, step),
        StepKind::Mechanisms => doc
            .mechanisms
            .iter()
            .map(|m| [m.name.clone(), loc_name(&m.location_ref)].join(FIELD_SEP))
            .collect(),
        StepKind::Influences => doc
            .influences
            .iter()
            .map(|i| {
                let (m_name, l_name) = match mech(&i.mechanism_ref) {
                    Some(m) => (m.name.clone(), loc_name(&m.location_ref)),
                    None => ("?".to_string(), "?".to_string()),
                };
                [i.name.clone(), m_name, l_name].join(FIELD_SEP)
            })
            .collect(),
        StepKind::Tasks => doc
            .tasks
            .iter()
            .map(|t| {
                let mut parts = vec![t.description.clone(), loc_name(&t.location_ref)];
                if let Some(m) = &t.mechanism_ref {
                    parts.push(mech(m).map_or("?", |m| m.name.as_str()).to_string());
                    if let Some(i) = &t.influence_ref {
                        parts.push(doc.influence(i).map_or("?", |i| i.name.as_str()).to_string());
                    }
                }
                parts.join(FIELD_SEP)
            })
            .collect(),
        StepKind::JobPlans => doc
            .job_plans
            .iter()
            .map(|j| {
                let tasks = j
                    .task_refs
                    .iter()
                    .map(|r| doc.task(r).map_or("?", |t| t.description.as_str()))
                    .collect::<Vec<_>>()
                    .join(TASK_SEP);
                [j.name.clone(), tasks, j.schedule.clone()].join(FIELD_SEP)
            })
            .collect(),
    }
}

/// Fields of an entry line, split on the `::` separator and trimmed.
pub fn entry_fields(line: &str) -> Vec<String> {
    line.split("::").map(|f| f.trim().to_string()).collect()
}

/// A document under construction, filled step by step from reviewed items.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftDocument {
    pub description: Option<String>,
    pub components: Vec<String>,
    pub locations: Vec<FailureLocation>,
    pub mechanisms: Vec<DegradationMechanism>,
    pub influences: Vec<DegradationInfluence>,
    pub tasks: Vec<PreventativeTask>,
    pub job_plans: Vec<JobPlan>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("entry `{entry}` cannot be placed: {reason}")]
pub struct EntryError {
    pub entry: String,
    pub reason: String,
}

fn find_by_name<'a, T>(items: &'a [T], name: &str, get: impl Fn(&T) -> &str) -> Option<&'a T> {
    items.iter().find(|x| get(x).eq_ignore_ascii_case(name))
}

impl DraftDocument {
    /// Assemble a full document; sections never filled stay empty.
    pub fn to_document(
        &self,
        doc_id: DocId,
        equipment_name: &str,
        short_description: &str,
        provenance: Provenance,
    ) -> FmeaDocument {
        FmeaDocument {
            doc_id,
            equipment_name: equipment_name.to_string(),
            short_description: short_description.to_string(),
            boundary: EquipmentBoundary {
                description: self.description.clone().unwrap_or_default(),
                components: self.components.iter().map(ComponentItem::new).collect(),
            },
            locations: self.locations.clone(),
            mechanisms: self.mechanisms.clone(),
            influences: self.influences.clone(),
            tasks: self.tasks.clone(),
            job_plans: self.job_plans.clone(),
            provenance,
        }
    }

    /// Replace one step's section with entities built from entry lines.
    /// Parent references are resolved by name against earlier sections.
    pub fn apply_step(
        &mut self,
        step: StepKind,
        description: Option<String>,
        items: &[String],
    ) -> Result<(), EntryError> {
        let fail = |entry: &str, reason: &str| EntryError {
            entry: entry.to_string(),
            reason: reason.to_string(),
        };
        match step {
            StepKind::Boundary => {
                if description.is_some() {
                    self.description = description;
                }
                self.components = items.to_vec();
            }
            StepKind::FailureLocations => {
                self.locations = items
                    .iter()
                    .enumerate()
                    .map(|(n, name)| FailureLocation {
                        id: format!("L{}", n + 1),
                        name: name.clone(),
                        component_ref: self
                            .components
                            .iter()
                            .find(|c| c.eq_ignore_ascii_case(name))
                            .cloned(),
                    })
                    .collect();
            }
            StepKind::Mechanisms => {
                let mut out = Vec::new();
                for (n, line) in items.iter().enumerate() {
                    let f = entry_fields(line);
                    let [name, loc] = f.as_slice() else {
                        return Err(fail(line, "expected `<mechanism> :: <location>`"));
                    };
                    let loc = find_by_name(&self.locations, loc, |l| &l.name)
                        .ok_or_else(|| fail(line, "unknown failure location"))?;
                    out.push(DegradationMechanism {
                        id: format!("M{}", n + 1),
                        name: name.clone(),
                        location_ref: loc.id.clone(),
                    });
                }
                self.mechanisms = out;
            }
            StepKind::Influences => {
                let mut out = Vec::new();
                for (n, line) in items.iter().enumerate() {
                    let f = entry_fields(line);
                    let [name, mech, loc] = f.as_slice() else {
                        return Err(fail(line, "expected `<influence> :: <mechanism> :: <location>`"));
                    };
                    let m = self
                        .resolve_mechanism(mech, loc)
                        .ok_or_else(|| fail(line, "unknown degradation mechanism"))?;
                    out.push(DegradationInfluence {
                        id: format!("I{}", n + 1),
                        name: name.clone(),
                        mechanism_ref: m.id.clone(),
                    });
                }
                self.influences = out;
            }
            StepKind::Tasks => {
                let mut out = Vec::new();
                for (n, line) in items.iter().enumerate() {
                    let f = entry_fields(line);
                    if !(2..=4).contains(&f.len()) {
                        return Err(fail(
                            line,
                            "expected `<task> :: <location>[ :: <mechanism>[ :: <influence>]]`",
                        ));
                    }
                    let loc = find_by_name(&self.locations, &f[1], |l| &l.name)
                        .ok_or_else(|| fail(line, "unknown failure location"))?;
                    let mech = match f.get(2) {
                        Some(m) => Some(
                            self.resolve_mechanism(m, &f[1])
                                .ok_or_else(|| fail(line, "unknown degradation mechanism"))?,
                        ),
                        None => None,
                    };
                    let infl = match (f.get(3), mech) {
                        (Some(i), Some(m)) => Some(
                            self.influences
                                .iter()
                                .find(|x| x.mechanism_ref == m.id && x.name.eq_ignore_ascii_case(i))
                                .ok_or_else(|| fail(line, "unknown degradation influence"))?,
                        ),
                        _ => None,
                    };
                    out.push(PreventativeTask {
                        id: format!("T{}", n + 1),
                        description: f[0].clone(),
                        location_ref: loc.id.clone(),
                        mechanism_ref: mech.map(|m| m.id.clone()),
                        influence_ref: infl.map(|i| i.id.clone()),
                    });
                }
                self.tasks = out;
            }
            StepKind::JobPlans => {
                let mut out = Vec::new();
                for (n, line) in items.iter().enumerate() {
                    let f = entry_fields(line);
                    let [name, tasks, schedule] = f.as_slice() else {
                        return Err(fail(line, "expected `<name> :: <task>; <task> :: <schedule>`"));
                    };
                    let mut task_refs = Vec::new();
                    for t in tasks.split(';').map(str::trim).filter(|t| !t.is_empty()) {
                        let task = find_by_name(&self.tasks, t, |x| &x.description)
                            .ok_or_else(|| fail(line, "unknown preventative task"))?;
                        task_refs.push(task.id.clone());
                    }
                    out.push(JobPlan {
                        id: format!("J{}", n + 1),
                        name: name.clone(),
                        task_refs,
                        schedule: schedule.clone(),
                    });
                }
                self.job_plans = out;
            }
        }
        Ok(())
    }

    fn resolve_mechanism(&self, mech: &str, loc: &str) -> Option<&DegradationMechanism> {
        let loc_ids: HashMap<&str, &str> = self
            .locations
            .iter()
            .map(|l| (l.id.as_str(), l.name.as_str()))
            .collect();
        self.mechanisms.iter().find(|m| {
            m.name.eq_ignore_ascii_case(mech)
                && loc_ids
                    .get(m.location_ref.as_str())
                    .is_some_and(|n| n.eq_ignore_ascii_case(loc))
        })
    }
}

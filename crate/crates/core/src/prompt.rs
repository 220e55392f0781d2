//! Prompt rendering for zero-shot, random-shot and dynamic few-shot modes.
//!
//! Examples are emitted in a line-oriented delimiter grammar:
//!
//! ```text
//! ### DESCRIPTION
//! <free text lines>
//! ### COMPONENTS
//! - <component>
//! ### END
//! ```
//!
//! and, for every other step, a single list block such as
//! `### FAILURE LOCATIONS` followed by `- ` bullets and `### END`.

use serde::{Deserialize, Serialize};

use crate::model::{step_content, DocId, FmeaDocument, StepKind};
use crate::text::sanitize_printable;

pub const HEADER_DESCRIPTION: &str = "DESCRIPTION";
pub const HEADER_COMPONENTS: &str = "COMPONENTS";
pub const HEADER_END: &str = "END";

/// Header name of the list section a step emits.
pub fn list_header(step: StepKind) -> &'static str {
    match step {
        StepKind::Boundary => HEADER_COMPONENTS,
        StepKind::FailureLocations => "FAILURE LOCATIONS",
        StepKind::Mechanisms => "MECHANISMS",
        StepKind::Influences => "INFLUENCES",
        StepKind::Tasks => "TASKS",
        StepKind::JobPlans => "JOB PLANS",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("document {doc_id} has no {step} data to format")]
    MissingStepData { doc_id: DocId, step: StepKind },
    #[error("{mode} prompts take {expected} shots, got {got}")]
    ShotCountMismatch {
        mode: PromptMode,
        expected: &'static str,
        got: usize,
    },
    #[error("query input is empty")]
    EmptyInput,
}

impl PromptError {
    pub fn code(&self) -> &'static str {
        match self {
            PromptError::MissingStepData { .. } => "MISSING_STEP_DATA",
            PromptError::ShotCountMismatch { .. } => "SHOT_COUNT_MISMATCH",
            PromptError::EmptyInput => "EMPTY_INPUT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    RandomShot,
    Dfsp,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::ZeroShot, PromptMode::RandomShot, PromptMode::Dfsp];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::RandomShot => "random_shot",
            PromptMode::Dfsp => "dfsp",
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zero" => Ok(PromptMode::ZeroShot),
            "random_shot" | "random" => Ok(PromptMode::RandomShot),
            "dfsp" => Ok(PromptMode::Dfsp),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// One worked example: the example document's step input and its formatted
/// output block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub doc_id: DocId,
    pub input: String,
    pub output: String,
}

impl Shot {
    pub fn from_document(doc: &FmeaDocument, step: StepKind) -> Result<Shot, PromptError> {
        Ok(Shot {
            doc_id: doc.doc_id.clone(),
            input: step_input(doc, step)?,
            output: format_example(doc, step)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub step: StepKind,
    pub mode: PromptMode,
    pub shots: Vec<Shot>,
    pub query_input: String,
    pub template_id: String,
    pub rendered: String,
}

/// A versioned instruction header for one step.
#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub id: &'static str,
    pub instruction: &'static str,
}

/// Instruction templates, versioned so prompt changes show up in reviews.
pub fn template(step: StepKind) -> Template {
    match step {
        StepKind::Boundary => Template {
            id: "boundary.v1",
            instruction: "You are a reliability engineer. Given a short equipment description, produce its boundary: a functional description and main components. Use exactly the output format of the examples.",
        },
        StepKind::FailureLocations => Template {
            id: "failure_locations.v1",
            instruction: "You are a reliability engineer. Given an equipment boundary, list the failure locations: points on the equipment where a failure might occur. Use exactly the output format of the examples.",
        },
        StepKind::Mechanisms => Template {
            id: "mechanisms.v1",
            instruction: "You are a reliability engineer. Given the failure locations of an equipment, list the degradation mechanisms that can lead to a failure at each location. Use exactly the output format of the examples.",
        },
        StepKind::Influences => Template {
            id: "influences.v1",
            instruction: "You are a reliability engineer. Given the degradation mechanisms of an equipment, list the degradation influences: the underlying causes of each degradation. Use exactly the output format of the examples.",
        },
        StepKind::Tasks => Template {
            id: "tasks.v1",
            instruction: "You are a reliability engineer. Given the degradation influences of an equipment, list preventative maintenance tasks that prevent the failures. Use exactly the output format of the examples.",
        },
        StepKind::JobPlans => Template {
            id: "job_plans.v1",
            instruction: "You are a reliability engineer. Given the preventative maintenance tasks of an equipment, group them into job plans with a schedule. Use exactly the output format of the examples.",
        },
    }
}

/// Render a block in the delimiter grammar. `description` is only emitted for
/// the boundary step.
pub fn render_block(step: StepKind, description: Option<&str>, items: &[String]) -> String {
    let mut out = String::new();
    if step == StepKind::Boundary {
        out.push_str("### DESCRIPTION\n");
        if let Some(d) = description {
            out.push_str(d);
            out.push('\n');
        }
    }
    out.push_str("### ");
    out.push_str(list_header(step));
    out.push('\n');
    for item in items {
        out.push_str("- ");
        out.push_str(item);
        out.push('\n');
    }
    out.push_str("### END");
    out
}

/// Format a document's step content as an example block.
pub fn format_example(doc: &FmeaDocument, step: StepKind) -> Result<String, PromptError> {
    let content = step_content(doc, step);
    let missing = match step {
        StepKind::Boundary => content.description.as_deref().is_none_or(|d| d.trim().is_empty()),
        _ => content.items.is_empty(),
    };
    if missing {
        return Err(PromptError::MissingStepData {
            doc_id: doc.doc_id.clone(),
            step,
        });
    }
    Ok(render_block(step, content.description.as_deref(), &content.items))
}

/// The input a step consumes: the short description for the boundary, the
/// previous step's formatted block otherwise.
pub fn step_input(doc: &FmeaDocument, step: StepKind) -> Result<String, PromptError> {
    match step.previous() {
        None => Ok(doc.short_description.clone()),
        Some(prev) => format_example(doc, prev),
    }
}

/// Render the full completion prompt. Shot order is kept exactly as given.
pub fn build_prompt(
    step: StepKind,
    mode: PromptMode,
    query_input: &str,
    shots: Vec<Shot>,
) -> Result<PromptSpec, PromptError> {
    if query_input.trim().is_empty() {
        return Err(PromptError::EmptyInput);
    }
    let expected = match mode {
        PromptMode::ZeroShot => (shots.is_empty(), "0"),
        PromptMode::RandomShot => (shots.len() == 1, "exactly 1"),
        PromptMode::Dfsp => (!shots.is_empty(), "at least 1"),
    };
    if !expected.0 {
        return Err(PromptError::ShotCountMismatch {
            mode,
            expected: expected.1,
            got: shots.len(),
        });
    }
    let tpl = template(step);
    let mut rendered = String::from(tpl.instruction);
    rendered.push_str("\n\n");
    for shot in &shots {
        rendered.push_str("INPUT: ");
        rendered.push_str(&sanitize_printable(&shot.input));
        rendered.push_str("\nOUTPUT:\n");
        rendered.push_str(&sanitize_printable(&shot.output));
        rendered.push_str("\n\n");
    }
    rendered.push_str("INPUT: ");
    rendered.push_str(&sanitize_printable(query_input));
    rendered.push_str("\nOUTPUT:\n");
    Ok(PromptSpec {
        step,
        mode,
        shots,
        query_input: query_input.to_string(),
        template_id: tpl.id.to_string(),
        rendered,
    })
}

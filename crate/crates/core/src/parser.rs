//! Rule-based parser turning raw completions into structured step fragments.
//!
//! The grammar is the one [`crate::prompt`] emits, with a fixed set of
//! tolerances: header names match case-insensitively, `*` bullets are
//! accepted, and text before the first recognised header or after `### END`
//! is ignored. Repeated items are dropped case-insensitively, keeping the
//! first occurrence.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::model::StepKind;
use crate::prompt::{list_header, HEADER_DESCRIPTION, HEADER_END};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WarningCode {
    DuplicateDropped,
    EmptyItemDropped,
    UnrecognizedLine,
    UnexpectedHeader,
    RepeatedSection,
    MissingEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub code: WarningCode,
    /// 1-based line number in the parsed text.
    pub line_no: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedFragment {
    pub step: StepKind,
    pub description: Option<String>,
    pub items: Vec<String>,
    pub warnings: Vec<ParseWarning>,
}

impl ParsedFragment {
    pub fn empty(step: StepKind) -> Self {
        ParsedFragment {
            step,
            description: None,
            items: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParseError {
    #[error("no block for this step was found")]
    NoRecognizedBlock,
    #[error("only blocks of other steps were found: {found:?}")]
    WrongBlock { found: Vec<StepKind> },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::NoRecognizedBlock => "NO_RECOGNIZED_BLOCK",
            ParseError::WrongBlock { .. } => "WRONG_BLOCK",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Description,
    List,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Header {
    End,
    Section(StepKind, Section),
    Unknown,
}

fn classify_header(line: &str) -> Option<Header> {
    let rest = line.trim().strip_prefix("###")?;
    let name = rest.split_whitespace().collect::<Vec<_>>().join(" ").to_uppercase();
    if name == HEADER_END {
        return Some(Header::End);
    }
    if name == HEADER_DESCRIPTION {
        return Some(Header::Section(StepKind::Boundary, Section::Description));
    }
    Some(
        StepKind::ALL
            .into_iter()
            .find(|s| list_header(*s) == name)
            .map_or(Header::Unknown, |s| Header::Section(s, Section::List)),
    )
}

/// Parse `text` as the output block of `step`. Never panics; unusable input
/// comes back as a [`ParseError`].
pub fn parse(text: &str, step: StepKind) -> Result<ParsedFragment, ParseError> {
    let mut frag = ParsedFragment::empty(step);
    let mut current: Option<Section> = None;
    let mut seen_sections: Vec<Section> = Vec::new();
    let mut started = false;
    let mut closed = false;
    let mut foreign: Vec<StepKind> = Vec::new();
    let mut description_lines: Vec<&str> = Vec::new();
    let mut dedup = HashSet::new();
    let mut last_line = 0;

    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let warn = |frag: &mut ParsedFragment, code| frag.warnings.push(ParseWarning { code, line_no });

        if let Some(header) = classify_header(line) {
            match header {
                Header::End if started => {
                    closed = true;
                    break;
                }
                Header::End => {}
                Header::Section(s, section) if s == step => {
                    if seen_sections.contains(&section) {
                        warn(&mut frag, WarningCode::RepeatedSection);
                    } else {
                        seen_sections.push(section);
                    }
                    started = true;
                    current = Some(section);
                }
                Header::Section(..) if started => {
                    warn(&mut frag, WarningCode::UnexpectedHeader);
                    closed = true;
                    break;
                }
                Header::Section(s, _) => {
                    if !foreign.contains(&s) {
                        foreign.push(s);
                    }
                }
                Header::Unknown if started => warn(&mut frag, WarningCode::UnrecognizedLine),
                Header::Unknown => {}
            }
            continue;
        }
        match current {
            None => {}
            Some(Section::Description) => description_lines.push(line),
            Some(Section::List) => {
                let t = line.trim();
                if t.is_empty() {
                    continue;
                }
                let item = if t == "-" || t == "*" {
                    Some("")
                } else {
                    t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")).map(str::trim)
                };
                match item {
                    None => warn(&mut frag, WarningCode::UnrecognizedLine),
                    Some("") => warn(&mut frag, WarningCode::EmptyItemDropped),
                    Some(item) => {
                        if dedup.insert(item.to_lowercase()) {
                            frag.items.push(item.to_string());
                        } else {
                            warn(&mut frag, WarningCode::DuplicateDropped);
                        }
                    }
                }
            }
        }
    }

    if !started {
        return Err(if foreign.is_empty() {
            ParseError::NoRecognizedBlock
        } else {
            ParseError::WrongBlock { found: foreign }
        });
    }
    if !closed {
        frag.warnings.push(ParseWarning {
            code: WarningCode::MissingEnd,
            line_no: last_line,
        });
    }
    let description = description_lines.join("\n");
    let description = description.trim();
    if step == StepKind::Boundary && !description.is_empty() {
        frag.description = Some(description.to_string());
    }
    Ok(frag)
}

/// Canonical JSON: `{"step":..,"description":..,"items":[..],"warnings":[..]}`.
pub fn to_json(fragment: &ParsedFragment) -> String {
    serde_json::to_string(fragment).expect("fragments always serialize")
}

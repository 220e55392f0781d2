//! One generation round for a step: every variation renders its prompt
//! (shots in its own order), calls its provider, parses the reply; the
//! fragments that parsed are voted into one result.

use serde::{Deserialize, Serialize};

use crate::ensemble::{aggregate_indexed, permute_shots, AggregateResult, EnsembleConfig, EnsembleError};
use crate::gateway::{prompt_hash, Gateway};
use crate::model::{DocId, StepKind};
use crate::parser::{parse, ParsedFragment};
use crate::prompt::{build_prompt, PromptError, PromptMode, Shot};

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

impl GenerateError {
    pub fn code(&self) -> &'static str {
        match self {
            GenerateError::Prompt(e) => e.code(),
            GenerateError::Ensemble(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariationOutcome {
    pub variation: usize,
    pub provider_id: String,
    pub shot_order: usize,
    pub shot_ids: Vec<DocId>,
    pub template_id: String,
    pub prompt_hash: String,
    pub fragment: Option<ParsedFragment>,
    pub error: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub step: StepKind,
    pub mode: PromptMode,
    /// `None` when no variation produced a parseable reply.
    pub result: Option<AggregateResult>,
    pub variations: Vec<VariationOutcome>,
}

impl Generation {
    pub fn failures(&self) -> impl Iterator<Item = &VariationOutcome> {
        self.variations.iter().filter(|v| v.error.is_some())
    }
}

/// Run every variation of `cfg` concurrently (the gateway enforces in-flight
/// caps) and aggregate the parsed fragments.
pub fn generate(
    gateway: &Gateway,
    step: StepKind,
    mode: PromptMode,
    query_input: &str,
    shots: &[Shot],
    cfg: &EnsembleConfig,
) -> Result<Generation, GenerateError> {
    cfg.validate()?;
    let prompts = cfg
        .variations
        .iter()
        .map(|v| build_prompt(step, mode, query_input, permute_shots(shots, v.shot_order)))
        .collect::<Result<Vec<_>, _>>()?;

    let replies = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .variations
            .iter()
            .zip(&prompts)
            .map(|(v, p)| s.spawn(move || gateway.complete(p, &v.provider_id)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("completion worker panicked"))
            .collect::<Vec<_>>()
    });

    let mut outcomes = Vec::with_capacity(replies.len());
    for (i, ((v, prompt), reply)) in cfg.variations.iter().zip(&prompts).zip(replies).enumerate() {
        let parsed = match reply {
            Ok(resp) => parse(&resp.text, step).map_err(|e| Failure {
                code: e.code().to_string(),
                message: e.to_string(),
            }),
            Err(e) => Err(Failure {
                code: e.code().to_string(),
                message: e.to_string(),
            }),
        };
        let (fragment, error) = match parsed {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e)),
        };
        outcomes.push(VariationOutcome {
            variation: i,
            provider_id: v.provider_id.clone(),
            shot_order: v.shot_order,
            shot_ids: prompt.shots.iter().map(|s| s.doc_id.clone()).collect(),
            template_id: prompt.template_id.clone(),
            prompt_hash: prompt_hash(&prompt.rendered),
            fragment,
            error,
        });
    }

    let parsed: Vec<(usize, ParsedFragment)> = outcomes
        .iter()
        .filter_map(|o| o.fragment.clone().map(|f| (o.variation, f)))
        .collect();
    let result = if parsed.is_empty() {
        None
    } else {
        Some(aggregate_indexed(&parsed, cfg.vote_threshold, cfg.fuzzy_threshold)?)
    };
    Ok(Generation {
        step,
        mode,
        result,
        variations: outcomes,
    })
}

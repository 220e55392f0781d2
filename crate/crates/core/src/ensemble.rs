//! Fuzzy voting over fragments produced by several prompt/model variations.


use serde::{Deserialize, Serialize};

use crate::model::StepKind;
use crate::parser::ParsedFragment;
use crate::text::{normalize, tokens};

pub const DEFAULT_VOTE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.85;
pub const MAX_SHOT_PERMUTATIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnsembleError {
    #[error("similarity of empty text is undefined")]
    EmptyText,
    #[error("fragments are for different steps ({expected} vs {found})")]
    StepMismatch { expected: StepKind, found: StepKind },
    #[error("{fragments} fragments for {variations} variations")]
    SizeMismatch { fragments: usize, variations: usize },
    #[error("invalid ensemble config: {0}")]
    InvalidConfig(String),
}

impl EnsembleError {
    pub fn code(&self) -> &'static str {
        match self {
            EnsembleError::EmptyText => "EMPTY_TEXT",
            EnsembleError::StepMismatch { .. } => "STEP_MISMATCH",
            EnsembleError::SizeMismatch { .. } => "SIZE_MISMATCH",
            EnsembleError::InvalidConfig(_) => "INVALID_CONFIG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variation {
    pub provider_id: String,
    /// Index into [`shot_permutations`] of the confirmed shot list.
    #[serde(default)]
    pub shot_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub variations: Vec<Variation>,
    #[serde(default = "default_vote")]
    pub vote_threshold: f64,
    #[serde(default = "default_fuzzy")]
    pub fuzzy_threshold: f64,
}

fn default_vote() -> f64 {
    DEFAULT_VOTE_THRESHOLD
}
fn default_fuzzy() -> f64 {
    DEFAULT_FUZZY_THRESHOLD
}

impl EnsembleConfig {
    /// One variation of `provider_id` with the shots in confirmed order.
    pub fn single(provider_id: impl Into<String>) -> Self {
        EnsembleConfig {
            variations: vec![Variation {
                provider_id: provider_id.into(),
                shot_order: 0,
            }],
            vote_threshold: DEFAULT_VOTE_THRESHOLD,
            fuzzy_threshold: DEFAULT_FUZZY_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.variations.is_empty() {
            return Err(EnsembleError::InvalidConfig("at least one variation is required".into()));
        }
        if !(self.vote_threshold > 0.0 && self.vote_threshold <= 1.0) {
            return Err(EnsembleError::InvalidConfig(format!(
                "vote_threshold {} not in (0, 1]",
                self.vote_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.fuzzy_threshold) {
            return Err(EnsembleError::InvalidConfig(format!(
                "fuzzy_threshold {} not in [0, 1]",
                self.fuzzy_threshold
            )));
        }
        Ok(())
    }
}

/// Token-set Jaccard similarity after lowercasing. Texts without any
/// alphanumeric token compare by normalized equality.
pub fn similarity(a: &str, b: &str) -> Result<f64, EnsembleError> {
    Ok(SimilarityKey::new(a)?.similarity(&SimilarityKey::new(b)?))
}

/// A text prepared for repeated [`similarity`] comparisons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityKey {
    /// Sorted, deduplicated.
    tokens: Vec<String>,
    normalized: String,
}

impl SimilarityKey {
    pub fn new(text: &str) -> Result<Self, EnsembleError> {
        if text.trim().is_empty() {
            return Err(EnsembleError::EmptyText);
        }
        let mut toks = tokens(text);
        toks.sort_unstable();
        toks.dedup();
        Ok(SimilarityKey {
            tokens: toks,
            normalized: normalize(text),
        })
    }

    pub fn similarity(&self, other: &SimilarityKey) -> f64 {
        if self.tokens.is_empty() || other.tokens.is_empty() {
            return if self.normalized == other.normalized { 1.0 } else { 0.0 };
        }
        let (mut i, mut j, mut inter) = (0, 0, 0);
        while i < self.tokens.len() && j < other.tokens.len() {
            match self.tokens[i].cmp(&other.tokens[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        let union = self.tokens.len() + other.tokens.len() - inter;
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMember {
    pub variation: usize,
    pub index: usize,
    pub surface: String,
}

/// Single-link grouping: an item joins every group holding a member at least
/// `fuzzy_threshold` similar to it, merging those groups. Groups come back in
/// order of their earliest member; members in (variation, index) order.
pub fn fuzzy_group(fragments: &[ParsedFragment], fuzzy_threshold: f64) -> Vec<Vec<GroupMember>> {
    let indexed: Vec<(usize, &ParsedFragment)> = fragments.iter().enumerate().collect();
    group_indexed(&indexed, fuzzy_threshold)
}

fn group_indexed(fragments: &[(usize, &ParsedFragment)], fuzzy_threshold: f64) -> Vec<Vec<GroupMember>> {
    let mut groups: Vec<Vec<GroupMember>> = Vec::new();
    for (variation, frag) in fragments {
        for (index, item) in frag.items.iter().enumerate() {
            let hits: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| {
                    g.iter()
                        .any(|m| similarity(&m.surface, item).is_ok_and(|s| s >= fuzzy_threshold))
                })
                .map(|(i, _)| i)
                .collect();
            let member = GroupMember {
                variation: *variation,
                index,
                surface: item.clone(),
            };
            match hits.split_first() {
                None => groups.push(vec![member]),
                Some((&first, rest)) => {
                    for &i in rest.iter().rev() {
                        let merged = groups.remove(i);
                        groups[first].extend(merged);
                    }
                    groups[first].push(member);
                    groups[first].sort_by_key(|m| (m.variation, m.index));
                }
            }
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotedItem {
    #[serde(rename = "name")]
    pub canonical_name: String,
    pub votes: usize,
    /// One (variation, surface form) per supporting variation.
    pub supporters: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateResult {
    #[serde(flatten)]
    pub fragment: ParsedFragment,
    pub votes: Vec<VotedItem>,
}

impl AggregateResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("aggregates always serialize")
    }
}

/// Minimum number of votes an item needs among `n` variations.
pub fn vote_cutoff(vote_threshold: f64, n: usize) -> usize {
    // tolerance keeps 0.1 * 30 = 3.0000000000000004 from rounding up
    ((vote_threshold * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Aggregate one fragment per configured variation.
pub fn aggregate(fragments: &[ParsedFragment], config: &EnsembleConfig) -> Result<AggregateResult, EnsembleError> {
    config.validate()?;
    if fragments.len() != config.variations.len() {
        return Err(EnsembleError::SizeMismatch {
            fragments: fragments.len(),
            variations: config.variations.len(),
        });
    }
    let indexed: Vec<(usize, ParsedFragment)> = fragments.iter().cloned().enumerate().collect();
    aggregate_indexed(&indexed, config.vote_threshold, config.fuzzy_threshold)
}

/// Aggregate the fragments of the variations that produced one, keeping their
/// original variation indices. The vote cutoff counts only these fragments.
pub fn aggregate_indexed(
    fragments: &[(usize, ParsedFragment)],
    vote_threshold: f64,
    fuzzy_threshold: f64,
) -> Result<AggregateResult, EnsembleError> {
    let Some((_, first)) = fragments.first() else {
        return Err(EnsembleError::InvalidConfig("no fragments to aggregate".into()));
    };
    let step = first.step;
    if let Some((_, f)) = fragments.iter().find(|(_, f)| f.step != step) {
        return Err(EnsembleError::StepMismatch {
            expected: step,
            found: f.step,
        });
    }
    let refs: Vec<(usize, &ParsedFragment)> = fragments.iter().map(|(i, f)| (*i, f)).collect();
    let groups = group_indexed(&refs, fuzzy_threshold);
    let cutoff = vote_cutoff(vote_threshold, fragments.len());

    let mut voted: Vec<(VotedItem, (usize, usize))> = groups
        .into_iter()
        .map(|g| {
            let mut supporters: Vec<(usize, String)> = Vec::new();
            for m in &g {
                if !supporters.iter().any(|(v, _)| *v == m.variation) {
                    supporters.push((m.variation, m.surface.clone()));
                }
            }
            let item = VotedItem {
                canonical_name: g[0].surface.clone(),
                votes: supporters.len(),
                supporters,
            };
            (item, (g[0].variation, g[0].index))
        })
        .filter(|(item, _)| item.votes >= cutoff)
        .collect();
    voted.sort_by(|a, b| b.0.votes.cmp(&a.0.votes).then(a.1.cmp(&b.1)));

    let description = fragments
        .iter()
        .find_map(|(_, f)| f.description.clone().filter(|d| !d.trim().is_empty()));
    let fragment = ParsedFragment {
        step,
        description,
        items: voted.iter().map(|(v, _)| v.canonical_name.clone()).collect(),
        warnings: fragments.iter().flat_map(|(_, f)| f.warnings.clone()).collect(),
    };
    Ok(AggregateResult {
        fragment,
        votes: voted.into_iter().map(|(v, _)| v).collect(),
    })
}

/// Orderings of `n` shots in lexicographic order, at most `cap` of them.
pub fn shot_permutations(n: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        if out.len() >= cap {
            break;
        }
        out.push(current.clone());
        // next lexicographic permutation
        let Some(i) = (1..current.len()).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..current.len()).rev().find(|&j| current[j] > current[i - 1]).expect("pivot exists");
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}

/// Reorder `shots` by permutation `order` of [`shot_permutations`]; ids past
/// the available permutations wrap around.
pub fn permute_shots<T: Clone>(shots: &[T], order: usize) -> Vec<T> {
    let perms = shot_permutations(shots.len(), MAX_SHOT_PERMUTATIONS);
    let perm = &perms[order % perms.len()];
    perm.iter().map(|&i| shots[i].clone()).collect()
}

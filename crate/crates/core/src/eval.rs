//! ROUGE-1, set matching metrics and the zero-shot / random-shot / DFSP
//! experiment grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleConfig, SimilarityKey};
use crate::gateway::Gateway;
use crate::model::{step_content, DocId, FmeaDocument, StepKind};
use crate::pipeline::generate;
use crate::prompt::{format_example, step_input, PromptMode, Shot};
use crate::retrieval::{per_document_seed, random_pick, retrieval_text, Retriever};
use crate::store::{CorpusSplit, SplitPart};
use crate::text::tokens;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("reference text has no tokens")]
    EmptyReference,
    #[error("gold list is empty")]
    EmptyGold,
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::EmptyReference => "EMPTY_REFERENCE",
            EvalError::EmptyGold => "EMPTY_GOLD",
        }
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge1Score {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Clipped unigram overlap of lowercased alphanumeric tokens.
pub fn rouge1(candidate: &str, reference: &str) -> Result<Rouge1Score, EvalError> {
    let reference = tokens(reference);
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let candidate = tokens(candidate);
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &reference {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &candidate {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let recall = overlap as f64 / reference.len() as f64;
    let precision = if candidate.is_empty() {
        0.0
    } else {
        overlap as f64 / candidate.len() as f64
    };
    Ok(Rouge1Score {
        recall,
        precision,
        f1: f1(precision, recall),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// (predicted, gold) pairs, one-to-one.
    pub matched_pairs: Vec<(String, String)>,
}

/// Greedy one-to-one matching: each predicted item, in order, takes the most
/// similar unmatched gold item (earliest on ties) whose similarity reaches
/// `threshold`. An empty prediction scores zero everywhere.
pub fn set_metrics(predicted: &[String], gold: &[String], threshold: f64) -> Result<SetMetrics, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let gold_keys: Vec<Option<SimilarityKey>> = gold.iter().map(|g| SimilarityKey::new(g).ok()).collect();
    let mut taken = vec![false; gold.len()];
    let mut matched_pairs = Vec::new();
    for p in predicted {
        let Ok(pk) = SimilarityKey::new(p) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (g, gk) in gold_keys.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let s = gk.as_ref().map_or(0.0, |gk| pk.similarity(gk));
            if s >= threshold && best.is_none_or(|(_, b)| s > b) {
                best = Some((g, s));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched_pairs.push((p.clone(), gold[g].clone()));
        }
    }
    let m = matched_pairs.len() as f64;
    let recall = m / gold.len() as f64;
    let precision = if predicted.is_empty() {
        0.0
    } else {
        m / predicted.len() as f64
    };
    Ok(SetMetrics {
        recall,
        precision,
        f1: f1(precision, recall),
        matched_pairs,
    })
}

/// Which documents are scored and where their shots come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// Score one part of a split; shots come from its training part.
    Split { split: CorpusSplit, part: SplitPart },
    /// Score every listed document; shots come from all the others.
    LeaveOneOut { doc_ids: Vec<DocId> },
}

impl Protocol {
    /// (document to score, shot pool) pairs.
    fn cases(&self) -> Vec<(DocId, Vec<DocId>)> {
        match self {
            Protocol::Split { split, part } => {
                let mut pool = split.train_ids.clone();
                pool.sort();
                let mut ids = split.part(*part).to_vec();
                ids.sort();
                ids.into_iter().map(|id| (id, pool.clone())).collect()
            }
            Protocol::LeaveOneOut { doc_ids } => {
                let mut ids = doc_ids.clone();
                ids.sort();
                ids.iter()
                    .map(|id| (id.clone(), ids.iter().filter(|o| *o != id).cloned().collect()))
                    .collect()
            }
        }
    }

    fn label(&self) -> String {
        match self {
            Protocol::Split { split, part } => {
                format!("split seed={} part={}", split.seed, serde_json::to_value(part).expect("part serializes"))
                    .replace('"', "")
            }
            Protocol::LeaveOneOut { doc_ids } => format!("leave-one-out n={}", doc_ids.len()),
        }
    }
}

/// A generator under evaluation: one provider, or an ensemble of variations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSystem {
    pub label: String,
    pub ensemble: EnsembleConfig,
}

impl EvalSystem {
    pub fn provider(provider_id: &str) -> Self {
        EvalSystem {
            label: provider_id.to_string(),
            ensemble: EnsembleConfig::single(provider_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub systems: Vec<EvalSystem>,
    pub methods: Vec<PromptMode>,
    pub steps: Vec<StepKind>,
    pub k_shots: usize,
    pub seed: u64,
    pub match_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRow {
    pub provider: String,
    pub method: PromptMode,
    pub step: StepKind,
    pub doc_id: DocId,
    pub shots: Vec<DocId>,
    pub metrics: BTreeMap<String, f64>,
    pub failed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub provider: String,
    pub method: PromptMode,
    pub step: StepKind,
    pub metric: String,
    pub mean: f64,
    pub n: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub documents: Vec<DocumentRow>,
}

/// Metric names reported for a step.
pub fn metric_names(step: StepKind) -> &'static [&'static str] {
    match step {
        StepKind::Boundary => &[
            "rouge1_recall",
            "rouge1_precision",
            "rouge1_f1",
            "components_recall",
            "components_precision",
            "components_f1",
        ],
        _ => &["recall", "precision", "f1"],
    }
}

/// Score a predicted step against the gold document. `None` predictions
/// (failures) score zero on every metric.
pub fn score_step(
    gold: &FmeaDocument,
    step: StepKind,
    predicted: Option<(Option<&str>, &[String])>,
    match_threshold: f64,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut m: BTreeMap<String, f64> = metric_names(step).iter().map(|n| (n.to_string(), 0.0)).collect();
    let Some((description, items)) = predicted else {
        return Ok(m);
    };
    let content = step_content(gold, step);
    let set = set_metrics(items, &content.items, match_threshold)?;
    if step == StepKind::Boundary {
        let r = rouge1(description.unwrap_or(""), &gold.boundary.description)?;
        m.insert("rouge1_recall".into(), r.recall);
        m.insert("rouge1_precision".into(), r.precision);
        m.insert("rouge1_f1".into(), r.f1);
        m.insert("components_recall".into(), set.recall);
        m.insert("components_precision".into(), set.precision);
        m.insert("components_f1".into(), set.f1);
    } else {
        m.insert("recall".into(), set.recall);
        m.insert("precision".into(), set.precision);
        m.insert("f1".into(), set.f1);
    }
    Ok(m)
}

struct Case<'a> {
    system: &'a EvalSystem,
    method: PromptMode,
    step: StepKind,
    doc_id: DocId,
    pool: Vec<DocId>,
}

fn evaluate_case(retriever: &Retriever, gateway: &Gateway, cfg: &ExperimentConfig, case: &Case<'_>) -> DocumentRow {
    let mut row = DocumentRow {
        provider: case.system.label.clone(),
        method: case.method,
        step: case.step,
        doc_id: case.doc_id.clone(),
        shots: Vec::new(),
        metrics: score_step_zero(case.step),
        failed: true,
        error: None,
    };
    match run_case(retriever, gateway, cfg, case, &mut row.shots) {
        Ok(Some(metrics)) => {
            row.metrics = metrics;
            row.failed = false;
        }
        Ok(None) => row.error = Some("GENERATION_FAILED".into()),
        Err(code) => row.error = Some(code),
    }
    row
}

fn score_step_zero(step: StepKind) -> BTreeMap<String, f64> {
    metric_names(step).iter().map(|n| (n.to_string(), 0.0)).collect()
}

fn run_case(
    retriever: &Retriever,
    gateway: &Gateway,
    cfg: &ExperimentConfig,
    case: &Case<'_>,
    shot_ids: &mut Vec<DocId>,
) -> Result<Option<BTreeMap<String, f64>>, String> {
    let store = retriever.store();
    let gold = store.get(&case.doc_id).map_err(|e| e.code().to_string())?;
    let query = step_input(&gold, case.step).map_err(|e| e.code().to_string())?;
    let usable: Vec<DocId> = case
        .pool
        .iter()
        .filter(|id| store.get(id).is_ok_and(|d| format_example(&d, case.step).is_ok()))
        .cloned()
        .collect();
    let ids: Vec<DocId> = match case.method {
        PromptMode::ZeroShot => Vec::new(),
        PromptMode::RandomShot => {
            vec![random_pick(&usable, per_document_seed(cfg.seed, &case.doc_id)).map_err(|e| e.code().to_string())?]
        }
        PromptMode::Dfsp => retriever
            .rank_candidates(case.step, &retrieval_text(&gold, case.step), &usable, cfg.k_shots)
            .map_err(|e| e.code().to_string())?
            .into_iter()
            .map(|c| c.doc_id)
            .collect(),
    };
    let mut shots = Vec::with_capacity(ids.len());
    for id in &ids {
        let doc = store.get(id).map_err(|e| e.code().to_string())?;
        shots.push(Shot::from_document(&doc, case.step).map_err(|e| e.code().to_string())?);
    }
    *shot_ids = ids;
    let generation = generate(gateway, case.step, case.method, &query, &shots, &case.system.ensemble)
        .map_err(|e| e.code().to_string())?;
    let Some(result) = generation.result else {
        return Ok(None);
    };
    let f = result.fragment;
    score_step(&gold, case.step, Some((f.description.as_deref(), &f.items)), cfg.match_threshold)
        .map(Some)
        .map_err(|e| e.code().to_string())
}

/// Run every (system, method, step, document) case and aggregate means.
/// Per-document errors are recorded in the report, never raised.
pub fn run_experiment(
    retriever: &Retriever,
    gateway: &Gateway,
    protocol: &Protocol,
    cfg: &ExperimentConfig,
) -> ExperimentReport {
    let doc_cases = protocol.cases();
    let mut cases = Vec::new();
    for system in &cfg.systems {
        for &method in &cfg.methods {
            for &step in &cfg.steps {
                for (doc_id, pool) in &doc_cases {
                    cases.push(Case {
                        system,
                        method,
                        step,
                        doc_id: doc_id.clone(),
                        pool: pool.clone(),
                    });
                }
            }
        }
    }

    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8);
    let chunk = cases.len().div_ceil(workers).max(1);
    let documents: Vec<DocumentRow> = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|batch| {
                s.spawn(move || {
                    batch
                        .iter()
                        .map(|c| evaluate_case(retriever, gateway, cfg, c))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });

    let mut rows = Vec::new();
    for system in &cfg.systems {
        for &method in &cfg.methods {
            for &step in &cfg.steps {
                let docs: Vec<&DocumentRow> = documents
                    .iter()
                    .filter(|d| d.provider == system.label && d.method == method && d.step == step)
                    .collect();
                let failures = docs.iter().filter(|d| d.failed).count();
                for metric in metric_names(step) {
                    let sum: f64 = docs.iter().map(|d| d.metrics[*metric]).sum();
                    rows.push(ReportRow {
                        provider: system.label.clone(),
                        method,
                        step,
                        metric: metric.to_string(),
                        mean: if docs.is_empty() { 0.0 } else { sum / docs.len() as f64 },
                        n: docs.len(),
                        failures,
                    });
                }
            }
        }
    }
    ExperimentReport {
        protocol: protocol.label(),
        config: cfg.clone(),
        rows,
        documents,
    }
}

impl ExperimentReport {
    pub fn mean(&self, provider: &str, method: PromptMode, step: StepKind, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.provider == provider && r.method == method && r.step == step && r.metric == metric)
            .map(|r| r.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("provider,method,step,metric,mean,n,failures\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{}",
                csv_field(&r.provider),
                r.method,
                r.step,
                r.metric,
                r.mean,
                r.n,
                r.failures
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:<12} {:<18} {:<22} {:>8} {:>4} {:>8}\n",
            "provider", "method", "step", "metric", "mean", "n", "failures"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20} {:<12} {:<18} {:<22} {:>8.4} {:>4} {:>8}",
                r.provider,
                r.method.as_str(),
                r.step.as_str(),
                r.metric,
                r.mean,
                r.n,
                r.failures
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rouge_reference_example() {
        let r = rouge1("pump casing and impeller", "the pump casing impeller seal").unwrap();
        assert!((r.recall - 0.6).abs() < 1e-12);
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_edges() {
        let same = rouge1("Moves fluid.", "moves FLUID").unwrap();
        assert_eq!((same.recall, same.precision, same.f1), (1.0, 1.0, 1.0));
        let none = rouge1("alpha beta", "gamma").unwrap();
        assert_eq!((none.recall, none.precision, none.f1), (0.0, 0.0, 0.0));
        assert_eq!(rouge1("", "gamma").unwrap().precision, 0.0);
        assert_eq!(rouge1("x", " ... ").unwrap_err().code(), "EMPTY_REFERENCE");
        // clipping: the candidate repeats "seal" more often than the reference
        let c = rouge1("seal seal seal", "seal pump").unwrap();
        assert_eq!((c.recall, c.precision), (0.5, 1.0 / 3.0));
    }

    #[test]
    fn set_metric_examples() {
        let m = set_metrics(&v(&["a", "b", "c"]), &v(&["b", "c", "d", "e"]), 1.0).unwrap();
        assert_eq!(m.recall, 0.5);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-12);
        let same = set_metrics(&v(&["Seal", "bearing "]), &v(&["bearing", "seal"]), 1.0).unwrap();
        assert_eq!((same.recall, same.precision), (1.0, 1.0));
        let empty = set_metrics(&[], &v(&["seal"]), 1.0).unwrap();
        assert_eq!((empty.recall, empty.precision, empty.f1), (0.0, 0.0, 0.0));
        assert_eq!(set_metrics(&v(&["x"]), &[], 1.0).unwrap_err().code(), "EMPTY_GOLD");
    }

    #[test]
    fn duplicate_predictions_match_once() {
        let m = set_metrics(&v(&["seal", "SEAL"]), &v(&["seal"]), 1.0).unwrap();
        assert_eq!(m.matched_pairs.len(), 1);
        assert_eq!((m.recall, m.precision), (1.0, 0.5));
    }

    #[test]
    fn fuzzy_threshold_prefers_the_closest_gold() {
        let m = set_metrics(&v(&["drive end bearing"]), &v(&["bearing", "drive end bearing"]), 0.3).unwrap();
        assert_eq!(m.matched_pairs, vec![("drive end bearing".to_string(), "drive end bearing".to_string())]);
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}

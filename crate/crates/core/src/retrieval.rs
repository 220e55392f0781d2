//! Example retrieval for dynamic few-shot prompting: rank corpus documents by
//! cosine similarity between the query and each document's input for the
//! same step.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::{cosine, Embedder, EmbeddingError, EmbeddingVector};
use crate::model::{step_content, DocId, FmeaDocument, StepKind};
use crate::prompt::format_example;
use crate::store::{CorpusStore, StoreError};
use crate::text::fnv1a64;

pub const DEFAULT_K: usize = 3;
pub const MAX_K: usize = 10;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("the candidate pool is empty")]
    EmptyPool,
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl RetrievalError {
    pub fn code(&self) -> &'static str {
        match self {
            RetrievalError::EmptyPool => "EMPTY_POOL",
            RetrievalError::InvalidK => "INVALID_K",
            RetrievalError::Embedding(e) => e.code(),
            RetrievalError::Store(e) => e.code(),
        }
    }
}

/// Similarity score of a candidate; randomly chosen shots carry no score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CandidateScore {
    Cosine(f64),
    Unscored,
}

impl CandidateScore {
    pub fn value(self) -> Option<f64> {
        match self {
            CandidateScore::Cosine(v) => Some(v),
            CandidateScore::Unscored => None,
        }
    }
}

impl Serialize for CandidateScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CandidateScore::Cosine(v) => s.serialize_f64(*v),
            CandidateScore::Unscored => s.serialize_str("unscored"),
        }
    }
}

impl<'de> Deserialize<'de> for CandidateScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(CandidateScore::Cosine(v)),
            Raw::Text(t) if t == "unscored" => Ok(CandidateScore::Unscored),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid score `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleCandidate {
    pub doc_id: DocId,
    pub score: CandidateScore,
    pub equipment_name: String,
    pub preview: String,
}

impl ExampleCandidate {
    fn new(doc: &FmeaDocument, score: CandidateScore) -> Self {
        ExampleCandidate {
            doc_id: doc.doc_id.clone(),
            score,
            equipment_name: doc.equipment_name.clone(),
            preview: format!("{}: {}", doc.equipment_name, doc.short_description),
        }
    }
}

/// Text embedded to compare a step's input: the short description for the
/// boundary; otherwise the previous step's description (if any) followed by
/// its items joined with ", ".
pub fn query_text(description: Option<&str>, items: &[String]) -> String {
    let list = items.join(", ");
    match description.map(str::trim).filter(|d| !d.is_empty()) {
        Some(d) if list.is_empty() => d.to_string(),
        Some(d) => format!("{d} {list}"),
        None => list,
    }
}

/// The retrieval text of a document for `step`, built from its own input to
/// that step.
pub fn retrieval_text(doc: &FmeaDocument, step: StepKind) -> String {
    match step.previous() {
        None => doc.short_description.clone(),
        Some(prev) => {
            let c = step_content(doc, prev);
            query_text(c.description.as_deref(), &c.items)
        }
    }
}

/// Sort by descending score, ties by ascending doc_id, and keep the top `k`.
pub fn rank_scored(mut scored: Vec<(DocId, f64)>, k: usize) -> Vec<(DocId, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Seed for one document's random shot, derived from the run seed.
pub fn per_document_seed(run_seed: u64, doc_id: &DocId) -> u64 {
    let mut bytes = run_seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(doc_id.as_str().as_bytes());
    fnv1a64(&bytes)
}

/// Uniform seeded choice from the pool (deduplicated and sorted first).
pub fn random_pick(pool: &[DocId], seed: u64) -> Result<DocId, RetrievalError> {
    let ids: Vec<&DocId> = pool.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    let idx = ChaCha8Rng::seed_from_u64(seed).random_range(0..ids.len());
    Ok(ids[idx].clone())
}

pub struct Retriever {
    store: Arc<CorpusStore>,
    embedder: Arc<dyn Embedder>,
    max_in_flight: usize,
}

impl Retriever {
    pub fn new(store: Arc<CorpusStore>, embedder: Arc<dyn Embedder>) -> Self {
        store.set_embedding_provider(embedder.provider_id(), embedder.dim());
        Retriever {
            store,
            embedder,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn store(&self) -> &Arc<CorpusStore> {
        &self.store
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Embed texts through the store's cache. Misses are embedded in up to
    /// `max_in_flight` concurrent batches; results do not depend on the
    /// batching.
    pub fn embed_all(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        let cache = self.store.embeddings();
        let provider = self.embedder.provider_id();
        let mut missing: Vec<String> = texts
            .iter()
            .filter(|t| cache.get(provider, t).is_none())
            .map(|t| t.trim().to_string())
            .collect();
        missing.sort();
        missing.dedup();
        if !missing.is_empty() {
            let chunk = missing.len().div_ceil(self.max_in_flight);
            let results: Vec<Result<Vec<EmbeddingVector>, EmbeddingError>> = std::thread::scope(|s| {
                let handles: Vec<_> = missing
                    .chunks(chunk)
                    .map(|batch| s.spawn(move || self.embedder.embed_batch(batch)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            let mut vectors = Vec::with_capacity(missing.len());
            for r in results {
                vectors.extend(r?);
            }
            for (text, v) in missing.iter().zip(vectors) {
                cache.insert(text, v);
            }
        }
        texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    return Err(EmbeddingError::EmptyText.into());
                }
                cache
                    .get(provider, t)
                    .ok_or_else(|| EmbeddingError::BadResponse("embedding missing after fetch".into()).into())
            })
            .collect()
    }

    /// Rank `pool` against `query` for `step` and return the top
    /// `min(k, |pool|)`. Documents that cannot serve as an example for the
    /// step (no content for it) are left out.
    pub fn rank_candidates(
        &self,
        step: StepKind,
        query: &str,
        pool: &[DocId],
        k: usize,
    ) -> Result<Vec<ExampleCandidate>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let ids: BTreeSet<&DocId> = pool.iter().collect();
        if ids.is_empty() {
            return Err(RetrievalError::EmptyPool);
        }
        let mut docs = Vec::with_capacity(ids.len());
        for id in ids {
            let doc = self.store.get(id)?;
            if format_example(&doc, step).is_ok() {
                docs.push(doc);
            }
        }
        let mut texts: Vec<String> = docs.iter().map(|d| retrieval_text(d, step)).collect();
        texts.push(query.to_string());
        let mut vectors = self.embed_all(&texts)?;
        let q = vectors.pop().expect("query vector present");
        let mut scored = Vec::with_capacity(docs.len());
        for (doc, v) in docs.iter().zip(&vectors) {
            scored.push((doc.doc_id.clone(), cosine(&q, v)?));
        }
        let by_id: HashMap<&DocId, &FmeaDocument> = docs.iter().map(|d| (&d.doc_id, d)).collect();
        Ok(rank_scored(scored, k)
            .into_iter()
            .map(|(id, s)| ExampleCandidate::new(by_id[&id], CandidateScore::Cosine(s)))
            .collect())
    }

    pub fn random_candidate(&self, pool: &[DocId], seed: u64) -> Result<ExampleCandidate, RetrievalError> {
        let id = random_pick(pool, seed)?;
        Ok(ExampleCandidate::new(&self.store.get(&id)?, CandidateScore::Unscored))
    }
}

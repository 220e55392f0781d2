//! The FMEA library: one JSON file per document plus a manifest, seeded
//! train/validation/test splits and the embedding cache.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! corpus/<doc_id>.json
//! corpus/manifest.json
//! corpus/splits/<seed>.json
//! corpus/embeddings.json
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingCache, EmbeddingVector};
use crate::model::{validate_document, DocId, FmeaDocument, Provenance, Violation};
use crate::text::fnv1a64;

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("document {0} already exists")]
    DuplicateId(DocId),
    #[error("document {doc_id} is invalid ({} violations)", violations.len())]
    InvalidDocument {
        doc_id: DocId,
        violations: Vec<Violation>,
    },
    #[error("document {0} not found")]
    NotFound(DocId),
    #[error("the corpus is empty")]
    EmptyCorpus,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("split for seed {0} not found")]
    SplitNotFound(u64),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::DuplicateId(_) => "DUPLICATE_ID",
            StoreError::InvalidDocument { .. } => "INVALID_DOCUMENT",
            StoreError::NotFound(_) | StoreError::SplitNotFound(_) => "NOT_FOUND",
            StoreError::EmptyCorpus => "EMPTY_CORPUS",
            StoreError::InvalidRatios(_) => "INVALID_RATIOS",
            StoreError::Corrupt { .. } => "CORRUPT",
            StoreError::Io(_) => "IO_ERROR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(SplitPart::Train),
            "validation" | "val" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub train_ids: Vec<DocId>,
    pub validation_ids: Vec<DocId>,
    pub test_ids: Vec<DocId>,
}

impl CorpusSplit {
    pub fn part(&self, part: SplitPart) -> &[DocId] {
        match part {
            SplitPart::Train => &self.train_ids,
            SplitPart::Validation => &self.validation_ids,
            SplitPart::Test => &self.test_ids,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_ids.len(), self.validation_ids.len(), self.test_ids.len())
    }
}

/// Split sizes for `n` documents: train and validation are floored, test
/// takes the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // tolerance keeps products like 0.7 * 10 = 7.000000000000001 on the integer
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let train = floor(ratios.0).min(n);
    let validation = floor(ratios.1).min(n - train);
    (train, validation, n - train - validation)
}

/// Shuffle `ids` (sorted first, so input order never matters) with a seeded
/// permutation and cut by [`split_sizes`].
pub fn split_ids(ids: &[DocId], seed: u64, ratios: (f64, f64, f64)) -> Result<CorpusSplit, StoreError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(StoreError::InvalidRatios(ratios));
    }
    if ids.is_empty() {
        return Err(StoreError::EmptyCorpus);
    }
    let mut shuffled: Vec<DocId> = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, validation, _) = split_sizes(shuffled.len(), ratios);
    let test_ids = shuffled.split_off(train + validation);
    let validation_ids = shuffled.split_off(train);
    Ok(CorpusSplit {
        seed,
        ratios,
        train_ids: shuffled,
        validation_ids,
        test_ids,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDocument {
    pub doc: FmeaDocument,
    /// Embedding of the short description, when cached for the store's
    /// embedding provider.
    pub embedding: Option<EmbeddingVector>,
    pub ingested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    doc_id: DocId,
    hash: String,
    ingested_at: DateTime<Utc>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    documents: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
struct Entry {
    doc: FmeaDocument,
    hash: String,
    ingested_at: DateTime<Utc>,
}

pub enum ListFilter<'a> {
    All,
    Split(&'a CorpusSplit, SplitPart),
    Provenance(Provenance),
}

/// Write through a temporary file and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn content_hash(doc: &FmeaDocument) -> String {
    format!("{:016x}", fnv1a64(doc.to_canonical_json().as_bytes()))
}

/// Corpus store. Reads are concurrent; ingestion is serialized through a
/// single writer guard. Without a root directory the store lives in memory.
#[derive(Debug)]
pub struct CorpusStore {
    root: Option<PathBuf>,
    docs: RwLock<BTreeMap<DocId, Entry>>,
    writer: Mutex<()>,
    embeddings: EmbeddingCache,
    embedding_provider: RwLock<Option<(String, usize)>>,
}

impl CorpusStore {
    pub fn in_memory() -> Self {
        CorpusStore {
            root: None,
            docs: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(()),
            embeddings: EmbeddingCache::default(),
            embedding_provider: RwLock::new(None),
        }
    }

    /// Open (or create) a corpus directory and load every manifest entry.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let manifest_path = root.join("manifest.json");
        let manifest: Manifest = if manifest_path.exists() {
            serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| StoreError::Corrupt {
                path: manifest_path.clone(),
                message: e.to_string(),
            })?
        } else {
            Manifest::default()
        };
        let mut docs = BTreeMap::new();
        for entry in manifest.documents {
            let path = root.join(format!("{}.json", entry.doc_id));
            let text = fs::read_to_string(&path)?;
            let doc = FmeaDocument::from_json(&text).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if content_hash(&doc) != entry.hash {
                return Err(StoreError::Corrupt {
                    path,
                    message: "content hash does not match the manifest".into(),
                });
            }
            docs.insert(
                entry.doc_id,
                Entry {
                    doc,
                    hash: entry.hash,
                    ingested_at: entry.ingested_at,
                },
            );
        }
        let embeddings = EmbeddingCache::load(&root.join("embeddings.json"))?;
        Ok(CorpusStore {
            root: Some(root),
            docs: RwLock::new(docs),
            writer: Mutex::new(()),
            embeddings,
            embedding_provider: RwLock::new(None),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn embeddings(&self) -> &EmbeddingCache {
        &self.embeddings
    }

    /// Provider whose short-description embeddings [`CorpusStore::stored`]
    /// reports, with its dimension.
    pub fn set_embedding_provider(&self, provider_id: &str, dim: usize) {
        *self.embedding_provider.write().expect("store lock") = Some((provider_id.to_string(), dim));
    }

    pub fn save_embeddings(&self) -> Result<(), StoreError> {
        if let Some(root) = &self.root {
            self.embeddings.save(&root.join("embeddings.json"))?;
        }
        Ok(())
    }

    pub fn ingest(&self, doc: FmeaDocument) -> Result<DocId, StoreError> {
        self.ingest_many(vec![doc]).pop().expect("one result per document")
    }

    /// Ingest several documents, rewriting the manifest once at the end.
    /// Each document succeeds or fails on its own.
    pub fn ingest_many(&self, docs: Vec<FmeaDocument>) -> Vec<Result<DocId, StoreError>> {
        let _guard = self.writer.lock().expect("writer lock");
        let results: Vec<_> = docs.into_iter().map(|d| self.insert_one(d)).collect();
        if results.iter().any(Result::is_ok) {
            if let Err(e) = self.write_manifest() {
                let msg = e.to_string();
                return results
                    .into_iter()
                    .map(|r| r.and_then(|_| Err(StoreError::Io(io::Error::other(msg.clone())))))
                    .collect();
            }
        }
        results
    }

    fn insert_one(&self, doc: FmeaDocument) -> Result<DocId, StoreError> {
        let report = validate_document(&doc);
        if !report.is_ok() {
            return Err(StoreError::InvalidDocument {
                doc_id: doc.doc_id.clone(),
                violations: report.violations,
            });
        }
        if self.docs.read().expect("store lock").contains_key(&doc.doc_id) {
            return Err(StoreError::DuplicateId(doc.doc_id));
        }
        let id = doc.doc_id.clone();
        let entry = Entry {
            hash: content_hash(&doc),
            doc,
            ingested_at: Utc::now(),
        };
        if let Some(root) = &self.root {
            write_atomic(
                &root.join(format!("{id}.json")),
                serde_json::to_string_pretty(&entry.doc)
                    .expect("documents always serialize")
                    .as_bytes(),
            )?;
        }
        self.docs.write().expect("store lock").insert(id.clone(), entry);
        Ok(id)
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let manifest = Manifest {
            documents: self
                .docs
                .read()
                .expect("store lock")
                .values()
                .map(|e| ManifestEntry {
                    doc_id: e.doc.doc_id.clone(),
                    hash: e.hash.clone(),
                    ingested_at: e.ingested_at,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&root.join("manifest.json"), json.as_bytes())?;
        Ok(())
    }

    pub fn get(&self, id: &DocId) -> Result<FmeaDocument, StoreError> {
        self.docs
            .read()
            .expect("store lock")
            .get(id)
            .map(|e| e.doc.clone())
            .ok_or_else(|| StoreError::NotFound(id.clone()))
    }

    pub fn stored(&self, id: &DocId) -> Result<StoredDocument, StoreError> {
        let entry = self
            .docs
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.clone()))?;
        let embedding = self
            .embedding_provider
            .read()
            .expect("store lock")
            .as_ref()
            .and_then(|(provider, dim)| {
                self.embeddings
                    .get(provider, &entry.doc.short_description)
                    .filter(|v| v.dim() == *dim)
            });
        Ok(StoredDocument {
            doc: entry.doc,
            embedding,
            ingested_at: entry.ingested_at,
        })
    }

    pub fn contains(&self, id: &DocId) -> bool {
        self.docs.read().expect("store lock").contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.docs.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids matching `filter`, ordered by doc_id.
    pub fn list(&self, filter: ListFilter<'_>) -> Vec<DocId> {
        let docs = self.docs.read().expect("store lock");
        match filter {
            ListFilter::All => docs.keys().cloned().collect(),
            ListFilter::Provenance(p) => docs
                .values()
                .filter(|e| e.doc.provenance == p)
                .map(|e| e.doc.doc_id.clone())
                .collect(),
            ListFilter::Split(split, part) => {
                let wanted: HashSet<&DocId> = split.part(part).iter().collect();
                docs.keys().filter(|id| wanted.contains(id)).cloned().collect()
            }
        }
    }

    pub fn make_split(&self, seed: u64, ratios: (f64, f64, f64)) -> Result<CorpusSplit, StoreError> {
        split_ids(&self.list(ListFilter::All), seed, ratios)
    }

    pub fn save_split(&self, split: &CorpusSplit) -> Result<Option<PathBuf>, StoreError> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let path = root.join("splits").join(format!("{}.json", split.seed));
        let json = serde_json::to_string_pretty(split).expect("splits serialize");
        write_atomic(&path, json.as_bytes())?;
        Ok(Some(path))
    }

    pub fn load_split(&self, seed: u64) -> Result<CorpusSplit, StoreError> {
        let root = self.root.as_ref().ok_or(StoreError::SplitNotFound(seed))?;
        let path = root.join("splits").join(format!("{seed}.json"));
        if !path.exists() {
            return Err(StoreError::SplitNotFound(seed));
        }
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| StoreError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    /// The saved split for `seed`, or a fresh one with default ratios.
    pub fn split_or_default(&self, seed: u64) -> Result<CorpusSplit, StoreError> {
        match self.load_split(seed) {
            Ok(s) => Ok(s),
            Err(StoreError::SplitNotFound(_)) => self.make_split(seed, DEFAULT_RATIOS),
            Err(e) => Err(e),
        }
    }
}

//! Text embeddings and cosine similarity.
//!
//! Two providers are available: the offline `builtin-hash` bag-of-words
//! embedder and a remote HTTP endpoint speaking
//! `{"input": [..]}` -> `{"embeddings": [[..], ..]}`.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::text::{fnv1a64, tokens};

pub const BUILTIN_HASH_ID: &str = "builtin-hash";
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("text is empty")]
    EmptyText,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embeddings from different providers ({left} vs {right}) cannot be compared")]
    ProviderMismatch { left: String, right: String },
    #[error("cosine similarity of an all-zero vector is undefined")]
    ZeroVector,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
}

impl EmbeddingError {
    pub fn code(&self) -> &'static str {
        match self {
            EmbeddingError::EmptyText => "EMPTY_TEXT",
            EmbeddingError::ProviderUnavailable(_) => "PROVIDER_UNAVAILABLE",
            EmbeddingError::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            EmbeddingError::ProviderMismatch { .. } => "PROVIDER_MISMATCH",
            EmbeddingError::ZeroVector => "ZERO_VECTOR",
            EmbeddingError::NonFinite => "NON_FINITE",
            EmbeddingError::BadResponse(_) => "PROVIDER_UNAVAILABLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::BadResponse("zero-length embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(EmbeddingVector {
            values,
            provider_id: provider_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, EmbeddingError> {
        EmbeddingVector::new(self.values.iter().map(|v| v * factor).collect(), self.provider_id.clone())
    }
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.provider_id != b.provider_id {
        return Err(EmbeddingError::ProviderMismatch {
            left: a.provider_id.clone(),
            right: b.provider_id.clone(),
        });
    }
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn provider_id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Embed several texts; output order matches input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop()
            .ok_or_else(|| EmbeddingError::BadResponse("empty batch result".into()))
    }
}

/// Deterministic bag-of-words embedder: every lowercased alphanumeric token
/// adds one to the bucket its FNV-1a hash falls in.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn provider_id(&self) -> &str {
        BUILTIN_HASH_ID
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts
            .iter()
            .map(|text| {
                if text.trim().is_empty() {
                    return Err(EmbeddingError::EmptyText);
                }
                let mut values = vec![0.0; self.dim];
                for t in tokens(text) {
                    values[self.bucket(&t)] += 1.0;
                }
                EmbeddingVector::new(values, BUILTIN_HASH_ID)
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// HTTP embedding endpoint. Texts are trimmed before sending.
#[derive(Debug)]
pub struct RemoteEmbedder {
    provider_id: String,
    url: String,
    token: Option<String>,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, token: Option<String>, dim: usize) -> Self {
        let url = url.into();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteEmbedder {
            provider_id: format!("remote:{url}"),
            url,
            token,
            dim,
            agent,
        }
    }

    /// Configure from `FMEA_EMBED_URL` / `FMEA_EMBED_TOKEN`.
    pub fn from_env(dim: usize) -> Result<Self, EmbeddingError> {
        let url = std::env::var("FMEA_EMBED_URL")
            .map_err(|_| EmbeddingError::ProviderUnavailable("FMEA_EMBED_URL is not set".into()))?;
        Ok(RemoteEmbedder::new(url, std::env::var("FMEA_EMBED_TOKEN").ok(), dim))
    }
}

impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        let input: Vec<String> = texts.iter().map(|t| t.trim().to_string()).collect();
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(EmbedRequest { input: &input })
            .map_err(|e| EmbeddingError::ProviderUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            return Err(EmbeddingError::ProviderUnavailable(format!("HTTP {status}")));
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::BadResponse(e.to_string()))?;
        if body.embeddings.len() != texts.len() {
            return Err(EmbeddingError::BadResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        body.embeddings
            .into_iter()
            .map(|values| {
                if values.len() != self.dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        left: values.len(),
                        right: self.dim,
                    });
                }
                EmbeddingVector::new(values, self.provider_id.clone())
            })
            .collect()
    }
}

/// Cache key: provider id plus a hash of the trimmed text.
pub fn cache_key(provider_id: &str, text: &str) -> (String, u64) {
    (provider_id.to_string(), fnv1a64(text.trim().as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    provider_id: String,
    text_hash: String,
    vector: EmbeddingVector,
}

/// Embeddings keyed by (provider id, text hash). A changed text or provider
/// simply misses.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, u64), EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn get(&self, provider_id: &str, text: &str) -> Option<EmbeddingVector> {
        self.entries
            .read()
            .expect("embedding cache lock")
            .get(&cache_key(provider_id, text))
            .cloned()
    }

    pub fn insert(&self, text: &str, vector: EmbeddingVector) {
        let key = cache_key(vector.provider_id(), text);
        self.entries.write().expect("embedding cache lock").insert(key, vector);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("embedding cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().expect("embedding cache lock").clear();
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let cache = EmbeddingCache::default();
        if !path.exists() {
            return Ok(cache);
        }
        let entries: Vec<CacheEntry> = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
        {
            let mut map = cache.entries.write().expect("embedding cache lock");
            for e in entries {
                if let Ok(hash) = u64::from_str_radix(&e.text_hash, 16) {
                    map.insert((e.provider_id, hash), e.vector);
                }
            }
        }
        Ok(cache)
    }

    /// Written sorted by key so the file is stable across runs.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let map = self.entries.read().expect("embedding cache lock");
        let mut entries: Vec<CacheEntry> = map
            .iter()
            .map(|((provider_id, hash), v)| CacheEntry {
                provider_id: provider_id.clone(),
                text_hash: format!("{hash:016x}"),
                vector: v.clone(),
            })
            .collect();
        entries.sort_by(|a, b| (&a.provider_id, &a.text_hash).cmp(&(&b.provider_id, &b.text_hash)));
        let json = serde_json::to_string(&entries).map_err(io::Error::other)?;
        crate::store::write_atomic(path, json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "test").unwrap()
    }

    #[test]
    fn cosine_reference_values() {
        assert!((cosine(&v(&[3.0, -1.0, 2.0]), &v(&[3.0, -1.0, 2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap_err().code(),
            "DIMENSION_MISMATCH"
        );
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap_err(), EmbeddingError::ZeroVector);
        let other = EmbeddingVector::new(vec![1.0, 0.0], "other").unwrap();
        assert_eq!(cosine(&v(&[1.0, 0.0]), &other).unwrap_err().code(), "PROVIDER_MISMATCH");
        assert_eq!(EmbeddingVector::new(vec![f64::NAN], "x").unwrap_err(), EmbeddingError::NonFinite);
    }

    #[test]
    fn hash_embedder_normalizes() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed("pump").unwrap(), e.embed("pump ").unwrap());
        assert_eq!(e.embed("centrifugal pump").unwrap(), e.embed("pump centrifugal").unwrap());
        assert_eq!(e.embed("Pump, Centrifugal").unwrap(), e.embed("centrifugal pump").unwrap());
        assert_eq!(e.embed("   ").unwrap_err(), EmbeddingError::EmptyText);
        assert_eq!(e.embed("x").unwrap().dim(), DEFAULT_DIM);
    }

    #[test]
    fn hash_embedder_direct_computation() {
        // independent recomputation of the bag-of-words vector
        let e = HashEmbedder::new(16);
        let got = e.embed("Seal seal bearing").unwrap();
        let mut want = vec![0.0; 16];
        for t in ["seal", "seal", "bearing"] {
            want[(fnv1a64(t.as_bytes()) % 16) as usize] += 1.0;
        }
        assert_eq!(got.values(), want.as_slice());
    }

    #[test]
    fn cache_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let e = HashEmbedder::new(8);
        let cache = EmbeddingCache::default();
        cache.insert("pump", e.embed("pump").unwrap());
        cache.save(&path).unwrap();
        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded.get(BUILTIN_HASH_ID, " pump "), Some(e.embed("pump").unwrap()));
        assert_eq!(loaded.get("remote:x", "pump"), None);
        assert_eq!(loaded.get(BUILTIN_HASH_ID, "fan"), None);
    }
}

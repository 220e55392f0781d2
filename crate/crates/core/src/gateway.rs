//! Completion providers behind one interface: a remote HTTP endpoint and
//! three deterministic mocks for offline runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prompt::PromptSpec;
use crate::text::{fnv1a64, normalize};

pub const DEFAULT_PROVIDER_CAP: usize = 4;
pub const DEFAULT_GLOBAL_CAP: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("rendered prompt is empty")]
    EmptyPrompt,
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("provider {provider_id} timed out after {attempts} attempt(s)")]
    Timeout { provider_id: String, attempts: u32 },
    #[error("provider {provider_id} failed after {attempts} attempt(s): {message}")]
    Http {
        provider_id: String,
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::EmptyPrompt => "EMPTY_PROMPT",
            GatewayError::UnknownProvider(_) => "UNKNOWN_PROVIDER",
            GatewayError::Timeout { .. } => "PROVIDER_TIMEOUT",
            GatewayError::Http { .. } => "PROVIDER_HTTP_ERROR",
            GatewayError::InvalidConfig(_) => "INVALID_CONFIG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteHttp,
    MockEchoShot,
    MockLookup,
    MockNoise,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::RemoteHttp => "remote_http",
            ProviderKind::MockEchoShot => "mock_echo_shot",
            ProviderKind::MockLookup => "mock_lookup",
            ProviderKind::MockNoise => "mock_noise",
        }
    }
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ProviderKind::RemoteHttp,
            ProviderKind::MockEchoShot,
            ProviderKind::MockLookup,
            ProviderKind::MockNoise,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown provider kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_tokens: 512,
            temperature: 0.0,
            seed: None,
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub provider_id: String,
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub params: GenerationParams,
    /// Total attempts for a remote call.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Lookup map for `mock_lookup`.
    #[serde(default)]
    pub lookup_path: Option<PathBuf>,
}

fn default_retries() -> u32 {
    2
}
fn default_backoff() -> u64 {
    500
}
fn default_timeout() -> u64 {
    60_000
}

impl fmt::Debug for ProviderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderConfig")
            .field("provider_id", &self.provider_id)
            .field("kind", &self.kind)
            .field("endpoint", &self.endpoint)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .field("params", &self.params)
            .field("retries", &self.retries)
            .field("backoff_base_ms", &self.backoff_base_ms)
            .field("timeout_ms", &self.timeout_ms)
            .field("lookup_path", &self.lookup_path)
            .finish()
    }
}

impl ProviderConfig {
    pub fn new(provider_id: impl Into<String>, kind: ProviderKind) -> Self {
        ProviderConfig {
            provider_id: provider_id.into(),
            kind,
            endpoint: None,
            auth_token: None,
            params: GenerationParams::default(),
            retries: default_retries(),
            backoff_base_ms: default_backoff(),
            timeout_ms: default_timeout(),
            lookup_path: None,
        }
    }

    /// Fill endpoint and token from `FMEA_LLM_URL_<ID>` / `FMEA_LLM_TOKEN_<ID>`
    /// (id uppercased, non-alphanumerics as `_`) when set.
    pub fn apply_env(&mut self) {
        let suffix: String = self
            .provider_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
            .collect();
        if let Ok(url) = std::env::var(format!("FMEA_LLM_URL_{suffix}")) {
            self.endpoint = Some(url);
        }
        if let Ok(token) = std::env::var(format!("FMEA_LLM_TOKEN_{suffix}")) {
            self.auth_token = Some(token);
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(format!("{}: {m}", self.provider_id)));
        if self.provider_id.trim().is_empty() {
            return bad("provider_id is empty");
        }
        if self.params.temperature.is_nan() || self.params.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.params.max_tokens < 1 {
            return bad("max_tokens must be >= 1");
        }
        if self.kind == ProviderKind::RemoteHttp && self.endpoint.is_none() {
            return bad("remote_http needs an endpoint");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub prompt_hash: String,
}

/// 16 hex digits of the FNV-1a hash of the rendered prompt.
pub fn prompt_hash(rendered: &str) -> String {
    format!("{:016x}", fnv1a64(rendered.as_bytes()))
}

pub trait CompletionProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    /// Raw completion text for the prompt.
    fn complete_text(&self, prompt: &PromptSpec) -> Result<String, GatewayError>;
}

/// Returns the output block of the first shot, or empty text without shots.
pub struct EchoShotProvider {
    id: String,
}

impl EchoShotProvider {
    pub fn new(id: impl Into<String>) -> Self {
        EchoShotProvider { id: id.into() }
    }
}

impl CompletionProvider for EchoShotProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete_text(&self, prompt: &PromptSpec) -> Result<String, GatewayError> {
        Ok(prompt.shots.first().map(|s| s.output.clone()).unwrap_or_default())
    }
}

/// Answers from a fixed map keyed by the query input; unmapped inputs get
/// empty text. Keys match exactly first, then after whitespace and case
/// normalization.
pub struct LookupProvider {
    id: String,
    exact: HashMap<String, String>,
    normalized: HashMap<String, String>,
}

impl LookupProvider {
    pub fn new(id: impl Into<String>, map: BTreeMap<String, String>) -> Self {
        let normalized = map.iter().map(|(k, v)| (normalize(k), v.clone())).collect();
        LookupProvider {
            id: id.into(),
            exact: map.into_iter().collect(),
            normalized,
        }
    }

    pub fn from_file(id: impl Into<String>, path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(LookupProvider::new(id, map))
    }
}

impl CompletionProvider for LookupProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete_text(&self, prompt: &PromptSpec) -> Result<String, GatewayError> {
        let q = &prompt.query_input;
        Ok(self
            .exact
            .get(q)
            .or_else(|| self.normalized.get(&normalize(q)))
            .cloned()
            .unwrap_or_default())
    }
}

/// Seeded gibberish that never contains a `### ` header.
pub struct NoiseProvider {
    id: String,
    seed: u64,
}

const NOISE_WORDS: &[&str] = &[
    "lorem", "ipsum", "valve", "perhaps", "quantum", "gear", "blue", "seventeen", "maybe", "flange",
    "the", "of", "and", "rotor", "banana", "#", "-", "##", "output", "spindle",
];

impl NoiseProvider {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        NoiseProvider { id: id.into(), seed }
    }
}

impl CompletionProvider for NoiseProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete_text(&self, prompt: &PromptSpec) -> Result<String, GatewayError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(prompt.rendered.as_bytes()));
        let lines = rng.random_range(1..6);
        let mut out = Vec::with_capacity(lines);
        for _ in 0..lines {
            let words = rng.random_range(1..10);
            let line: Vec<&str> = (0..words)
                .map(|_| NOISE_WORDS[rng.random_range(0..NOISE_WORDS.len())])
                .collect();
            out.push(line.join(" "));
        }
        // "##" followed by "#" could form a header only at line start
        Ok(out
            .into_iter()
            .map(|l| if l.starts_with('#') { format!("x {l}") } else { l })
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct CompletionReply {
    text: String,
}

enum Attempt {
    Retryable(GatewayError),
    Fatal(GatewayError),
}

/// Minimal completion POST with retries and exponential backoff.
pub struct RemoteProvider {
    cfg: ProviderConfig,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteProvider { cfg, agent })
    }

    fn attempt(&self, prompt: &str, attempts: u32) -> Result<String, Attempt> {
        let id = &self.cfg.provider_id;
        let endpoint = self.cfg.endpoint.as_deref().unwrap_or_default();
        let mut req = self.agent.post(endpoint);
        if let Some(token) = &self.cfg.auth_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let body = CompletionRequest {
            prompt,
            max_tokens: self.cfg.params.max_tokens,
            temperature: self.cfg.params.temperature,
            seed: self.cfg.params.seed,
        };
        let http = |status: Option<u16>, message: String| GatewayError::Http {
            provider_id: id.clone(),
            attempts,
            status,
            message,
        };
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(Attempt::Retryable(GatewayError::Timeout {
                    provider_id: id.clone(),
                    attempts,
                }))
            }
            Err(e) => return Err(Attempt::Retryable(http(None, e.to_string()))),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retryable(http(Some(status), format!("HTTP {status}"))));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(http(Some(status), format!("HTTP {status}"))));
        }
        match resp.body_mut().read_json::<CompletionReply>() {
            Ok(r) => Ok(r.text),
            Err(ureq::Error::Timeout(_)) => Err(Attempt::Retryable(GatewayError::Timeout {
                provider_id: id.clone(),
                attempts,
            })),
            Err(e) => Err(Attempt::Fatal(http(Some(status), format!("malformed reply: {e}")))),
        }
    }
}

impl CompletionProvider for RemoteProvider {
    fn provider_id(&self) -> &str {
        &self.cfg.provider_id
    }

    fn complete_text(&self, prompt: &PromptSpec) -> Result<String, GatewayError> {
        let max = self.cfg.retries.max(1);
        let mut delay = Duration::from_millis(self.cfg.backoff_base_ms);
        let mut attempt = 1;
        loop {
            match self.attempt(&prompt.rendered, attempt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) if attempt >= max => return Err(e),
                Err(Attempt::Retryable(e)) => {
                    tracing::warn!(provider = %self.cfg.provider_id, attempt, error = %e, "retrying completion");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

/// Build the provider a config describes.
pub fn provider_from_config(cfg: &ProviderConfig) -> Result<Arc<dyn CompletionProvider>, GatewayError> {
    cfg.validate()?;
    let id = cfg.provider_id.clone();
    Ok(match cfg.kind {
        ProviderKind::RemoteHttp => Arc::new(RemoteProvider::new(cfg.clone())?),
        ProviderKind::MockEchoShot => Arc::new(EchoShotProvider::new(id)),
        ProviderKind::MockNoise => Arc::new(NoiseProvider::new(id, cfg.params.seed.unwrap_or(0))),
        ProviderKind::MockLookup => match &cfg.lookup_path {
            Some(path) => Arc::new(LookupProvider::from_file(id, path)?),
            None => Arc::new(LookupProvider::new(id, BTreeMap::new())),
        },
    })
}

/// Counting semaphore.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Registry of providers with per-provider and global in-flight caps.
pub struct Gateway {
    providers: BTreeMap<String, (Arc<dyn CompletionProvider>, Arc<Permits>)>,
    global: Permits,
    provider_cap: usize,
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(DEFAULT_PROVIDER_CAP, DEFAULT_GLOBAL_CAP)
    }
}

impl Gateway {
    pub fn new(provider_cap: usize, global_cap: usize) -> Self {
        Gateway {
            providers: BTreeMap::new(),
            global: Permits::new(global_cap),
            provider_cap,
        }
    }

    pub fn register(&mut self, provider: Arc<dyn CompletionProvider>) {
        let id = provider.provider_id().to_string();
        self.providers
            .insert(id, (provider, Arc::new(Permits::new(self.provider_cap))));
    }

    pub fn from_configs(configs: &[ProviderConfig]) -> Result<Self, GatewayError> {
        let mut g = Gateway::default();
        for cfg in configs {
            if g.contains(&cfg.provider_id) {
                return Err(GatewayError::InvalidConfig(format!(
                    "duplicate provider id `{}`",
                    cfg.provider_id
                )));
            }
            g.register(provider_from_config(cfg)?);
        }
        Ok(g)
    }

    pub fn contains(&self, provider_id: &str) -> bool {
        self.providers.contains_key(provider_id)
    }

    pub fn provider_ids(&self) -> Vec<String> {
        self.providers.keys().cloned().collect()
    }

    pub fn complete(&self, prompt: &PromptSpec, provider_id: &str) -> Result<LlmResponse, GatewayError> {
        if prompt.rendered.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let (provider, permits) = self
            .providers
            .get(provider_id)
            .ok_or_else(|| GatewayError::UnknownProvider(provider_id.to_string()))?;
        // provider permit first, then global: one fixed order for every caller
        let _p = permits.acquire();
        let _g = self.global.acquire();
        let started = Instant::now();
        let text = provider.complete_text(prompt)?;
        Ok(LlmResponse {
            text,
            provider_id: provider_id.to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            prompt_hash: prompt_hash(&prompt.rendered),
        })
    }
}

//! Settings resolution. Precedence, highest first: command-line flags,
//! environment variables, the TOML config file, built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use fmea_core::ensemble::{DEFAULT_FUZZY_THRESHOLD, DEFAULT_VOTE_THRESHOLD};
use fmea_core::gateway::ProviderConfig;
use fmea_core::retrieval::DEFAULT_K;

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_CORPUS_DIR: &str = "corpus";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    /// `builtin-hash` or `remote`.
    pub provider: Option<String>,
    pub dim: Option<usize>,
    pub url: Option<String>,
    pub token: Option<String>,
}

/// Contents of the config file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus_dir: Option<PathBuf>,
    pub sessions_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub lookup_path: Option<PathBuf>,
    pub port: Option<u16>,
    pub seed: Option<u64>,
    pub k_shots: Option<usize>,
    pub vote_threshold: Option<f64>,
    pub fuzzy_threshold: Option<f64>,
    pub match_threshold: Option<f64>,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingChoice {
    BuiltinHash { dim: usize },
    Remote { url: String, token: Option<String>, dim: usize },
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub corpus_dir: PathBuf,
    pub sessions_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub lookup_path: Option<PathBuf>,
    pub port: u16,
    pub seed: u64,
    pub k_shots: usize,
    pub vote_threshold: f64,
    pub fuzzy_threshold: f64,
    pub match_threshold: f64,
    pub embedding: EmbeddingChoice,
    pub providers: Vec<ProviderConfig>,
}

/// Values given by flags or their environment variables (clap folds the two).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub seed: Option<u64>,
    pub k_shots: Option<usize>,
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

impl Settings {
    pub fn resolve(file: FileConfig, flags: Overrides) -> anyhow::Result<Self> {
        let corpus_dir = flags
            .corpus_dir
            .or(file.corpus_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CORPUS_DIR));
        let sessions_dir = env_var("FMEA_SESSIONS_DIR")
            .map(PathBuf::from)
            .or(file.sessions_dir)
            .unwrap_or_else(|| corpus_dir.join("sessions"));
        let ui_dir = env_var("FMEA_UI_DIR").map(PathBuf::from).or(file.ui_dir);
        let lookup_path = file.lookup_path.or_else(|| {
            let p = fmea_core::fixtures::default_fixture_dir().join("lookup.json");
            p.exists().then_some(p)
        });

        let dim = file.embedding.dim.unwrap_or(fmea_core::embedding::DEFAULT_DIM);
        let embedding = match file.embedding.provider.as_deref().unwrap_or("builtin-hash") {
            "builtin-hash" => EmbeddingChoice::BuiltinHash { dim },
            "remote" => {
                let url = env_var("FMEA_EMBED_URL")
                    .or(file.embedding.url)
                    .context("remote embedding needs `embedding.url` or FMEA_EMBED_URL")?;
                let token = env_var("FMEA_EMBED_TOKEN").or(file.embedding.token);
                EmbeddingChoice::Remote { url, token, dim }
            }
            other => bail!("unknown embedding provider `{other}` (expected builtin-hash or remote)"),
        };

        let mut providers = file.providers;
        for p in &mut providers {
            p.apply_env();
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &providers {
            if !seen.insert(p.provider_id.as_str()) {
                bail!("provider id `{}` is configured twice", p.provider_id);
            }
        }

        let settings = Settings {
            corpus_dir,
            sessions_dir,
            ui_dir,
            lookup_path,
            port: flags.port.or(file.port).unwrap_or(fmea_server::DEFAULT_PORT),
            seed: flags.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            k_shots: flags.k_shots.or(file.k_shots).unwrap_or(DEFAULT_K),
            vote_threshold: file.vote_threshold.unwrap_or(DEFAULT_VOTE_THRESHOLD),
            fuzzy_threshold: file.fuzzy_threshold.unwrap_or(DEFAULT_FUZZY_THRESHOLD),
            match_threshold: file.match_threshold.unwrap_or(1.0),
            embedding,
            providers,
        };
        settings.check()?;
        Ok(settings)
    }

    fn check(&self) -> anyhow::Result<()> {
        if !(1..=fmea_core::retrieval::MAX_K).contains(&self.k_shots) {
            bail!("k_shots must be between 1 and {}", fmea_core::retrieval::MAX_K);
        }
        for (name, v) in [
            ("vote_threshold", self.vote_threshold),
            ("fuzzy_threshold", self.fuzzy_threshold),
            ("match_threshold", self.match_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) || (name == "vote_threshold" && v == 0.0) {
                bail!("{name} must be in (0, 1], got {v}");
            }
        }
        if let Some(ui) = &self.ui_dir {
            if !ui.is_dir() {
                bail!("ui_dir {} is not a directory", ui.display());
            }
        }
        Ok(())
    }
}

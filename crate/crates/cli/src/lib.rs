//! Wiring shared by the `fmea` binary and its tests: opening the corpus,
//! building providers and the workflow service, and the subcommand bodies.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};

use fmea_core::embedding::{Embedder, HashEmbedder, RemoteEmbedder};
use fmea_core::eval::{run_experiment, EvalSystem, ExperimentConfig, ExperimentReport, Protocol};
use fmea_core::gateway::{provider_from_config, ProviderConfig, ProviderKind};
use fmea_core::model::FmeaDocument;
use fmea_core::retrieval::retrieval_text;
use fmea_core::store::StoreError;
use fmea_core::{
    CorpusSplit, CorpusStore, EnsembleConfig, Gateway, PromptMode, Retriever, SplitPart, StepKind, WorkflowService,
    WorkflowSettings,
};

use config::{EmbeddingChoice, Settings};

pub fn open_store(settings: &Settings) -> anyhow::Result<Arc<CorpusStore>> {
    let store = CorpusStore::open(&settings.corpus_dir)
        .with_context(|| format!("cannot open corpus directory {}", settings.corpus_dir.display()))?;
    Ok(Arc::new(store))
}

pub fn embedder(settings: &Settings) -> Arc<dyn Embedder> {
    match &settings.embedding {
        EmbeddingChoice::BuiltinHash { dim } => Arc::new(HashEmbedder::new(*dim)),
        EmbeddingChoice::Remote { url, token, dim } => Arc::new(RemoteEmbedder::new(url.clone(), token.clone(), *dim)),
    }
}

pub fn retriever(settings: &Settings, store: Arc<CorpusStore>) -> Retriever {
    let embedder = embedder(settings);
    store.set_embedding_provider(embedder.provider_id(), embedder.dim());
    Retriever::new(store, embedder)
}

/// The three mock providers, unless the config file defines those ids
/// itself, followed by every configured provider.
pub fn provider_configs(settings: &Settings) -> Vec<ProviderConfig> {
    let mut configs: Vec<ProviderConfig> = [ProviderKind::MockEchoShot, ProviderKind::MockLookup, ProviderKind::MockNoise]
        .into_iter()
        .filter(|k| !settings.providers.iter().any(|p| p.provider_id == k.as_str()))
        .map(|k| {
            let mut c = ProviderConfig::new(k.as_str(), k);
            if k == ProviderKind::MockLookup {
                c.lookup_path = settings.lookup_path.clone();
            }
            if k == ProviderKind::MockNoise {
                c.params.seed = Some(settings.seed);
            }
            c
        })
        .collect();
    configs.extend(settings.providers.iter().cloned());
    configs
}

pub fn gateway(settings: &Settings) -> anyhow::Result<Gateway> {
    let mut g = Gateway::default();
    for cfg in provider_configs(settings) {
        let provider = provider_from_config(&cfg).with_context(|| format!("provider `{}`", cfg.provider_id))?;
        g.register(provider);
    }
    Ok(g)
}

pub fn split_for(store: &CorpusStore, seed: u64) -> anyhow::Result<CorpusSplit> {
    match store.split_or_default(seed) {
        Ok(s) => Ok(s),
        Err(StoreError::EmptyCorpus) => bail!("the corpus is empty; run `fmea ingest <dir>` first"),
        Err(e) => Err(e.into()),
    }
}

pub fn workflow_service(settings: &Settings) -> anyhow::Result<WorkflowService> {
    let store = open_store(settings)?;
    let training = split_for(&store, settings.seed)?.train_ids;
    let retriever = retriever(settings, store);
    let mut ensemble = EnsembleConfig::single(ProviderKind::MockEchoShot.as_str());
    ensemble.vote_threshold = settings.vote_threshold;
    ensemble.fuzzy_threshold = settings.fuzzy_threshold;
    Ok(WorkflowService::new(
        Arc::new(retriever),
        Arc::new(gateway(settings)?),
        WorkflowSettings {
            training_ids: training,
            default_ensemble: ensemble,
            sessions_dir: Some(settings.sessions_dir.clone()),
        },
    ))
}

/// `*.json` files in `dir`, or in `dir/corpus` when `dir` holds none.
fn document_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let list = |d: &Path| -> anyhow::Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)
            .with_context(|| format!("cannot read {}", d.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut files = list(dir)?;
    files.retain(|p| p.file_name().is_some_and(|n| n != "lookup.json" && n != "manifest.json"));
    if files.is_empty() && dir.join("corpus").is_dir() {
        files = list(&dir.join("corpus"))?;
    }
    Ok(files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSummary {
    pub new: usize,
    pub skipped: usize,
}

/// Ingest every document under `dir`. All files are parsed first, so a bad
/// file stops the run before anything is written. Ids already present are
/// skipped.
pub fn ingest_dir(store: &CorpusStore, dir: &Path) -> anyhow::Result<IngestSummary> {
    let files = document_files(dir)?;
    if files.is_empty() {
        bail!("no *.json documents found in {}", dir.display());
    }
    let mut docs = Vec::with_capacity(files.len());
    for path in &files {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let doc = FmeaDocument::from_json(&text).with_context(|| format!("{} is not a valid document", path.display()))?;
        let report = fmea_core::model::validate_document(&doc);
        if !report.is_ok() {
            let codes: Vec<&str> = report.violations.iter().map(|v| v.code.as_str()).collect();
            bail!("{} fails validation: {}", path.display(), codes.join(", "));
        }
        docs.push(doc);
    }
    let mut summary = IngestSummary { new: 0, skipped: 0 };
    for result in store.ingest_many(docs) {
        match result {
            Ok(_) => summary.new += 1,
            Err(StoreError::DuplicateId(_)) => summary.skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(summary)
}

pub fn parse_ratios(s: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad ratio `{p}`")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("--ratios takes three comma-separated numbers, e.g. 0.8,0.1,0.1"),
    }
}

pub struct EvalArgs {
    pub steps: Vec<StepKind>,
    pub methods: Vec<PromptMode>,
    pub providers: Vec<String>,
    pub part: SplitPart,
    pub k: usize,
    pub seed: u64,
}

pub fn eval(settings: &Settings, args: &EvalArgs) -> anyhow::Result<ExperimentReport> {
    let store = open_store(settings)?;
    let split = split_for(&store, args.seed)?;
    let gateway = gateway(settings)?;
    for p in &args.providers {
        if !gateway.contains(p) {
            bail!("unknown provider `{p}` (known: {})", gateway.provider_ids().join(", "));
        }
    }
    let retriever = retriever(settings, store);
    let cfg = ExperimentConfig {
        systems: args.providers.iter().map(|p| EvalSystem::provider(p)).collect(),
        methods: args.methods.clone(),
        steps: args.steps.clone(),
        k_shots: args.k,
        seed: args.seed,
        match_threshold: settings.match_threshold,
    };
    let report = run_experiment(&retriever, &gateway, &Protocol::Split { split, part: args.part }, &cfg);
    retriever.store().save_embeddings()?;
    Ok(report)
}

/// Write `report.csv` and `report.json` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let csv = dir.join("report.csv");
    let json = dir.join("report.json");
    fs::write(&csv, report.to_csv())?;
    fs::write(&json, report.to_json())?;
    Ok((csv, json))
}

/// Embed every retrieval text in the corpus and persist the cache. With
/// `rebuild`, cached vectors are dropped first.
pub fn embed(settings: &Settings, rebuild: bool) -> anyhow::Result<usize> {
    let store = open_store(settings)?;
    if rebuild {
        store.embeddings().clear();
    }
    let retriever = retriever(settings, store.clone());
    let mut texts = Vec::new();
    for id in store.list(fmea_core::store::ListFilter::All) {
        let doc = store.get(&id)?;
        texts.push(doc.short_description.clone());
        for step in StepKind::ALL {
            if fmea_core::prompt::format_example(&doc, step).is_ok() {
                texts.push(retrieval_text(&doc, step));
            }
        }
    }
    texts.retain(|t| !t.trim().is_empty());
    texts.sort();
    texts.dedup();
    retriever.embed_all(&texts)?;
    store.save_embeddings()?;
    Ok(texts.len())
}

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};

use fmea_cli::config::{FileConfig, Overrides, Settings};
use fmea_cli::EvalArgs;
use fmea_core::{PromptMode, SplitPart, StepKind};

/// Supervised FMEA generation: corpus management, experiments and the
/// review service.
///
/// Settings come from flags, then environment variables, then the config
/// file, then built-in defaults.
#[derive(Parser)]
#[command(name = "fmea", version)]
struct Cli {
    /// Corpus directory.
    #[arg(long, global = true, env = "FMEA_CORPUS_DIR")]
    corpus_dir: Option<PathBuf>,

    /// TOML config file.
    #[arg(long, global = true, env = "FMEA_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest every *.json document in a directory (or its corpus/ subdirectory).
    Ingest {
        dir: PathBuf,
    },
    /// Split the corpus into train/validation/test and save the split.
    Split {
        #[arg(long, env = "FMEA_SEED")]
        seed: Option<u64>,
        /// Train,validation,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
    },
    /// Score generation methods on one part of the split.
    Eval {
        /// Step kinds, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        step: Vec<StepKind>,
        /// zero_shot, random_shot or dfsp; comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        method: Vec<PromptMode>,
        /// Provider ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        provider: Vec<String>,
        /// train, validation or test.
        #[arg(long)]
        split: SplitPart,
        /// Shots per prompt.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, env = "FMEA_SEED")]
        seed: Option<u64>,
        /// Directory for report.csv and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "FMEA_PORT")]
        port: Option<u16>,
    },
    /// Compute and cache embeddings for the corpus.
    Embed {
        /// Drop cached vectors first.
        #[arg(long)]
        rebuild: bool,
    },
}

fn settings(cli: &Cli, overrides: Overrides) -> anyhow::Result<Settings> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    Settings::resolve(
        file,
        Overrides {
            corpus_dir: cli.corpus_dir.clone(),
            ..overrides
        },
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest { dir } => {
            let s = settings(&cli, Overrides::default())?;
            let store = fmea_cli::open_store(&s)?;
            let summary = fmea_cli::ingest_dir(&store, dir)?;
            println!("{} new, {} skipped", summary.new, summary.skipped);
        }
        Command::Split { seed, ratios } => {
            let s = settings(
                &cli,
                Overrides {
                    seed: *seed,
                    ..Default::default()
                },
            )?;
            let store = fmea_cli::open_store(&s)?;
            let split = store.make_split(s.seed, fmea_cli::parse_ratios(ratios)?)?;
            store.save_split(&split)?;
            let (train, validation, test) = split.sizes();
            println!("train={train} validation={validation} test={test}");
        }
        Command::Eval {
            step,
            method,
            provider,
            split,
            k,
            seed,
            out,
        } => {
            let s = settings(
                &cli,
                Overrides {
                    seed: *seed,
                    k_shots: *k,
                    ..Default::default()
                },
            )?;
            let args = EvalArgs {
                steps: step.clone(),
                methods: method.clone(),
                providers: provider.clone(),
                part: *split,
                k: s.k_shots,
                seed: s.seed,
            };
            let report = fmea_cli::eval(&s, &args)?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                let (csv, json) = fmea_cli::write_report(&report, dir)?;
                eprintln!("wrote {} and {}", csv.display(), json.display());
            }
        }
        Command::Serve { port } => {
            let s = settings(
                &cli,
                Overrides {
                    port: *port,
                    ..Default::default()
                },
            )?;
            let service = fmea_cli::workflow_service(&s)?;
            let router = fmea_server::router(Arc::new(service), s.ui_dir.clone());
            let addr = SocketAddr::from(([0, 0, 0, 0], s.port));
            let rt = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
            rt.block_on(fmea_server::serve(router, addr))
                .with_context(|| format!("cannot serve on {addr}"))?;
        }
        Command::Embed { rebuild } => {
            let s = settings(&cli, Overrides::default())?;
            let n = fmea_cli::embed(&s, *rebuild)?;
            println!("{n} texts embedded");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line front end. Exit codes: 0 success, 2 input or configuration
//! error, 3 backend failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backend::cache::ResponseCache;
use crate::backend::embed::{Embedder, EmbedderSpec, HashEmbedder, RemoteEmbedder};
use crate::backend::prompts::PromptSet;
use crate::backend::remote::{RemoteClient, RemoteConfig, RemoteProvider, DEFAULT_MAX_PARALLEL};
use crate::backend::{AnswerMode, Gateway};
use crate::engine::{build, BuildOptions, Memory, RetrieveOptions, RunManifest};
use crate::error::{BackendError, Error, Result};
use crate::eval::loader::load_corpus;
use crate::eval::{run_qa_eval, run_retrieval_eval, table, value_label, ContainmentJudge, EvalOptions, Judge, RemoteJudge};
use crate::model::{validate_config, PipelineConfig, Query};
use crate::synthetic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const DEFAULT_MOCK_DIMENSION: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "dialmem", version, about = "Build, query and evaluate conversational memory indexes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an index over a corpus under one pipeline config.
    Build(BuildArgs),
    /// Retrieve values for a query from a built index.
    Retrieve(RetrieveArgs),
    /// Evaluate retrieval (and optionally answers) against benchmark questions.
    Eval(EvalArgs),
    /// Print counts, call statistics and timings from an index manifest.
    Stats(StatsArgs),
    /// Write a seeded synthetic corpus in the native format.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus name used in canonical session ids (default: file stem).
    #[arg(long)]
    pub corpus_name: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_PARALLEL)]
    pub max_parallel: usize,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    pub index: PathBuf,
    pub query: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Print seeds, expansions and ranked keys before the values.
    #[arg(long)]
    pub trace: bool,
    /// Print the trace as one JSON document instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeKind {
    Containment,
    Remote,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub index: PathBuf,
    pub questions: PathBuf,
    #[arg(long)]
    pub corpus_name: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Generate answers and judge them.
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
    #[arg(long, value_enum, default_value_t = AnswerMode::ChainOfNote)]
    pub answer_mode: AnswerMode,
    /// Evaluate only the first N questions.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output directory for report.json and table.tsv (default: <index>/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_PARALLEL)]
    pub max_parallel: usize,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub index: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Benchmark,
    Maintenance,
    Random,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Session count for the random generator.
    #[arg(long, default_value_t = 500)]
    pub sessions: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Remote,
}

/// The optional `[backend]` table of a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSettings {
    #[serde(default)]
    pub provider: ProviderKind,
    /// Hash-embedding dimension for the mock provider.
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub chat_model: Option<String>,
    #[serde(default)]
    pub embed_model: Option<String>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

/// Reads a pipeline config plus its optional `[backend]` table.
pub fn read_config(path: &Path) -> Result<(PipelineConfig, BackendSettings)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&raw).map_err(|e| match e {
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_config(raw: &str) -> Result<(PipelineConfig, BackendSettings)> {
    let mut table: toml::Table = toml::from_str(raw).map_err(|e| Error::Input(format!("config: {e}")))?;
    let backend = match table.remove("backend") {
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Input(format!("[backend]: {e}")))?,
        None => BackendSettings::default(),
    };
    let config = PipelineConfig::deserialize(toml::Value::Table(table))
        .map_err(|e: toml::de::Error| Error::Input(format!("config: {e}")))?;
    Ok((config, backend))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Backend(BackendError::Config(_)) => EXIT_INPUT,
        Error::Backend(_) => EXIT_BACKEND,
        _ => EXIT_INPUT,
    }
}

/// Cache directory: flag, then config, then `DIALMEM_CACHE_DIR`, then a
/// `.dialmem-cache` directory next to `anchor`.
fn cache_dir(flag: Option<&Path>, settings: Option<&Path>, anchor: &Path) -> PathBuf {
    if let Some(p) = flag.or(settings) {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("DIALMEM_CACHE_DIR").filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    let parent = anchor
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    parent.join(".dialmem-cache")
}

struct Backends {
    gateway: Gateway,
    embedder: Arc<dyn Embedder>,
    client: Option<Arc<RemoteClient>>,
}

fn remote_client(settings: &BackendSettings, max_parallel: usize) -> Result<Arc<RemoteClient>> {
    let mut config = RemoteConfig::from_env()?;
    if let Some(m) = &settings.chat_model {
        config.chat_model = m.clone();
    }
    if let Some(m) = &settings.embed_model {
        config.embed_model = m.clone();
    }
    if let Some(u) = &settings.base_url {
        config.base_url = u.clone();
    }
    config.max_parallel = max_parallel.max(1);
    Ok(Arc::new(RemoteClient::new(config)))
}

fn make_backends(settings: &BackendSettings, cache: Arc<ResponseCache>, max_parallel: usize) -> Result<Backends> {
    match settings.provider {
        ProviderKind::Mock => {
            let dim = settings.dimension.unwrap_or(DEFAULT_MOCK_DIMENSION);
            Ok(Backends {
                gateway: Gateway::mock(dim).with_cache(cache),
                embedder: Arc::new(HashEmbedder::new(dim)),
                client: None,
            })
        }
        ProviderKind::Remote => {
            let client = remote_client(settings, max_parallel)?;
            let prompts = match &settings.prompts_dir {
                Some(dir) => PromptSet::with_overrides(dir)?,
                None => PromptSet::default(),
            };
            let spec = EmbedderSpec {
                name: client.config().embed_model.clone(),
                dimension: client.config().embed_dimension,
                kind: crate::backend::embed::EmbedderKind::Remote,
            };
            Ok(Backends {
                gateway: Gateway::new(Box::new(RemoteProvider::new(client.clone(), prompts)))
                    .with_cache(cache.clone()),
                embedder: Arc::new(RemoteEmbedder::new(spec, client.clone(), Some(cache))),
                client: Some(client),
            })
        }
    }
}

/// Backends matching a built index, recovered from its manifest.
fn backends_for_index(manifest: &RunManifest, cache: Arc<ResponseCache>, max_parallel: usize) -> Result<Backends> {
    let settings = if manifest.backend.provider == "mock" {
        BackendSettings {
            dimension: Some(manifest.backend.embedder.dimension),
            ..Default::default()
        }
    } else {
        BackendSettings {
            provider: ProviderKind::Remote,
            chat_model: Some(manifest.backend.model.clone()),
            embed_model: Some(manifest.backend.embedder.name.clone()),
            ..Default::default()
        }
    };
    make_backends(&settings, cache, max_parallel)
}

/// Exclusive marker for one build per output directory.
struct BuildLock {
    path: PathBuf,
}

impl BuildLock {
    fn acquire(out: &Path) -> Result<Self> {
        let path = sibling(out, ".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(BuildLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "another build holds {}; remove it if no build is running",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for BuildLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn cmd_build(args: &BuildArgs) -> Result<()> {
    let (config, settings) = read_config(&args.config)?;
    let validation = validate_config(&config);
    for w in validation.warnings() {
        log::warn!("config: {}", w.message);
    }
    validation.into_result()?;
    let corpus = load_corpus(&args.corpus, args.corpus_name.as_deref())?;
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let _lock = BuildLock::acquire(&args.out)?;
    let cache = Arc::new(ResponseCache::open(cache_dir(
        args.cache_dir.as_deref(),
        settings.cache_dir.as_deref(),
        &args.out,
    ))?);
    let backends = make_backends(&settings, cache, args.max_parallel)?;

    let staging = sibling(&args.out, ".staging");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = (|| -> Result<RunManifest> {
        let started = Instant::now();
        let options = BuildOptions {
            max_parallel: args.max_parallel,
        };
        let (memory, report) = build(&corpus, &config, &backends.gateway, backends.embedder.clone(), options)?;
        memory.save(&staging)?;
        let manifest = RunManifest::new(
            &corpus,
            &config,
            &backends.gateway,
            backends.embedder.as_ref(),
            &memory,
            &report,
            started.elapsed().as_millis() as u64,
        );
        manifest.write(&staging)?;
        Ok(manifest)
    })();
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if args.out.exists() {
        fs::remove_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    }
    fs::rename(&staging, &args.out).map_err(|e| Error::io(&args.out, e))?;
    let c = &manifest.counters;
    println!("built {} in {}", manifest.fingerprint, args.out.display());
    println!(
        "sessions: {} (extracted {}, skipped {}), keys: {}, nodes: {}, edges: {}",
        manifest.counts.sessions,
        c.sessions_extracted,
        c.sessions_skipped,
        manifest.counts.keys,
        manifest.counts.nodes,
        manifest.counts.edges
    );
    println!("backend calls: {}, cache hits: {}", c.calls.total_calls(), c.cache_hits);
    Ok(())
}

fn load_memory(index: &Path) -> Result<(RunManifest, Memory)> {
    let manifest = RunManifest::read(index)?;
    let client = if manifest.backend.provider == "mock" {
        None
    } else {
        Some(remote_client(&BackendSettings::default(), DEFAULT_MAX_PARALLEL)?)
    };
    let memory = Memory::load(index, client)?;
    Ok((manifest, memory))
}

pub fn cmd_retrieve(args: &RetrieveArgs) -> Result<()> {
    if args.k == Some(0) || args.n == Some(0) {
        return Err(Error::Input("--k and --n must be positive".into()));
    }
    let (_, memory) = load_memory(&args.index)?;
    let query = Query::new(args.query.clone())?;
    let options = RetrieveOptions {
        k_keys: args.k,
        n_values: args.n,
        haystack: None,
    };
    let trace = memory.retrieve(&query, options)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&trace).expect("serializes"));
        return Ok(());
    }
    if args.trace {
        if let Some(act) = &trace.activation {
            for (id, score) in &act.seeds {
                println!("seed\t{id}\t{score:.6}");
            }
            for (id, score) in &act.expanded {
                println!("expanded\t{id}\t{score:.6}");
            }
        }
        for (id, score) in &trace.ranked_keys {
            println!("key\t{id}\t{score:.6}");
        }
    }
    for (i, v) in trace.values.iter().enumerate() {
        match &v.rank {
            Some(r) => {
                let s = r.score_s.map_or_else(|| "-".into(), |s| format!("{s:.6}"));
                println!(
                    "{}\t{}\tscore_e={:.6}\tscore_g={}\tscore_s={s}",
                    i + 1,
                    v.value.payload,
                    r.score_e,
                    r.score_g
                );
            }
            None => println!("{}\t{}\t{:.6}", i + 1, v.value.payload, v.score),
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.k == Some(0) || args.n == Some(0) {
        return Err(Error::Input("--k and --n must be positive".into()));
    }
    let (manifest, memory) = load_memory(&args.index)?;
    let corpus = load_corpus(&args.questions, args.corpus_name.as_deref())?;
    let mut questions = corpus.questions.clone();
    if let Some(limit) = args.limit {
        questions.truncate(limit);
    }
    let options = EvalOptions {
        k_keys: args.k,
        n_values: args.n,
        max_parallel: Some(args.max_parallel),
    };
    let started = Instant::now();
    let report = match args.judge {
        None => run_retrieval_eval(&memory, &questions, &corpus.name, options)?,
        Some(kind) => {
            let cache = Arc::new(ResponseCache::open(cache_dir(args.cache_dir.as_deref(), None, &args.index))?);
            let backends = backends_for_index(&manifest, cache, args.max_parallel)?;
            let judge: Box<dyn Judge> = match kind {
                JudgeKind::Containment => Box::new(ContainmentJudge),
                JudgeKind::Remote => {
                    let client = match backends.client.clone() {
                        Some(c) => c,
                        None => remote_client(&BackendSettings::default(), args.max_parallel)?,
                    };
                    Box::new(RemoteJudge::new(client, None))
                }
            };
            run_qa_eval(
                &memory,
                &questions,
                &corpus.name,
                &backends.gateway,
                judge.as_ref(),
                args.answer_mode,
                options,
            )?
        }
    };
    let elapsed = started.elapsed();
    report.validate()?;
    let out = args.out.clone().unwrap_or_else(|| args.index.join("eval"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report.write(&out.join("report.json"))?;
    let tsv = table(&[(value_label(&report), &report)]);
    let tsv_path = out.join("table.tsv");
    fs::write(&tsv_path, &tsv).map_err(|e| Error::io(&tsv_path, e))?;
    print!("{tsv}");
    let a = &report.aggregates;
    println!(
        "questions: {} scored: {} flagged: {} errors: {}",
        a.questions, a.scored, a.flagged, a.errors
    );
    if a.judged > 0 || a.unjudged > 0 {
        println!("judged: {} unjudged: {}", a.judged, a.unjudged);
    }
    if !questions.is_empty() {
        println!(
            "retrieval ms/query: {:.3}",
            elapsed.as_secs_f64() * 1000.0 / questions.len() as f64
        );
    }
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let m = RunManifest::read(&args.index)?;
    let c = &m.counters;
    println!("fingerprint: {}", m.fingerprint);
    println!("corpus: {} ({} sessions, {} questions)", m.corpus.name, m.corpus.sessions, m.corpus.questions);
    println!("sessions: {}", m.counts.sessions);
    println!("keys: {}", m.counts.keys);
    if m.counts.internal_units > 0 {
        println!("internal units: {}", m.counts.internal_units);
    }
    println!("nodes: {}", m.counts.nodes);
    println!("edges: {}", m.counts.edges);
    println!("backend: {} / {}", m.backend.provider, m.backend.model);
    println!("embedder: {} (d={})", m.backend.embedder.name, m.backend.embedder.dimension);
    println!("backend calls: {}", c.calls.total_calls());
    println!("extraction calls: {}", c.extraction_calls);
    println!("embedding texts sent: {}", c.embedding_remote_texts);
    let lookups = c.cache_hits + c.cache_misses;
    let rate = if lookups == 0 { 0.0 } else { c.cache_hits as f64 / lookups as f64 };
    println!("cache hits: {} misses: {} hit rate: {:.3}", c.cache_hits, c.cache_misses, rate);
    println!("extraction minutes: {:.4}", c.extraction_minutes);
    println!("ingest ms: {}", c.ingest_ms);
    println!("total ms: {}", c.total_ms);
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let corpus = match args.kind {
        SynthKind::Benchmark => synthetic::benchmark(args.seed),
        SynthKind::Maintenance => synthetic::maintenance(args.seed).corpus,
        SynthKind::Random => synthetic::random_dialogues(args.seed, args.sessions),
    };
    crate::eval::loader::write_native(&args.out, &corpus)?;
    println!(
        "wrote {} sessions and {} questions to {}",
        corpus.sessions.len(),
        corpus.questions.len(),
        args.out.display()
    );
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs them; argument
/// errors map to exit code 2.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INPUT,
            }
        }
    }
}

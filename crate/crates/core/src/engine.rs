//! Build pipeline and the queryable memory it produces.
//!
//! Building runs in two phases. Backend work that depends only on a single
//! session (prejudge and extraction) runs in parallel on a bounded pool;
//! everything that mutates the index then runs sequentially in corpus order,
//! so results do not depend on scheduling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::embed::{Embedder, EmbedderKind, EmbedderSpec, HashEmbedder, RemoteEmbedder};
use crate::backend::remote::RemoteClient;
use crate::backend::{FlatExtraction, Gateway, RequestKind, StatsSnapshot};
use crate::error::{BackendError, Error, Result};
use crate::eval::loader::Corpus;
use crate::extraction::{parse_extraction, ParseReport};
use crate::flat::{self, read_json, read_jsonl, write_json, write_jsonl, FlatIndex};
use crate::graph::retrieval::{retrieve_traced, ActivationSet, RankScore};
use crate::graph::{build_simgraph, DescriptionPolicy, Graph, GraphNode};
use crate::maintenance::{self, reconcile_session, ReconcileLog};
use crate::model::{
    validate_config, GraphSchema, IndexKind, KeyKind, KeyStrategy, PipelineConfig, Query, Session, ValueKind,
    ValueRef,
};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

pub enum IndexData {
    Flat(FlatIndex),
    Graph(Graph),
}

impl IndexData {
    pub fn as_flat(&self) -> Option<&FlatIndex> {
        match self {
            IndexData::Flat(f) => Some(f),
            IndexData::Graph(_) => None,
        }
    }

    pub fn as_graph(&self) -> Option<&Graph> {
        match self {
            IndexData::Graph(g) => Some(g),
            IndexData::Flat(_) => None,
        }
    }
}

/// An index plus the sessions it was built from and the embedder that
/// embeds queries for it.
pub struct Memory {
    pub config: PipelineConfig,
    pub index: IndexData,
    pub sessions: Vec<Session>,
    pub reconcile_logs: Vec<ReconcileLog>,
    session_pos: HashMap<String, usize>,
    embedder: Arc<dyn Embedder>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub max_parallel: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            max_parallel: crate::backend::remote::DEFAULT_MAX_PARALLEL,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub sessions: usize,
    pub sessions_extracted: usize,
    pub sessions_skipped: usize,
    pub extraction_ms: u64,
    pub ingest_ms: u64,
    pub warnings: usize,
}

enum Extracted {
    None,
    Skipped,
    Flat(FlatExtraction),
    Graph(ParseReport),
}

fn needs_flat_extraction(config: &PipelineConfig) -> bool {
    flat::needs_extraction(config.key_strategy)
}

fn extract_one(session: &Session, config: &PipelineConfig, gateway: &Gateway) -> Result<Extracted, BackendError> {
    let graph_entities = config.index_kind == IndexKind::Graph && config.graph_schema != GraphSchema::Sim;
    if !graph_entities && !needs_flat_extraction(config) {
        return Ok(Extracted::None);
    }
    if !session.has_user_turn() {
        return Ok(Extracted::Skipped);
    }
    if config.prejudge_enabled && !gateway.prejudge(&session.user_text()) {
        return Ok(Extracted::Skipped);
    }
    if graph_entities {
        let raw = gateway.extract_graph(session, session.date)?;
        Ok(Extracted::Graph(parse_extraction(&raw)))
    } else {
        Ok(Extracted::Flat(gateway.extract_flat(session)?))
    }
}

/// Builds the index `config` describes over the corpus sessions.
pub fn build(
    corpus: &Corpus,
    config: &PipelineConfig,
    gateway: &Gateway,
    embedder: Arc<dyn Embedder>,
    options: BuildOptions,
) -> Result<(Memory, BuildReport)> {
    validate_config(config).into_result()?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.max_parallel.max(1))
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    let extracted: Vec<Extracted> = pool.install(|| {
        corpus
            .sessions
            .par_iter()
            .map(|s| extract_one(s, config, gateway))
            .collect::<Result<Vec<_>, BackendError>>()
    })?;
    let mut report = BuildReport {
        sessions: corpus.sessions.len(),
        sessions_extracted: extracted
            .iter()
            .filter(|e| matches!(e, Extracted::Flat(_) | Extracted::Graph(_)))
            .count(),
        sessions_skipped: extracted.iter().filter(|e| matches!(e, Extracted::Skipped)).count(),
        extraction_ms: started.elapsed().as_millis() as u64,
        ..Default::default()
    };

    let ingest_started = Instant::now();
    let mut logs = Vec::new();
    let index = match (config.index_kind, config.graph_schema) {
        (IndexKind::Flat, _) => {
            IndexData::Flat(build_flat(corpus, config, gateway, embedder.as_ref(), extracted, &mut logs)?)
        }
        (IndexKind::Graph, GraphSchema::Sim) => {
            let flat_config = PipelineConfig {
                key_strategy: KeyStrategy::MergeAll,
                ..config.clone()
            };
            let flat = build_flat(corpus, &flat_config, gateway, embedder.as_ref(), extracted, &mut logs)?;
            let groups: Vec<_> = flat
                .searchable()
                .filter(|u| u.kind == KeyKind::MergedAll)
                .cloned()
                .collect();
            let edges = build_simgraph(&groups, config.sim_neighbors, &mut |a, b, _| {
                Ok(gateway.judge_similar(&a.text, &b.text)?)
            })?;
            let mut graph = Graph::from_key_groups(embedder.spec().clone(), &groups, &edges)?;
            add_session_embeddings(&mut graph, &corpus.sessions, embedder.as_ref())?;
            IndexData::Graph(graph)
        }
        (IndexKind::Graph, _) => {
            let mut graph = Graph::new(config.graph_schema, embedder.spec().clone());
            let policy = DescriptionPolicy {
                mode: config.description_mode,
                threshold: config.summarize_threshold,
                summarizer: Some(gateway),
            };
            for (session, extraction) in corpus.sessions.iter().zip(extracted) {
                if let Extracted::Graph(parsed) = extraction {
                    let summary = graph.ingest_extraction(embedder.as_ref(), &parsed, &session.session_id, policy)?;
                    report.warnings += summary.warnings.len() + parsed.warnings.len();
                    for w in summary.warnings {
                        log::debug!("{}: {w}", session.session_id);
                    }
                }
            }
            add_session_embeddings(&mut graph, &corpus.sessions, embedder.as_ref())?;
            IndexData::Graph(graph)
        }
    };
    report.ingest_ms = ingest_started.elapsed().as_millis() as u64;
    Ok((Memory::new(config.clone(), index, corpus.sessions.clone(), logs, embedder), report))
}

fn build_flat(
    corpus: &Corpus,
    config: &PipelineConfig,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    extracted: Vec<Extracted>,
    logs: &mut Vec<ReconcileLog>,
) -> Result<FlatIndex> {
    let mut index = FlatIndex::new(config.key_strategy, embedder.spec().clone());
    for (session, extraction) in corpus.sessions.iter().zip(extracted) {
        let extraction = match extraction {
            Extracted::Flat(fx) => fx,
            _ => FlatExtraction::default(),
        };
        let log = reconcile_session(
            &mut index,
            gateway,
            embedder,
            session,
            &extraction,
            &config.op_set,
            config.candidate_count,
        )?;
        logs.push(log);
    }
    Ok(index)
}

fn add_session_embeddings(graph: &mut Graph, sessions: &[Session], embedder: &dyn Embedder) -> Result<()> {
    let with_text: Vec<&Session> = sessions.iter().filter(|s| s.has_user_turn()).collect();
    if with_text.is_empty() {
        return Ok(());
    }
    let texts: Vec<String> = with_text.iter().map(|s| s.user_text()).collect();
    for (s, v) in with_text.iter().zip(embedder.embed_texts(&texts)?) {
        graph.set_session_embedding(&s.session_id, v)?;
    }
    Ok(())
}

/// One retrieved value with the scores that ranked it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredValue {
    pub value: ValueRef,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranked_keys: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationSet>,
    pub values: Vec<ScoredValue>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RetrieveOptions<'a> {
    pub k_keys: Option<usize>,
    pub n_values: Option<usize>,
    /// Restricts retrieval to keys and values from these sessions.
    pub haystack: Option<&'a HashSet<String>>,
}

impl Memory {
    pub fn new(
        config: PipelineConfig,
        index: IndexData,
        sessions: Vec<Session>,
        reconcile_logs: Vec<ReconcileLog>,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        let session_pos = sessions
            .iter()
            .enumerate()
            .map(|(i, s)| (s.session_id.clone(), i))
            .collect();
        Memory {
            config,
            index,
            sessions,
            reconcile_logs,
            session_pos,
            embedder,
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.session_pos.get(session_id).map(|&i| &self.sessions[i])
    }

    pub fn retrieve(&self, query: &Query, options: RetrieveOptions<'_>) -> Result<TraceRecord> {
        let k = options.k_keys.unwrap_or(self.config.k_keys);
        let n = options.n_values.unwrap_or(self.config.n_values);
        if k == 0 || n == 0 {
            return Err(Error::Input("k and n must be positive".into()));
        }
        let q = self.embedder.embed(&query.text)?;
        let in_hay = |sid: &str| options.haystack.is_none_or(|h| h.contains(sid));
        match &self.index {
            IndexData::Flat(index) => {
                if index.strategy() == KeyStrategy::MergeByType && self.config.value_kind == ValueKind::Session {
                    let scores = index.score_sessions_merge_by_type(&q, n, in_hay)?;
                    return Ok(TraceRecord {
                        query: query.text.clone(),
                        ranked_keys: Vec::new(),
                        activation: None,
                        values: scores
                            .into_iter()
                            .map(|s| ScoredValue {
                                value: ValueRef::session(s.session_id),
                                score: s.final_score,
                                rank: None,
                            })
                            .collect(),
                    });
                }
                let ranked = index.search_where(&q, k, |key| {
                    !key.internal && key.unit.provenance_session_ids.iter().any(|s| in_hay(s))
                })?;
                let mut values = index.map_to_values(&ranked, usize::MAX, self.config.value_kind);
                values.retain(|(v, _)| v.kind == ValueKind::Key || in_hay(&v.payload));
                values.truncate(n);
                Ok(TraceRecord {
                    query: query.text.clone(),
                    ranked_keys: ranked,
                    activation: None,
                    values: values
                        .into_iter()
                        .map(|(value, score)| ScoredValue {
                            value,
                            score,
                            rank: None,
                        })
                        .collect(),
                })
            }
            IndexData::Graph(graph) => {
                let config = PipelineConfig {
                    k_keys: k,
                    ..self.config.clone()
                };
                let keep = |node: &GraphNode| node.sessions.iter().any(|s| in_hay(s));
                let keep_ref: Option<&dyn Fn(&GraphNode) -> bool> = options.haystack.map(|_| &keep as _);
                let trace = retrieve_traced(graph, &q, &config, usize::MAX, keep_ref)?;
                let mut values: Vec<ScoredValue> = trace
                    .values
                    .into_iter()
                    .filter(|v| v.value.kind == ValueKind::Key || in_hay(&v.value.payload))
                    .map(|v| ScoredValue {
                        score: v.score.score_s.unwrap_or(v.score.score_e),
                        value: v.value,
                        rank: Some(v.score),
                    })
                    .collect();
                values.truncate(n);
                Ok(TraceRecord {
                    query: query.text.clone(),
                    ranked_keys: Vec::new(),
                    activation: Some(trace.activation),
                    values,
                })
            }
        }
    }

    /// Evidence text handed to the answering model.
    pub fn value_text(&self, value: &ValueRef) -> Option<String> {
        match value.kind {
            ValueKind::Session => self.session(&value.payload).map(Session::transcript),
            ValueKind::Key => match &self.index {
                IndexData::Flat(f) => f.get(&value.payload).map(|k| k.unit.text.clone()),
                IndexData::Graph(g) => g
                    .node(&value.payload)
                    .map(|n| format!("{}: {}", n.canonical_name, n.description_text())),
            },
        }
    }

    /// Sessions a value stands for; keys map to their provenance sessions.
    pub fn value_sessions(&self, value: &ValueRef) -> Vec<String> {
        match value.kind {
            ValueKind::Session => vec![value.payload.clone()],
            ValueKind::Key => match &self.index {
                IndexData::Flat(f) => f
                    .get(&value.payload)
                    .map(|k| k.unit.provenance_session_ids.clone())
                    .unwrap_or_default(),
                IndexData::Graph(g) => g.node(&value.payload).map(|n| n.sessions.clone()).unwrap_or_default(),
            },
        }
    }

    pub fn counts(&self) -> IndexCounts {
        match &self.index {
            IndexData::Flat(f) => IndexCounts {
                keys: f.len(),
                internal_units: f.keys().len() - f.len(),
                nodes: 0,
                edges: 0,
                sessions: self.sessions.len(),
            },
            IndexData::Graph(g) => IndexCounts {
                keys: g.nodes().len(),
                internal_units: 0,
                nodes: g.nodes().len(),
                edges: g.edges().len(),
                sessions: self.sessions.len(),
            },
        }
    }

    /// Writes `config.toml`, `sessions.jsonl`, `reconcile.jsonl` and the
    /// index directory (`flat/` or `graph/`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("config.toml");
        fs::write(&cfg, self.config.to_toml_string()).map_err(|e| Error::io(&cfg, e))?;
        write_jsonl(&dir.join("sessions.jsonl"), &self.sessions)?;
        maintenance::write_logs(&dir.join("reconcile.jsonl"), &self.reconcile_logs)?;
        match &self.index {
            IndexData::Flat(f) => f.save(&dir.join("flat")),
            IndexData::Graph(g) => g.save(&dir.join("graph")),
        }
    }

    /// Loads a saved memory; `remote` is needed only for remote embedders.
    pub fn load(dir: &Path, remote: Option<Arc<RemoteClient>>) -> Result<Self> {
        let cfg_path = dir.join("config.toml");
        let raw = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = PipelineConfig::from_toml_str(&raw)?;
        let sessions: Vec<Session> = read_jsonl(&dir.join("sessions.jsonl"))?;
        let logs = maintenance::read_logs(&dir.join("reconcile.jsonl"))?;
        let index = if dir.join("flat").is_dir() {
            IndexData::Flat(FlatIndex::load(&dir.join("flat"))?)
        } else if dir.join("graph").is_dir() {
            IndexData::Graph(Graph::load(&dir.join("graph"))?)
        } else {
            return Err(Error::NotFound(format!("no index in {}", dir.display())));
        };
        let spec = match &index {
            IndexData::Flat(f) => f.spec().clone(),
            IndexData::Graph(g) => g.spec().clone(),
        };
        let embedder = embedder_for(&spec, remote, None)?;
        Ok(Memory::new(config, index, sessions, logs, embedder))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexCounts {
    pub keys: usize,
    pub internal_units: usize,
    pub nodes: usize,
    pub edges: usize,
    pub sessions: usize,
}

/// Recreates the embedder an index was built with.
pub fn embedder_for(
    spec: &EmbedderSpec,
    remote: Option<Arc<RemoteClient>>,
    cache: Option<Arc<crate::backend::cache::ResponseCache>>,
) -> Result<Arc<dyn Embedder>> {
    match spec.kind {
        EmbedderKind::HashMock => Ok(Arc::new(HashEmbedder::new(spec.dimension))),
        EmbedderKind::Remote => {
            let client = remote.ok_or_else(|| {
                Error::Backend(BackendError::Config(format!(
                    "index uses remote embedder {}; credentials required",
                    spec.name
                )))
            })?;
            Ok(Arc::new(RemoteEmbedder::new(spec.clone(), client, cache)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub name: String,
    pub sessions: usize,
    pub questions: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub provider: String,
    pub model: String,
    pub template_versions: Vec<(String, String)>,
    pub embedder: EmbedderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub calls: StatsSnapshot,
    pub embedding_remote_texts: u64,
    pub extraction_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub extraction_minutes: f64,
    pub ingest_ms: u64,
    pub total_ms: u64,
    pub sessions_extracted: usize,
    pub sessions_skipped: usize,
}

/// Description of one build. `fingerprint` depends only on the inputs
/// (config, corpus, backend identity); `counters` describe this run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub config: PipelineConfig,
    pub corpus: CorpusInfo,
    pub backend: BackendInfo,
    pub counts: IndexCounts,
    pub counters: RunCounters,
}

impl RunManifest {
    pub fn new(
        corpus: &Corpus,
        config: &PipelineConfig,
        gateway: &Gateway,
        embedder: &dyn Embedder,
        memory: &Memory,
        report: &BuildReport,
        total_ms: u64,
    ) -> Self {
        let backend = BackendInfo {
            provider: gateway.provider_name().to_string(),
            model: gateway.model().to_string(),
            template_versions: RequestKind::ALL
                .iter()
                .map(|k| (k.as_str().to_string(), gateway.template_version(*k)))
                .collect(),
            embedder: embedder.spec().clone(),
        };
        let corpus_info = CorpusInfo {
            name: corpus.name.clone(),
            sessions: corpus.sessions.len(),
            questions: corpus.questions.len(),
            digest: corpus.fingerprint(),
        };
        let mut h = Sha256::new();
        for part in [
            config.to_toml_string(),
            serde_json::to_string(&corpus_info).expect("serializes"),
            serde_json::to_string(&backend).expect("serializes"),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let calls = gateway.stats();
        let extraction_calls = calls.calls(RequestKind::ExtractFlat) + calls.calls(RequestKind::ExtractGraph);
        RunManifest {
            format_version: FORMAT_VERSION,
            fingerprint: hex::encode(h.finalize()),
            config: config.clone(),
            corpus: corpus_info,
            backend,
            counts: memory.counts(),
            counters: RunCounters {
                embedding_remote_texts: embedder.remote_calls(),
                extraction_calls,
                cache_hits: calls.total_hits(),
                cache_misses: calls.total_calls(),
                calls,
                extraction_minutes: report.extraction_ms as f64 / 60_000.0,
                ingest_ms: report.ingest_ms,
                total_ms,
                sessions_extracted: report.sessions_extracted,
                sessions_skipped: report.sessions_skipped,
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::NotFound(format!("manifest {}", path.display())));
        }
        read_json(&path)
    }
}

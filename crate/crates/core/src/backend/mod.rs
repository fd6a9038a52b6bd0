//! Backend gateway: embedder and LLM-style operations behind one request
//! type, served by either the deterministic mock provider or an
//! OpenAI-compatible remote provider, with a persistent content-hash cache.

pub mod cache;
pub mod embed;
pub mod mock;
pub mod prompts;
pub mod remote;

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheEntry, CacheStats, ResponseCache};
pub use embed::{Embedder, EmbedderKind, EmbedderSpec, HashEmbedder, RemoteEmbedder};
pub use mock::MockProvider;
pub use remote::{RemoteConfig, RemoteProvider, RetryPolicy};

use crate::error::BackendError;
use crate::model::{CalendarDate, MemOp, Query, Session};
use crate::text::normalize_for_match;

/// Summary, facts and keywords extracted from one session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatExtraction {
    pub summary: String,
    pub facts: Vec<String>,
    pub keywords: Vec<String>,
}

impl FlatExtraction {
    /// Trims entries, drops empties and removes facts/keywords that repeat
    /// after whitespace normalisation.
    pub fn normalized(self) -> Self {
        fn dedupe(items: Vec<String>) -> Vec<String> {
            let mut seen = HashSet::new();
            items
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && seen.insert(normalize_for_match(s)))
                .collect()
        }
        FlatExtraction {
            summary: self.summary.trim().to_string(),
            facts: dedupe(self.facts),
            keywords: dedupe(self.keywords),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.summary.is_empty() && self.facts.is_empty() && self.keywords.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemOpDecision {
    pub op: MemOp,
    #[serde(default)]
    pub target_key_id: Option<String>,
    #[serde(default)]
    pub revised_text: Option<String>,
    #[serde(default)]
    pub rationale: String,
}

impl MemOpDecision {
    pub fn add(rationale: impl Into<String>) -> Self {
        MemOpDecision {
            op: MemOp::Add,
            target_key_id: None,
            revised_text: None,
            rationale: rationale.into(),
        }
    }

    /// Checks the op/target/revision invariants against the offered candidates.
    pub fn validate(&self, candidates: &[(String, String)]) -> Result<(), BackendError> {
        let resolvable = |id: &Option<String>| {
            id.as_ref()
                .is_some_and(|id| candidates.iter().any(|(k, _)| k == id))
        };
        match self.op {
            MemOp::Update | MemOp::Delete => {
                if !resolvable(&self.target_key_id) {
                    return Err(BackendError::Protocol(format!(
                        "{:?} targets unknown key {:?}",
                        self.op, self.target_key_id
                    )));
                }
                if self.op == MemOp::Update
                    && self.revised_text.as_deref().map_or(true, |t| t.trim().is_empty())
                {
                    return Err(BackendError::Protocol("update without revised text".into()));
                }
            }
            MemOp::Add | MemOp::Noop => {
                if self.target_key_id.is_some() {
                    return Err(BackendError::Protocol(format!(
                        "{:?} must not carry a target",
                        self.op
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Direct,
    ChainOfNote,
}

/// Every backend operation as a serialisable request; its canonical JSON is
/// the cache payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BackendRequest {
    ExtractFlat {
        dialogue_time: CalendarDate,
        user_text: String,
    },
    ExtractGraph {
        dialogue_time: CalendarDate,
        input_text: String,
    },
    Prejudge {
        chunk: String,
    },
    DecideMemOp {
        new_fact: String,
        candidates: Vec<(String, String)>,
    },
    Answer {
        question: String,
        question_date: Option<CalendarDate>,
        context: Vec<String>,
        mode: AnswerMode,
    },
    Summarize {
        descriptions: Vec<String>,
        max_chars: usize,
    },
    JudgeSimilar {
        first: String,
        second: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ExtractFlat,
    ExtractGraph,
    Prejudge,
    DecideMemOp,
    Answer,
    Summarize,
    JudgeSimilar,
}

impl RequestKind {
    pub const ALL: [RequestKind; 7] = [
        RequestKind::ExtractFlat,
        RequestKind::ExtractGraph,
        RequestKind::Prejudge,
        RequestKind::DecideMemOp,
        RequestKind::Answer,
        RequestKind::Summarize,
        RequestKind::JudgeSimilar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::ExtractFlat => "extract_flat",
            RequestKind::ExtractGraph => "extract_graph",
            RequestKind::Prejudge => "prejudge",
            RequestKind::DecideMemOp => "decide_mem_op",
            RequestKind::Answer => "answer",
            RequestKind::Summarize => "summarize",
            RequestKind::JudgeSimilar => "judge_similar",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl BackendRequest {
    pub fn kind(&self) -> RequestKind {
        match self {
            BackendRequest::ExtractFlat { .. } => RequestKind::ExtractFlat,
            BackendRequest::ExtractGraph { .. } => RequestKind::ExtractGraph,
            BackendRequest::Prejudge { .. } => RequestKind::Prejudge,
            BackendRequest::DecideMemOp { .. } => RequestKind::DecideMemOp,
            BackendRequest::Answer { .. } => RequestKind::Answer,
            BackendRequest::Summarize { .. } => RequestKind::Summarize,
            BackendRequest::JudgeSimilar { .. } => RequestKind::JudgeSimilar,
        }
    }

    pub fn payload(&self) -> String {
        serde_json::to_string(self).expect("requests serialize")
    }
}

/// A source of raw replies for [`BackendRequest`]s.
pub trait Provider: Send + Sync {
    /// Backend family, e.g. `mock` or `remote`.
    fn name(&self) -> &str;
    fn model(&self) -> &str;
    /// Version tag of the prompt template that serves `kind`.
    fn template_version(&self, kind: RequestKind) -> String;
    fn call(&self, request: &BackendRequest) -> Result<String, BackendError>;
}

/// Stable key over backend identity, prompt version and payload.
pub fn content_hash(backend: &str, model: &str, template_version: &str, payload: &str) -> String {
    let mut h = Sha256::new();
    for part in [backend, model, template_version, payload] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Default)]
pub struct CallStats {
    calls: [AtomicU64; 7],
    hits: [AtomicU64; 7],
    failures: [AtomicU64; 7],
    tokens_in: AtomicU64,
    tokens_out: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub kind: String,
    pub calls: u64,
    pub cache_hits: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub per_kind: Vec<CallCounts>,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl StatsSnapshot {
    pub fn calls(&self, kind: RequestKind) -> u64 {
        self.get(kind).map_or(0, |c| c.calls)
    }

    pub fn hits(&self, kind: RequestKind) -> u64 {
        self.get(kind).map_or(0, |c| c.cache_hits)
    }

    pub fn total_calls(&self) -> u64 {
        self.per_kind.iter().map(|c| c.calls).sum()
    }

    pub fn total_hits(&self) -> u64 {
        self.per_kind.iter().map(|c| c.cache_hits).sum()
    }

    fn get(&self, kind: RequestKind) -> Option<&CallCounts> {
        self.per_kind.iter().find(|c| c.kind == kind.as_str())
    }
}

impl CallStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            per_kind: RequestKind::ALL
                .iter()
                .map(|&k| CallCounts {
                    kind: k.as_str().to_string(),
                    calls: self.calls[k.index()].load(Ordering::Relaxed),
                    cache_hits: self.hits[k.index()].load(Ordering::Relaxed),
                    failures: self.failures[k.index()].load(Ordering::Relaxed),
                })
                .collect(),
            tokens_in: self.tokens_in.load(Ordering::Relaxed),
            tokens_out: self.tokens_out.load(Ordering::Relaxed),
        }
    }
}

fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Front door for every non-embedding backend call.
pub struct Gateway {
    provider: Box<dyn Provider>,
    cache: Option<Arc<ResponseCache>>,
    stats: CallStats,
}

impl Gateway {
    pub fn new(provider: Box<dyn Provider>) -> Self {
        Gateway {
            provider,
            cache: None,
            stats: CallStats::default(),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn mock(dimension: usize) -> Self {
        Gateway::new(Box::new(MockProvider::new(dimension)))
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn model(&self) -> &str {
        self.provider.model()
    }

    pub fn template_version(&self, kind: RequestKind) -> String {
        self.provider.template_version(kind)
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn cache(&self) -> Option<&Arc<ResponseCache>> {
        self.cache.as_ref()
    }

    fn key_for(&self, request: &BackendRequest) -> String {
        content_hash(
            self.provider.name(),
            self.provider.model(),
            &self.provider.template_version(request.kind()),
            &request.payload(),
        )
    }

    /// Serves from cache when possible; otherwise calls the provider once.
    /// `bypass_cache` forces a fresh call (used to retry unparseable replies).
    fn execute(&self, request: &BackendRequest, bypass_cache: bool) -> Result<String, BackendError> {
        let kind = request.kind().index();
        let key = self.key_for(request);
        if !bypass_cache {
            if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                self.stats.hits[kind].fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
        }
        self.stats.calls[kind].fetch_add(1, Ordering::Relaxed);
        let payload = request.payload();
        self.stats
            .tokens_in
            .fetch_add(approx_tokens(&payload), Ordering::Relaxed);
        match self.provider.call(request) {
            Ok(reply) => {
                self.stats
                    .tokens_out
                    .fetch_add(approx_tokens(&reply), Ordering::Relaxed);
                Ok(reply)
            }
            Err(e) => {
                self.stats.failures[kind].fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
        }
    }

    fn store(&self, request: &BackendRequest, reply: &str) {
        if let Some(cache) = &self.cache {
            let key = self.key_for(request);
            let meta = cache::EntryMeta {
                backend: self.provider.name().to_string(),
                model: self.provider.model().to_string(),
                template_version: self.provider.template_version(request.kind()),
                op: request.kind().as_str().to_string(),
            };
            if let Err(e) = cache.put(&key, &meta, reply) {
                log::warn!("cache write failed for {key}: {e}");
            }
        }
    }

    /// Calls, parses, and caches only replies that parse. An unparseable
    /// reply is retried once with a fresh call.
    fn call_parsed<T>(
        &self,
        request: &BackendRequest,
        parse: impl Fn(&str) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let reply = self.execute(request, false)?;
        match parse(&reply) {
            Ok(v) => {
                self.store(request, &reply);
                Ok(v)
            }
            Err(first) => {
                log::warn!("retrying unparseable {} reply: {first}", request.kind().as_str());
                let reply = self.execute(request, true)?;
                let v = parse(&reply)?;
                self.store(request, &reply);
                Ok(v)
            }
        }
    }

    pub fn extract_flat(&self, session: &Session) -> Result<FlatExtraction, BackendError> {
        let user_text = session.user_text();
        if user_text.is_empty() {
            return Ok(FlatExtraction::default());
        }
        let request = BackendRequest::ExtractFlat {
            dialogue_time: session.date,
            user_text,
        };
        self.call_parsed(&request, parse_flat_extraction)
    }

    /// Raw extraction text in the entity/relation grammar; only user turns
    /// are sent.
    pub fn extract_graph(
        &self,
        session: &Session,
        dialogue_time: CalendarDate,
    ) -> Result<String, BackendError> {
        let input_text = session.user_text();
        if input_text.is_empty() {
            return Ok(crate::extraction::COMPLETE_MARKER.to_string());
        }
        let request = BackendRequest::ExtractGraph {
            dialogue_time,
            input_text,
        };
        self.call_parsed(&request, |r| Ok(r.to_string()))
    }

    /// `true` keeps the chunk. Backend failures keep it too.
    pub fn prejudge(&self, chunk: &str) -> bool {
        if chunk.trim().is_empty() {
            return false;
        }
        let request = BackendRequest::Prejudge {
            chunk: chunk.to_string(),
        };
        match self.call_parsed(&request, parse_keep_skip) {
            Ok(keep) => keep,
            Err(e) => {
                log::warn!("prejudge failed, keeping chunk: {e}");
                true
            }
        }
    }

    /// Protocol violations degrade to `add`; transport errors propagate.
    pub fn decide_mem_op(
        &self,
        new_fact: &str,
        candidates: &[(String, String)],
    ) -> Result<MemOpDecision, BackendError> {
        if candidates.is_empty() {
            return Ok(MemOpDecision::add("no candidates"));
        }
        let request = BackendRequest::DecideMemOp {
            new_fact: new_fact.to_string(),
            candidates: candidates.to_vec(),
        };
        let decision = self.call_parsed(&request, parse_mem_op)?;
        match decision.validate(candidates) {
            Ok(()) => Ok(decision),
            Err(e) => {
                log::warn!("invalid memory decision ({e}); falling back to add");
                Ok(MemOpDecision::add(format!("fallback: {e}")))
            }
        }
    }

    pub fn generate_answer(
        &self,
        question: &Query,
        context_values: &[String],
        mode: AnswerMode,
    ) -> Result<String, BackendError> {
        let request = BackendRequest::Answer {
            question: question.text.clone(),
            question_date: question.query_date,
            context: context_values.to_vec(),
            mode,
        };
        self.call_parsed(&request, |r| Ok(r.to_string()))
    }

    pub fn summarize(&self, descriptions: &[String], max_chars: usize) -> Result<String, BackendError> {
        let request = BackendRequest::Summarize {
            descriptions: descriptions.to_vec(),
            max_chars,
        };
        self.call_parsed(&request, |r| {
            let t = r.trim();
            if t.is_empty() {
                Err(BackendError::Extraction {
                    message: "empty summary".into(),
                    raw: r.to_string(),
                })
            } else {
                Ok(t.to_string())
            }
        })
    }

    pub fn judge_similar(&self, first: &str, second: &str) -> Result<bool, BackendError> {
        let request = BackendRequest::JudgeSimilar {
            first: first.to_string(),
            second: second.to_string(),
        };
        self.call_parsed(&request, parse_yes_no)
    }
}

/// Strips a Markdown code fence if the model wrapped its JSON in one.
fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.trim_start_matches(|c: char| c.is_alphanumeric());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

pub fn parse_flat_extraction(raw: &str) -> Result<FlatExtraction, BackendError> {
    serde_json::from_str::<FlatExtraction>(strip_fence(raw))
        .map(FlatExtraction::normalized)
        .map_err(|e| BackendError::Extraction {
            message: e.to_string(),
            raw: raw.to_string(),
        })
}

pub fn parse_mem_op(raw: &str) -> Result<MemOpDecision, BackendError> {
    serde_json::from_str::<MemOpDecision>(strip_fence(raw)).map_err(|e| BackendError::Extraction {
        message: e.to_string(),
        raw: raw.to_string(),
    })
}

fn first_word(raw: &str) -> String {
    raw.trim()
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn parse_keep_skip(raw: &str) -> Result<bool, BackendError> {
    match first_word(raw).as_str() {
        "keep" | "yes" => Ok(true),
        "skip" | "no" => Ok(false),
        _ => Err(BackendError::Extraction {
            message: "expected keep or skip".into(),
            raw: raw.to_string(),
        }),
    }
}

fn parse_yes_no(raw: &str) -> Result<bool, BackendError> {
    match first_word(raw).as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(BackendError::Extraction {
            message: "expected yes or no".into(),
            raw: raw.to_string(),
        }),
    }
}

//! Shared data model: dialog sessions, memory keys and values, embeddings,
//! and the pipeline configuration that picks one point in the design space
//! (key organisation, value form, index kind, maintenance ops, retrieval).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{EmbeddingError, Error, Result};

/// Day-granularity calendar date rendered as `YYYY/MM/DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CalendarDate(pub NaiveDate);

impl CalendarDate {
    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, day).map(CalendarDate)
    }

    pub fn naive(self) -> NaiveDate {
        self.0
    }

    pub fn add_days(self, days: i64) -> Self {
        CalendarDate(self.0 + chrono::Duration::days(days))
    }

    /// Parses the leading `YYYY/MM/DD` (or `YYYY-MM-DD`) of a string, ignoring
    /// any trailing weekday or clock time such as `2023/05/20 (Sat) 02:21`.
    pub fn parse_prefix(raw: &str) -> Option<Self> {
        let head: String = raw.trim().chars().take(10).collect();
        head.parse().ok()
    }
}

impl fmt::Display for CalendarDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:04}/{:02}/{:02}",
            self.0.year(),
            self.0.month(),
            self.0.day()
        )
    }
}

impl FromStr for CalendarDate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        for fmt in ["%Y/%m/%d", "%Y-%m-%d"] {
            if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
                return Ok(CalendarDate(d));
            }
        }
        Err(Error::Input(format!("not a YYYY/MM/DD date: {s:?}")))
    }
}

impl Serialize for CalendarDate {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CalendarDate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub turn_index: usize,
}

impl Turn {
    /// Empty turns are kept in the session but never produce keys.
    pub fn is_indexable(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub date: CalendarDate,
    pub turns: Vec<Turn>,
}

impl Session {
    /// Builds a session, numbering turns contiguously from zero.
    pub fn new(
        session_id: impl Into<String>,
        date: CalendarDate,
        turns: impl IntoIterator<Item = (Role, String)>,
    ) -> Self {
        let turns = turns
            .into_iter()
            .enumerate()
            .map(|(turn_index, (role, text))| Turn {
                role,
                text,
                turn_index,
            })
            .collect();
        Session {
            session_id: session_id.into(),
            date,
            turns,
        }
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User && t.is_indexable())
    }

    pub fn has_user_turn(&self) -> bool {
        self.user_turns().next().is_some()
    }

    /// User turns only, trimmed and joined by newline.
    pub fn user_text(&self) -> String {
        self.user_turns()
            .map(|t| t.text.trim())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Full transcript used as answering context.
    pub fn transcript(&self) -> String {
        let mut out = format!("Session date: {}\n", self.date);
        for turn in self.turns.iter().filter(|t| t.is_indexable()) {
            let who = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            out.push_str(who);
            out.push_str(": ");
            out.push_str(turn.text.trim());
            out.push('\n');
        }
        out
    }

    /// Stable hash of the session's date and turn contents (not its id).
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.date.to_string().as_bytes());
        for turn in &self.turns {
            hasher.update([0u8, turn.role as u8]);
            hasher.update(turn.text.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.turn_index != i {
                return Err(Error::Input(format!(
                    "session {}: turn_index {} at position {i}",
                    self.session_id, turn.turn_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub query_date: Option<CalendarDate>,
}

impl Query {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Input("query text is empty".into()));
        }
        Ok(Query {
            text,
            query_date: None,
        })
    }

    pub fn with_date(mut self, date: Option<CalendarDate>) -> Self {
        self.query_date = date;
        self
    }
}

/// Unit-norm embedding. `degenerate` marks the reserved first-basis vector
/// assigned to text with no tokens; such vectors never match in retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    degenerate: bool,
}

pub const NORM_TOLERANCE: f64 = 1e-6;

impl Embedding {
    /// L2-normalises `raw`. Rejects non-finite entries and the zero vector.
    pub fn normalize(raw: &[f64]) -> Result<Self, EmbeddingError> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::Zero);
        }
        let values = raw.iter().map(|v| (v / norm) as f32).collect();
        Ok(Embedding {
            values,
            degenerate: false,
        })
    }

    pub fn normalize_f32(raw: &[f32]) -> Result<Self, EmbeddingError> {
        let widened: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        Self::normalize(&widened)
    }

    /// The reserved vector for degenerate text: first basis direction, flagged.
    pub fn reserved(dimension: usize) -> Self {
        let mut values = vec![0.0f32; dimension.max(1)];
        values[0] = 1.0;
        Embedding {
            values,
            degenerate: true,
        }
    }

    /// Rebuilds an embedding from stored components without renormalising.
    pub fn from_stored(values: Vec<f32>, degenerate: bool) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Embedding { values, degenerate })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Cosine similarity; both sides are unit vectors so this is the dot
    /// product, accumulated in f64 in index order.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn check_dimension(&self, expected: usize) -> Result<(), EmbeddingError> {
        if self.values.len() != expected {
            return Err(EmbeddingError::Dimension {
                expected,
                actual: self.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    SessionText,
    Summary,
    Fact,
    Keyword,
    MergedTypeGroup,
    MergedAll,
    EntityDescription,
    TripleText,
}

impl KeyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyKind::SessionText => "session_text",
            KeyKind::Summary => "summary",
            KeyKind::Fact => "fact",
            KeyKind::Keyword => "keyword",
            KeyKind::MergedTypeGroup => "merged_type_group",
            KeyKind::MergedAll => "merged_all",
            KeyKind::EntityDescription => "entity_description",
            KeyKind::TripleText => "triple_text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyUnit {
    pub key_id: String,
    pub kind: KeyKind,
    pub text: String,
    pub embedding: Embedding,
    pub provenance_session_ids: Vec<String>,
    pub created_at: u64,
}

impl KeyUnit {
    pub fn add_provenance(&mut self, session_id: &str) {
        if !self.provenance_session_ids.iter().any(|s| s == session_id) {
            self.provenance_session_ids.push(session_id.to_string());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Session,
    Key,
}

/// Evidence handed to the answering model: a whole session or a key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValueRef {
    pub value_id: String,
    pub kind: ValueKind,
    pub payload: String,
}

impl ValueRef {
    pub fn session(session_id: impl Into<String>) -> Self {
        let id = session_id.into();
        ValueRef {
            value_id: id.clone(),
            kind: ValueKind::Session,
            payload: id,
        }
    }

    pub fn key(key_id: impl Into<String>) -> Self {
        let id = key_id.into();
        ValueRef {
            value_id: id.clone(),
            kind: ValueKind::Key,
            payload: id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStrategy {
    SessionOnly,
    SeparateSfk,
    MergeByType,
    MergeAll,
    SessionPlusMerged,
    GraphEntities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Flat,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemOp {
    Add,
    Update,
    Noop,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSchema {
    Sim,
    Know,
    Desc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Entity,
    Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    None,
    OneHop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rerank {
    ScoreS,
    ScoreE,
    ScoreEG,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionMode {
    Append,
    Summarize,
}

/// One point in the memory design space. Fields missing from a config file
/// take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub key_strategy: KeyStrategy,
    pub value_kind: ValueKind,
    pub index_kind: IndexKind,
    pub op_set: BTreeSet<MemOp>,
    pub graph_schema: GraphSchema,
    pub activation: Activation,
    pub expansion: Expansion,
    pub rerank: Rerank,
    pub k_keys: usize,
    pub n_values: usize,
    pub expansion_budget: usize,
    pub prejudge_enabled: bool,
    /// Candidate memories consulted per new fact during maintenance.
    #[serde(default = "defaults::candidate_count")]
    pub candidate_count: usize,
    #[serde(default = "defaults::description_mode")]
    pub description_mode: DescriptionMode,
    #[serde(default = "defaults::summarize_threshold")]
    pub summarize_threshold: usize,
    /// Neighbours per key group proposed to the similarity judge.
    #[serde(default = "defaults::sim_neighbors")]
    pub sim_neighbors: usize,
    /// Reserved hook for query-time temporal filtering; not implemented.
    #[serde(default)]
    pub temporal_filter: bool,
}

mod defaults {
    use super::DescriptionMode;

    pub fn candidate_count() -> usize {
        5
    }
    pub fn description_mode() -> DescriptionMode {
        DescriptionMode::Append
    }
    pub fn summarize_threshold() -> usize {
        1024
    }
    pub fn sim_neighbors() -> usize {
        5
    }
}

pub const DEFAULT_EXPANSION_BUDGET: usize = 50;

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            key_strategy: KeyStrategy::MergeAll,
            value_kind: ValueKind::Session,
            index_kind: IndexKind::Flat,
            op_set: BTreeSet::from([MemOp::Add]),
            graph_schema: GraphSchema::Desc,
            activation: Activation::Entity,
            expansion: Expansion::None,
            rerank: Rerank::ScoreEG,
            k_keys: 20,
            n_values: 5,
            expansion_budget: DEFAULT_EXPANSION_BUDGET,
            prejudge_enabled: true,
            candidate_count: defaults::candidate_count(),
            description_mode: defaults::description_mode(),
            summarize_threshold: defaults::summarize_threshold(),
            sim_neighbors: defaults::sim_neighbors(),
            temporal_filter: false,
        }
    }
}

impl PipelineConfig {
    /// Graph index over description-bearing entities ranked by (score_e, score_g).
    pub fn desc_graph() -> Self {
        PipelineConfig {
            key_strategy: KeyStrategy::GraphEntities,
            index_kind: IndexKind::Graph,
            graph_schema: GraphSchema::Desc,
            ..Default::default()
        }
    }

    /// Default number of values handed to the answerer for the value kind.
    pub fn default_answer_values(value_kind: ValueKind) -> usize {
        match value_kind {
            ValueKind::Session => 5,
            ValueKind::Key => 20,
        }
    }

    pub fn from_toml_str(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| Error::Input(format!("config: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.severity == Severity::Warning)
    }

    pub fn into_result(self) -> Result<Vec<Violation>> {
        if self.is_ok() {
            Ok(self.violations)
        } else {
            Err(Error::Config(
                self.errors().map(|v| v.message.clone()).collect(),
            ))
        }
    }

    fn error(&mut self, message: impl Into<String>) {
        self.violations.push(Violation {
            severity: Severity::Error,
            message: message.into(),
        });
    }

    fn warn(&mut self, message: impl Into<String>) {
        self.violations.push(Violation {
            severity: Severity::Warning,
            message: message.into(),
        });
    }
}

/// Reports every violated configuration invariant. Violations are data.
pub fn validate_config(config: &PipelineConfig) -> Validation {
    let mut out = Validation::default();
    let defaults = PipelineConfig::default();

    if config.k_keys == 0 {
        out.error("k_keys must be positive");
    }
    if config.n_values == 0 {
        out.error("n_values must be positive");
    }
    if config.k_keys < config.n_values {
        out.error("k_keys < n_values");
    }
    if config.op_set.is_empty() {
        out.error("op_set is empty");
    } else if !config.op_set.contains(&MemOp::Add) {
        out.warn("add absent: running the without-add ablation mode");
    }
    if config.candidate_count == 0 {
        out.error("candidate_count must be positive");
    }

    match config.index_kind {
        IndexKind::Flat => {
            if config.key_strategy == KeyStrategy::GraphEntities {
                out.error("key_strategy graph_entities requires index_kind graph");
            }
            let graph_fields_touched = config.graph_schema != defaults.graph_schema
                || config.activation != defaults.activation
                || config.expansion != defaults.expansion
                || config.rerank != defaults.rerank;
            if graph_fields_touched {
                out.warn("graph fields are ignored for a flat index");
            }
        }
        IndexKind::Graph => {
            let expected = match config.graph_schema {
                GraphSchema::Sim => KeyStrategy::MergeAll,
                GraphSchema::Know | GraphSchema::Desc => KeyStrategy::GraphEntities,
            };
            if config.key_strategy != expected {
                out.error(format!(
                    "graph schema {:?} requires key_strategy {:?}, got {:?}",
                    config.graph_schema, expected, config.key_strategy
                ));
            }
            if config.rerank == Rerank::ScoreS && config.value_kind == ValueKind::Key {
                out.error("rerank score_s needs value_kind session");
            }
            if config.activation == Activation::Triple && config.graph_schema == GraphSchema::Sim {
                out.error("triple activation needs an entity graph (know or desc)");
            }
            if config.expansion == Expansion::OneHop && config.expansion_budget == 0 {
                out.warn("one_hop expansion with budget 0 expands nothing");
            }
        }
    }
    if config.op_set.contains(&MemOp::Delete) {
        out.warn("delete enabled: old memories can be removed");
    }
    if config.temporal_filter {
        out.warn("temporal_filter is a reserved hook and has no effect");
    }
    out
}

pub fn canonical_session_id(corpus_name: &str, raw_id: &str) -> Result<String> {
    if raw_id.trim().is_empty() {
        return Err(Error::Input("empty raw session id".into()));
    }
    Ok(format!("{corpus_name}/{raw_id}"))
}

/// Assigns collision-free canonical ids within one corpus. A raw id seen
/// again with identical content maps to the same session; with different
/// content it gets a content-hash suffix.
#[derive(Debug, Clone)]
pub struct SessionIdRegistry {
    corpus_name: String,
    seen: HashMap<String, Vec<(String, String)>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assigned {
    New(String),
    Existing(String),
}

impl Assigned {
    pub fn id(&self) -> &str {
        match self {
            Assigned::New(id) | Assigned::Existing(id) => id,
        }
    }
}

impl SessionIdRegistry {
    pub fn new(corpus_name: impl Into<String>) -> Self {
        SessionIdRegistry {
            corpus_name: corpus_name.into(),
            seen: HashMap::new(),
        }
    }

    pub fn assign(&mut self, raw_id: &str, content_digest: &str) -> Result<Assigned> {
        let base = canonical_session_id(&self.corpus_name, raw_id)?;
        let entries = self.seen.entry(raw_id.to_string()).or_default();
        if let Some((_, id)) = entries.iter().find(|(d, _)| d == content_digest) {
            return Ok(Assigned::Existing(id.clone()));
        }
        let id = if entries.is_empty() {
            base
        } else {
            let mut len = 8;
            loop {
                let candidate = format!("{base}#{}", &content_digest[..len.min(content_digest.len())]);
                if !entries.iter().any(|(_, id)| *id == candidate) || len >= content_digest.len() {
                    break candidate;
                }
                len += 4;
            }
        };
        entries.push((content_digest.to_string(), id.clone()));
        Ok(Assigned::New(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let v = validate_config(&PipelineConfig::default());
        assert!(v.is_ok(), "{v:?}");
        assert!(v.violations.is_empty());
    }

    #[test]
    fn k_below_n_is_violation() {
        let cfg = PipelineConfig {
            k_keys: 3,
            n_values: 5,
            ..Default::default()
        };
        let v = validate_config(&cfg);
        assert!(!v.is_ok());
        assert!(v.errors().any(|e| e.message == "k_keys < n_values"));
    }

    #[test]
    fn missing_add_is_warning_only() {
        let cfg = PipelineConfig {
            op_set: BTreeSet::from([MemOp::Update, MemOp::Noop]),
            ..Default::default()
        };
        let v = validate_config(&cfg);
        assert!(v.is_ok());
        assert!(v.warnings().any(|w| w.message.starts_with("add absent")));
    }

    #[test]
    fn flat_with_graph_fields_warns() {
        let cfg = PipelineConfig {
            expansion: Expansion::OneHop,
            ..Default::default()
        };
        let v = validate_config(&cfg);
        assert!(v.is_ok());
        assert!(v.warnings().any(|w| w.message.contains("ignored")));
    }

    #[test]
    fn graph_schema_must_match_strategy() {
        let mut cfg = PipelineConfig::desc_graph();
        assert!(validate_config(&cfg).is_ok());
        cfg.graph_schema = GraphSchema::Sim;
        assert!(!validate_config(&cfg).is_ok());
        cfg.key_strategy = KeyStrategy::MergeAll;
        assert!(validate_config(&cfg).is_ok());
    }

    #[test]
    fn canonical_ids() {
        assert_eq!(
            canonical_session_id("lme_s", "answer_7a87bd0c").unwrap(),
            "lme_s/answer_7a87bd0c"
        );
        assert!(matches!(
            canonical_session_id("lme_s", ""),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn registry_dedupes_identical_and_splits_different() {
        let mut reg = SessionIdRegistry::new("c");
        let a = reg.assign("s1", "aaaaaaaaaaaa").unwrap();
        let same = reg.assign("s1", "aaaaaaaaaaaa").unwrap();
        let other = reg.assign("s1", "bbbbbbbbbbbb").unwrap();
        assert_eq!(a, Assigned::New("c/s1".into()));
        assert_eq!(same, Assigned::Existing("c/s1".into()));
        assert_eq!(other, Assigned::New("c/s1#bbbbbbbb".into()));
    }

    #[test]
    fn embedding_rejects_bad_input() {
        assert_eq!(Embedding::normalize(&[0.0, 0.0]), Err(EmbeddingError::Zero));
        assert_eq!(
            Embedding::normalize(&[f64::NAN, 1.0]),
            Err(EmbeddingError::NonFinite)
        );
        let e = Embedding::normalize(&[3.0, 4.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < NORM_TOLERANCE);
        let r = Embedding::reserved(4);
        assert!(r.is_degenerate());
        assert_eq!(r.values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dates_render_and_parse() {
        let d: CalendarDate = "2023/06/11".parse().unwrap();
        assert_eq!(d.to_string(), "2023/06/11");
        assert_eq!(
            CalendarDate::parse_prefix("2023/05/20 (Sat) 02:21"),
            CalendarDate::from_ymd(2023, 5, 20)
        );
        assert!("2023/02/30".parse::<CalendarDate>().is_err());
    }

    #[test]
    fn session_user_text_skips_assistant_and_empty() {
        let s = Session::new(
            "s",
            CalendarDate::from_ymd(2023, 1, 1).unwrap(),
            [
                (Role::User, " hello ".to_string()),
                (Role::Assistant, "hi".to_string()),
                (Role::User, "   ".to_string()),
                (Role::User, "bye".to_string()),
            ],
        );
        assert_eq!(s.user_text(), "hello\nbye");
        assert_eq!(s.turns.len(), 4);
        s.check_invariants().unwrap();
    }
}

//! Flat key organizations, exact cosine search and key→value mapping.
//!
//! Facts are the unit that maintenance operates on. Under the separate
//! strategy every fact is a searchable key; under the merge strategies facts
//! are stored as internal (non-searchable) units and each session's merged
//! keys are rebuilt from its current facts whenever they change.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::embed::{Embedder, EmbedderSpec};
use crate::backend::FlatExtraction;
use crate::error::{Error, Result};
use crate::model::{Embedding, KeyKind, KeyStrategy, KeyUnit, Session, ValueKind, ValueRef};

pub const FACT_JOIN: &str = "\n";
pub const KEYWORD_JOIN: &str = "; ";
const FORMAT_VERSION: u32 = 1;

/// Text of a key before it is embedded and given an id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyDraft {
    pub kind: KeyKind,
    /// Which kind of extracted content the key carries; distinguishes the
    /// fact group from the keyword group under merge-by-type.
    pub part: KeyKind,
    pub text: String,
}

impl KeyDraft {
    fn new(kind: KeyKind, part: KeyKind, text: impl Into<String>) -> Self {
        KeyDraft {
            kind,
            part,
            text: text.into(),
        }
    }
}

/// `summary`, facts and keywords joined into one text, skipping empty parts.
pub fn merged_all_text(extraction: &FlatExtraction) -> String {
    let mut parts: Vec<String> = Vec::new();
    if !extraction.summary.trim().is_empty() {
        parts.push(extraction.summary.clone());
    }
    parts.extend(extraction.facts.iter().cloned());
    if !extraction.keywords.is_empty() {
        parts.push(extraction.keywords.join(KEYWORD_JOIN));
    }
    parts.join(FACT_JOIN)
}

/// Session-level keys for `strategy`. Separate-strategy fact keys are
/// included; merge strategies fold facts into their group keys. Empty texts
/// never become keys.
pub fn build_keys(session: &Session, extraction: &FlatExtraction, strategy: KeyStrategy) -> Vec<KeyDraft> {
    let mut drafts = Vec::new();
    let user_text = session.user_text();
    let session_key = |drafts: &mut Vec<KeyDraft>| {
        if !user_text.trim().is_empty() {
            drafts.push(KeyDraft::new(KeyKind::SessionText, KeyKind::SessionText, user_text.clone()));
        }
    };
    match strategy {
        KeyStrategy::SessionOnly => session_key(&mut drafts),
        KeyStrategy::SeparateSfk => {
            if !extraction.summary.trim().is_empty() {
                drafts.push(KeyDraft::new(KeyKind::Summary, KeyKind::Summary, &extraction.summary));
            }
            for fact in &extraction.facts {
                drafts.push(KeyDraft::new(KeyKind::Fact, KeyKind::Fact, fact));
            }
            for keyword in &extraction.keywords {
                drafts.push(KeyDraft::new(KeyKind::Keyword, KeyKind::Keyword, keyword));
            }
        }
        KeyStrategy::MergeByType => {
            if !extraction.summary.trim().is_empty() {
                drafts.push(KeyDraft::new(KeyKind::Summary, KeyKind::Summary, &extraction.summary));
            }
            if !extraction.facts.is_empty() {
                drafts.push(KeyDraft::new(
                    KeyKind::MergedTypeGroup,
                    KeyKind::Fact,
                    extraction.facts.join(FACT_JOIN),
                ));
            }
            if !extraction.keywords.is_empty() {
                drafts.push(KeyDraft::new(
                    KeyKind::MergedTypeGroup,
                    KeyKind::Keyword,
                    extraction.keywords.join(KEYWORD_JOIN),
                ));
            }
        }
        KeyStrategy::MergeAll | KeyStrategy::SessionPlusMerged => {
            if strategy == KeyStrategy::SessionPlusMerged {
                session_key(&mut drafts);
            }
            let text = merged_all_text(extraction);
            if !text.trim().is_empty() {
                drafts.push(KeyDraft::new(KeyKind::MergedAll, KeyKind::MergedAll, text));
            }
        }
        KeyStrategy::GraphEntities => {}
    }
    if drafts.is_empty() && strategy != KeyStrategy::GraphEntities {
        log::warn!(
            "session {} produced no keys under {:?}",
            session.session_id,
            strategy
        );
    }
    drafts
}

/// Whether the strategy needs a flat extraction at all.
pub fn needs_extraction(strategy: KeyStrategy) -> bool {
    !matches!(strategy, KeyStrategy::SessionOnly | KeyStrategy::GraphEntities)
}

/// Whether facts are searchable keys (separate) or internal units (merge).
fn facts_internal(strategy: KeyStrategy) -> bool {
    matches!(
        strategy,
        KeyStrategy::MergeByType | KeyStrategy::MergeAll | KeyStrategy::SessionPlusMerged
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredKey {
    pub unit: KeyUnit,
    pub part: KeyKind,
    /// Internal units are maintained but never returned by search.
    pub internal: bool,
    /// Session that owns a per-session key; `None` for fact units, which may
    /// be shared across sessions through updates.
    pub owner: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub session_id: String,
    pub user_text: String,
    pub summary: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionScore {
    pub session_id: String,
    pub per_type_scores: BTreeMap<KeyKind, f64>,
    pub final_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    strategy: KeyStrategy,
    spec: EmbedderSpec,
    keys: Vec<StoredKey>,
    positions: HashMap<String, usize>,
    sessions: Vec<SessionEntry>,
    session_positions: HashMap<String, usize>,
    next_seq: u64,
}

/// Descending score, then older first, then key id.
pub fn compare_ranked(a: (f64, u64, &str), b: (f64, u64, &str)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.cmp(&b.1))
        .then_with(|| a.2.cmp(b.2))
}

impl FlatIndex {
    pub fn new(strategy: KeyStrategy, spec: EmbedderSpec) -> Self {
        FlatIndex {
            strategy,
            spec,
            keys: Vec::new(),
            positions: HashMap::new(),
            sessions: Vec::new(),
            session_positions: HashMap::new(),
            next_seq: 0,
        }
    }

    pub fn strategy(&self) -> KeyStrategy {
        self.strategy
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    pub fn keys(&self) -> &[StoredKey] {
        &self.keys
    }

    /// Keys visible to search.
    pub fn searchable(&self) -> impl Iterator<Item = &KeyUnit> {
        self.keys.iter().filter(|k| !k.internal).map(|k| &k.unit)
    }

    pub fn len(&self) -> usize {
        self.searchable().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key_id: &str) -> Option<&StoredKey> {
        self.positions.get(key_id).map(|&i| &self.keys[i])
    }

    pub fn sessions(&self) -> &[SessionEntry] {
        &self.sessions
    }

    pub fn session(&self, session_id: &str) -> Option<&SessionEntry> {
        self.session_positions.get(session_id).map(|&i| &self.sessions[i])
    }

    /// Fact units (searchable or internal) whose provenance includes the session.
    pub fn session_facts(&self, session_id: &str) -> Vec<&KeyUnit> {
        self.keys
            .iter()
            .filter(|k| k.part == KeyKind::Fact && k.unit.kind == KeyKind::Fact)
            .filter(|k| k.unit.provenance_session_ids.iter().any(|s| s == session_id))
            .map(|k| &k.unit)
            .collect()
    }

    fn next_key_id(&mut self) -> (String, u64) {
        let seq = self.next_seq;
        self.next_seq += 1;
        (format!("k{seq}"), seq)
    }

    fn embed(&self, embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Embedding>> {
        if embedder.spec() != &self.spec {
            return Err(Error::Input(format!(
                "embedder {} does not match index embedder {}",
                embedder.spec().name,
                self.spec.name
            )));
        }
        let vectors = embedder.embed_texts(texts)?;
        for v in &vectors {
            v.check_dimension(self.spec.dimension)?;
        }
        Ok(vectors)
    }

    fn push(&mut self, unit: KeyUnit, part: KeyKind, internal: bool, owner: Option<String>) {
        self.positions.insert(unit.key_id.clone(), self.keys.len());
        self.keys.push(StoredKey {
            unit,
            part,
            internal,
            owner,
        });
    }

    /// Records the session's extracted summary/keywords so its derived keys
    /// can be rebuilt later.
    pub fn register_session(&mut self, session: &Session, extraction: &FlatExtraction) {
        let entry = SessionEntry {
            session_id: session.session_id.clone(),
            user_text: session.user_text(),
            summary: extraction.summary.clone(),
            keywords: extraction.keywords.clone(),
        };
        match self.session_positions.get(&session.session_id) {
            Some(&i) => self.sessions[i] = entry,
            None => {
                self.session_positions
                    .insert(session.session_id.clone(), self.sessions.len());
                self.sessions.push(entry);
            }
        }
    }

    /// Appends a fact unit and returns its key id.
    pub fn add_fact(&mut self, embedder: &dyn Embedder, text: &str, session_id: &str) -> Result<String> {
        let embedding = self.embed(embedder, &[text.to_string()])?.remove(0);
        let (key_id, seq) = self.next_key_id();
        let unit = KeyUnit {
            key_id: key_id.clone(),
            kind: KeyKind::Fact,
            text: text.to_string(),
            embedding,
            provenance_session_ids: vec![session_id.to_string()],
            created_at: seq,
        };
        let internal = facts_internal(self.strategy);
        self.push(unit, KeyKind::Fact, internal, None);
        Ok(key_id)
    }

    /// Replaces a key's text, re-embeds it and appends provenance. The key id
    /// and creation order are preserved.
    pub fn update_key(
        &mut self,
        embedder: &dyn Embedder,
        key_id: &str,
        text: &str,
        session_id: &str,
    ) -> Result<()> {
        let pos = *self
            .positions
            .get(key_id)
            .ok_or_else(|| Error::NotFound(format!("key {key_id}")))?;
        let embedding = self.embed(embedder, &[text.to_string()])?.remove(0);
        let unit = &mut self.keys[pos].unit;
        unit.text = text.to_string();
        unit.embedding = embedding;
        unit.add_provenance(session_id);
        Ok(())
    }

    /// Removes a key, returning it.
    pub fn remove_key(&mut self, key_id: &str) -> Result<StoredKey> {
        let pos = self
            .positions
            .remove(key_id)
            .ok_or_else(|| Error::NotFound(format!("key {key_id}")))?;
        let removed = self.keys.remove(pos);
        for (i, k) in self.keys.iter().enumerate().skip(pos) {
            self.positions.insert(k.unit.key_id.clone(), i);
        }
        Ok(removed)
    }

    /// Brings the session's per-session keys in line with its current facts,
    /// summary and keywords. Unchanged keys keep their id and embedding;
    /// changed single-slot keys are rewritten in place.
    pub fn rebuild_session(&mut self, embedder: &dyn Embedder, session_id: &str) -> Result<()> {
        let entry = self
            .session(session_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        let facts: Vec<String> = self
            .session_facts(session_id)
            .into_iter()
            .map(|u| u.text.clone())
            .collect();
        let extraction = FlatExtraction {
            summary: entry.summary.clone(),
            facts,
            keywords: entry.keywords.clone(),
        };
        let pseudo = Session {
            session_id: session_id.to_string(),
            date: crate::model::CalendarDate::from_ymd(1970, 1, 1).expect("valid date"),
            turns: Vec::new(),
        };
        let mut drafts = build_keys(&pseudo, &extraction, self.strategy);
        // build_keys reads the user text from the session turns; the stored
        // text is authoritative here.
        if matches!(
            self.strategy,
            KeyStrategy::SessionOnly | KeyStrategy::SessionPlusMerged
        ) && !entry.user_text.trim().is_empty()
        {
            drafts.insert(
                0,
                KeyDraft::new(KeyKind::SessionText, KeyKind::SessionText, entry.user_text.clone()),
            );
        }
        // Fact keys are owned by maintenance, not by the session.
        drafts.retain(|d| d.kind != KeyKind::Fact);

        let owned: Vec<usize> = self
            .keys
            .iter()
            .enumerate()
            .filter(|(_, k)| k.owner.as_deref() == Some(session_id))
            .map(|(i, _)| i)
            .collect();
        let mut matched: HashSet<usize> = HashSet::new();
        let mut rewrite: Vec<(usize, String)> = Vec::new();
        let mut create: Vec<KeyDraft> = Vec::new();
        for draft in drafts {
            let same = owned.iter().copied().find(|&i| {
                !matched.contains(&i)
                    && self.keys[i].part == draft.part
                    && self.keys[i].unit.kind == draft.kind
                    && self.keys[i].unit.text == draft.text
            });
            if let Some(i) = same {
                matched.insert(i);
                continue;
            }
            let single_slot = draft.kind != KeyKind::Keyword;
            let slot = owned.iter().copied().find(|&i| {
                single_slot
                    && !matched.contains(&i)
                    && self.keys[i].part == draft.part
                    && self.keys[i].unit.kind == draft.kind
            });
            match slot {
                Some(i) => {
                    matched.insert(i);
                    rewrite.push((i, draft.text));
                }
                None => create.push(draft),
            }
        }

        let texts: Vec<String> = rewrite
            .iter()
            .map(|(_, t)| t.clone())
            .chain(create.iter().map(|d| d.text.clone()))
            .collect();
        let mut vectors = if texts.is_empty() {
            Vec::new()
        } else {
            self.embed(embedder, &texts)?
        }
        .into_iter();
        for (i, text) in rewrite {
            let unit = &mut self.keys[i].unit;
            unit.text = text;
            unit.embedding = vectors.next().expect("one vector per text");
        }
        let stale: Vec<String> = owned
            .iter()
            .filter(|i| !matched.contains(i))
            .map(|&i| self.keys[i].unit.key_id.clone())
            .collect();
        for draft in create {
            let (key_id, seq) = self.next_key_id();
            let unit = KeyUnit {
                key_id,
                kind: draft.kind,
                text: draft.text,
                embedding: vectors.next().expect("one vector per text"),
                provenance_session_ids: vec![session_id.to_string()],
                created_at: seq,
            };
            self.push(unit, draft.part, false, Some(session_id.to_string()));
        }
        for key_id in stale {
            self.remove_key(&key_id)?;
        }
        Ok(())
    }

    /// Exact cosine top-k over searchable, non-degenerate keys accepted by
    /// `filter`. Ordering: score desc, then `created_at` asc, then key id.
    pub fn search_where(
        &self,
        query: &Embedding,
        k: usize,
        filter: impl Fn(&StoredKey) -> bool,
    ) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::Input("k must be positive".into()));
        }
        query.check_dimension(self.spec.dimension)?;
        let mut scored: Vec<(f64, &KeyUnit)> = self
            .keys
            .iter()
            .filter(|k| !k.unit.embedding.is_degenerate() && filter(k))
            .map(|k| (query.cosine(&k.unit.embedding), &k.unit))
            .collect();
        let cmp = |a: &(f64, &KeyUnit), b: &(f64, &KeyUnit)| {
            compare_ranked(
                (a.0, a.1.created_at, &a.1.key_id),
                (b.0, b.1.created_at, &b.1.key_id),
            )
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(s, u)| (u.key_id.clone(), s))
            .collect())
    }

    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<(String, f64)>> {
        self.search_where(query, k, |key| !key.internal)
    }

    /// Averages each session's per-type cosines over the types it has, and
    /// returns the top `k_sessions` sessions. Ties keep session order.
    pub fn score_sessions_merge_by_type(
        &self,
        query: &Embedding,
        k_sessions: usize,
        session_filter: impl Fn(&str) -> bool,
    ) -> Result<Vec<SessionScore>> {
        if k_sessions == 0 {
            return Err(Error::Input("k must be positive".into()));
        }
        query.check_dimension(self.spec.dimension)?;
        let mut per_session: BTreeMap<usize, BTreeMap<KeyKind, f64>> = BTreeMap::new();
        for key in self.keys.iter().filter(|k| !k.internal) {
            let Some(owner) = key.owner.as_deref() else {
                continue;
            };
            if key.unit.embedding.is_degenerate() || !session_filter(owner) {
                continue;
            }
            let Some(&pos) = self.session_positions.get(owner) else {
                continue;
            };
            let score = query.cosine(&key.unit.embedding);
            let slot = per_session.entry(pos).or_default().entry(key.part).or_insert(score);
            *slot = slot.max(score);
        }
        let mut scores: Vec<(usize, SessionScore)> = per_session
            .into_iter()
            .map(|(pos, per_type)| {
                let final_score = per_type.values().sum::<f64>() / per_type.len() as f64;
                (
                    pos,
                    SessionScore {
                        session_id: self.sessions[pos].session_id.clone(),
                        per_type_scores: per_type,
                        final_score,
                    },
                )
            })
            .collect();
        scores.sort_by(|a, b| b.1.final_score.total_cmp(&a.1.final_score).then(a.0.cmp(&b.0)));
        Ok(scores.into_iter().take(k_sessions).map(|(_, s)| s).collect())
    }

    /// Collapses ranked keys into at most `n_values` values, each scored by
    /// its best contributing key.
    pub fn map_to_values(
        &self,
        ranked_keys: &[(String, f64)],
        n_values: usize,
        value_kind: ValueKind,
    ) -> Vec<(ValueRef, f64)> {
        match value_kind {
            ValueKind::Key => ranked_keys
                .iter()
                .take(n_values)
                .map(|(id, s)| (ValueRef::key(id.clone()), *s))
                .collect(),
            ValueKind::Session => {
                let mut seen = HashSet::new();
                let mut out = Vec::new();
                for (key_id, score) in ranked_keys {
                    let Some(key) = self.get(key_id) else {
                        continue;
                    };
                    for sid in &key.unit.provenance_session_ids {
                        if out.len() < n_values && seen.insert(sid.clone()) {
                            out.push((ValueRef::session(sid.clone()), *score));
                        }
                    }
                }
                out
            }
        }
    }

    /// Value ids for each searchable key.
    pub fn value_map(&self, value_kind: ValueKind) -> BTreeMap<String, Vec<String>> {
        self.searchable()
            .map(|u| {
                let values = match value_kind {
                    ValueKind::Session => u.provenance_session_ids.clone(),
                    ValueKind::Key => vec![u.key_id.clone()],
                };
                (u.key_id.clone(), values)
            })
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for key in &self.keys {
            if !ids.insert(key.unit.key_id.as_str()) {
                return Err(Error::Input(format!("duplicate key id {}", key.unit.key_id)));
            }
            if key.unit.provenance_session_ids.is_empty() {
                return Err(Error::Input(format!("key {} has no provenance", key.unit.key_id)));
            }
            key.unit.embedding.check_dimension(self.spec.dimension)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FlatMeta {
    format_version: u32,
    strategy: KeyStrategy,
    embedder: EmbedderSpec,
    dimension: usize,
    fact_join: String,
    keyword_join: String,
    next_seq: u64,
    key_count: usize,
    session_count: usize,
}

#[derive(Serialize, Deserialize)]
struct KeyRecord {
    key_id: String,
    kind: KeyKind,
    part: KeyKind,
    internal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    owner: Option<String>,
    text: String,
    provenance_session_ids: Vec<String>,
    created_at: u64,
    degenerate: bool,
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(rows)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Row-major little-endian f32 matrix.
pub(crate) fn write_matrix<'a>(path: &Path, rows: impl IntoIterator<Item = &'a Embedding>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        for v in row.values() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_matrix(path: &Path, rows: usize, dimension: usize) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * dimension * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {rows}x{dimension}, found {}", rows * dimension * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4 * dimension.max(1))
        .take(rows)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect())
}

impl FlatIndex {
    /// Writes `meta.json`, `keys.jsonl`, `sessions.jsonl` and
    /// `embeddings.f32` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = FlatMeta {
            format_version: FORMAT_VERSION,
            strategy: self.strategy,
            embedder: self.spec.clone(),
            dimension: self.spec.dimension,
            fact_join: FACT_JOIN.into(),
            keyword_join: KEYWORD_JOIN.into(),
            next_seq: self.next_seq,
            key_count: self.keys.len(),
            session_count: self.sessions.len(),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        write_jsonl(
            &dir.join("keys.jsonl"),
            self.keys.iter().map(|k| KeyRecord {
                key_id: k.unit.key_id.clone(),
                kind: k.unit.kind,
                part: k.part,
                internal: k.internal,
                owner: k.owner.clone(),
                text: k.unit.text.clone(),
                provenance_session_ids: k.unit.provenance_session_ids.clone(),
                created_at: k.unit.created_at,
                degenerate: k.unit.embedding.is_degenerate(),
            }),
        )?;
        write_jsonl(&dir.join("sessions.jsonl"), &self.sessions)?;
        write_matrix(&dir.join("embeddings.f32"), self.keys.iter().map(|k| &k.unit.embedding))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: FlatMeta = read_json(&meta_path)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(&meta_path, format!("unsupported format {}", meta.format_version)));
        }
        if meta.fact_join != FACT_JOIN || meta.keyword_join != KEYWORD_JOIN {
            return Err(Error::format(&meta_path, "index was built with different delimiters"));
        }
        let records: Vec<KeyRecord> = read_jsonl(&dir.join("keys.jsonl"))?;
        if records.len() != meta.key_count {
            return Err(Error::format(&meta_path, "key count does not match keys.jsonl"));
        }
        let sessions: Vec<SessionEntry> = read_jsonl(&dir.join("sessions.jsonl"))?;
        let matrix = read_matrix(&dir.join("embeddings.f32"), records.len(), meta.dimension)?;
        let mut index = FlatIndex::new(meta.strategy, meta.embedder);
        index.next_seq = meta.next_seq;
        for (record, values) in records.into_iter().zip(matrix) {
            let embedding = Embedding::from_stored(values, record.degenerate)?;
            let unit = KeyUnit {
                key_id: record.key_id,
                kind: record.kind,
                text: record.text,
                embedding,
                provenance_session_ids: record.provenance_session_ids,
                created_at: record.created_at,
            };
            index.push(unit, record.part, record.internal, record.owner);
        }
        for entry in sessions {
            index
                .session_positions
                .insert(entry.session_id.clone(), index.sessions.len());
            index.sessions.push(entry);
        }
        index.check_invariants()?;
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::embed::HashEmbedder;
    use crate::model::{CalendarDate, Role};

    fn session(id: &str, text: &str) -> Session {
        Session::new(
            id,
            CalendarDate::from_ymd(2023, 5, 1).unwrap(),
            [(Role::User, text.to_string())],
        )
    }

    fn sample() -> FlatExtraction {
        FlatExtraction {
            summary: "a".into(),
            facts: vec!["b".into(), "c".into()],
            keywords: vec!["d".into()],
        }
    }

    #[test]
    fn key_drafts_per_strategy() {
        let s = session("s1", "hello there");
        let texts = |strategy| {
            build_keys(&s, &sample(), strategy)
                .into_iter()
                .map(|d| d.text)
                .collect::<Vec<_>>()
        };
        assert_eq!(texts(KeyStrategy::MergeByType), ["a", "b\nc", "d"]);
        assert_eq!(texts(KeyStrategy::MergeAll), ["a\nb\nc\nd"]);
        assert_eq!(texts(KeyStrategy::SeparateSfk).len(), 4);
        assert_eq!(texts(KeyStrategy::SessionOnly), ["hello there"]);
        assert_eq!(texts(KeyStrategy::SessionPlusMerged), ["hello there", "a\nb\nc\nd"]);
    }

    #[test]
    fn empty_extraction_keeps_session_key_only() {
        let s = session("s1", "hello there");
        let empty = FlatExtraction::default();
        assert!(build_keys(&s, &empty, KeyStrategy::MergeAll).is_empty());
        assert_eq!(build_keys(&s, &empty, KeyStrategy::SessionPlusMerged).len(), 1);
    }

    fn merged_index() -> (FlatIndex, HashEmbedder) {
        let e = HashEmbedder::new(64);
        let mut idx = FlatIndex::new(KeyStrategy::MergeAll, e.spec().clone());
        let s = session("s1", "I live in Munich.");
        let fx = FlatExtraction {
            summary: "I live in Munich.".into(),
            facts: vec![],
            keywords: vec!["munich".into()],
        };
        idx.register_session(&s, &fx);
        idx.add_fact(&e, "I live in Munich.", "s1").unwrap();
        idx.rebuild_session(&e, "s1").unwrap();
        (idx, e)
    }

    #[test]
    fn merged_key_tracks_fact_updates() {
        let (mut idx, e) = merged_index();
        assert_eq!(idx.len(), 1);
        let merged = idx.searchable().next().unwrap().clone();
        assert_eq!(merged.text, "I live in Munich.\nI live in Munich.\nmunich");
        let fact_id = idx.session_facts("s1")[0].key_id.clone();
        idx.update_key(&e, &fact_id, "I live in Berlin.", "s1").unwrap();
        idx.rebuild_session(&e, "s1").unwrap();
        let rebuilt = idx.searchable().next().unwrap();
        assert_eq!(rebuilt.key_id, merged.key_id);
        assert!(rebuilt.text.contains("Berlin"));
        assert_eq!(rebuilt.embedding, e.embed_one(&rebuilt.text));
    }

    #[test]
    fn rebuild_is_idempotent() {
        let (mut idx, e) = merged_index();
        let before = idx.clone();
        idx.rebuild_session(&e, "s1").unwrap();
        assert_eq!(idx, before);
    }

    #[test]
    fn search_orders_and_breaks_ties() {
        let e = HashEmbedder::new(64);
        let mut idx = FlatIndex::new(KeyStrategy::SeparateSfk, e.spec().clone());
        let k1 = idx.add_fact(&e, "red apple", "s1").unwrap();
        let k2 = idx.add_fact(&e, "apple red", "s2").unwrap();
        let k3 = idx.add_fact(&e, "blue sky", "s3").unwrap();
        let q = e.embed_one("red apple");
        let hits = idx.search(&q, 3).unwrap();
        assert_eq!(hits[0].0, k1);
        assert_eq!(hits[1].0, k2);
        assert_eq!(hits[2].0, k3);
        assert!(idx.search(&q, 0).is_err());
    }

    #[test]
    fn degenerate_and_internal_keys_are_skipped() {
        let e = HashEmbedder::new(64);
        let mut idx = FlatIndex::new(KeyStrategy::SeparateSfk, e.spec().clone());
        idx.add_fact(&e, "!!!", "s1").unwrap();
        assert!(idx.search(&e.embed_one("anything"), 5).unwrap().is_empty());
        let mut merged = FlatIndex::new(KeyStrategy::MergeAll, e.spec().clone());
        merged.add_fact(&e, "fact", "s1").unwrap();
        assert!(merged.search(&e.embed_one("fact"), 5).unwrap().is_empty());
    }

    #[test]
    fn values_collapse_to_best_key() {
        let e = HashEmbedder::new(16);
        let mut idx = FlatIndex::new(KeyStrategy::SeparateSfk, e.spec().clone());
        let a1 = idx.add_fact(&e, "x one", "A").unwrap();
        let a2 = idx.add_fact(&e, "x two", "A").unwrap();
        let b = idx.add_fact(&e, "x three", "B").unwrap();
        let ranked = vec![(a1.clone(), 0.9), (a2, 0.8), (b.clone(), 0.7)];
        let vals = idx.map_to_values(&ranked, 2, ValueKind::Session);
        assert_eq!(
            vals,
            vec![(ValueRef::session("A"), 0.9), (ValueRef::session("B"), 0.7)]
        );
        let keys = idx.map_to_values(&ranked, 2, ValueKind::Key);
        assert_eq!(keys[0].0, ValueRef::key(a1));
        assert_eq!(keys.len(), 2);
    }

    #[test]
    fn merge_by_type_mean_over_present_types() {
        let e = HashEmbedder::new(64);
        let mut idx = FlatIndex::new(KeyStrategy::MergeByType, e.spec().clone());
        let s = session("s1", "x");
        let fx = FlatExtraction {
            summary: "alpha beta".into(),
            facts: vec![],
            keywords: vec!["gamma".into()],
        };
        idx.register_session(&s, &fx);
        idx.rebuild_session(&e, "s1").unwrap();
        let q = e.embed_one("alpha beta gamma");
        let scores = idx.score_sessions_merge_by_type(&q, 5, |_| true).unwrap();
        assert_eq!(scores.len(), 1);
        let expected = (q.cosine(&e.embed_one("alpha beta")) + q.cosine(&e.embed_one("gamma"))) / 2.0;
        assert!((scores[0].final_score - expected).abs() < 1e-12);
        assert_eq!(scores[0].per_type_scores.len(), 2);
    }

    #[test]
    fn persistence_round_trip() {
        let (idx, _) = merged_index();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let loaded = FlatIndex::load(dir.path()).unwrap();
        assert_eq!(loaded, idx);
        let again = tempfile::tempdir().unwrap();
        loaded.save(again.path()).unwrap();
        for f in ["meta.json", "keys.jsonl", "sessions.jsonl", "embeddings.f32"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap()
            );
        }
    }
}

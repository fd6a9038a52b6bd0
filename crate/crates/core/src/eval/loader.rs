//! Corpus loaders. Three document shapes are accepted:
//!
//! * LongMemEval: a JSON array of questions, each carrying its own haystack
//!   (`haystack_session_ids`, `haystack_dates`, `haystack_sessions`) and the
//!   evidence ids in `answer_session_ids`.
//! * HaluMem-style: an object with `sessions` whose entries hold `dialogue`
//!   turns and optional `memory_points`, plus `questions`.
//! * Native: an object with `sessions` holding `turns`, plus `questions`;
//!   this is what the synthetic generators write.
//!
//! Session ids are canonicalized as `<corpus>/<raw id>`; repeated raw ids
//! with different content receive a content-hash suffix.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Assigned, CalendarDate, Role, Session, SessionIdRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkQuestion {
    pub question_id: String,
    pub question_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_date: Option<CalendarDate>,
    pub answer_text: String,
    /// Canonical ids of the evidence sessions that resolved.
    pub evidence_session_ids: Vec<String>,
    pub question_type: String,
    /// Canonical ids of the sessions this question may search, when the
    /// benchmark scopes a haystack per question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub haystack_session_ids: Option<Vec<String>>,
    /// Raw evidence ids that did not resolve to a loaded session.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unresolved_evidence: Vec<String>,
}

impl BenchmarkQuestion {
    /// Questions without resolvable evidence are excluded from retrieval metrics.
    pub fn is_flagged(&self) -> bool {
        self.evidence_session_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPoint {
    pub session_id: String,
    pub content: String,
    #[serde(default)]
    pub memory_type: String,
    #[serde(default)]
    pub is_update: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub sessions: Vec<Session>,
    pub questions: Vec<BenchmarkQuestion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub memory_points: Vec<MemoryPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.session_id == session_id)
    }

    /// Stable digest over session ids and contents, in corpus order.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in &self.sessions {
            h.update((s.session_id.len() as u64).to_le_bytes());
            h.update(s.session_id.as_bytes());
            h.update(s.content_digest().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Native on-disk shape written by the generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NativeDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub sessions: Vec<NativeSession>,
    #[serde(default)]
    pub questions: Vec<NativeQuestion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NativeSession {
    pub session_id: String,
    pub date: String,
    pub turns: Vec<NativeTurn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NativeTurn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NativeQuestion {
    pub question_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_date: Option<String>,
    pub answer: String,
    pub evidence_session_ids: Vec<String>,
    #[serde(default = "default_type")]
    pub question_type: String,
}

fn default_type() -> String {
    "default".into()
}

pub fn corpus_name_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "corpus".into())
}

/// Loads any supported document, detecting its shape.
pub fn load_corpus(path: &Path, name: Option<&str>) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let default_name = corpus_name_from_path(path);
    match &value {
        Value::Array(_) => load_longmemeval_value(path, &value, name.unwrap_or(&default_name)),
        Value::Object(map) => {
            let doc_name = map.get("name").and_then(Value::as_str);
            let name = name.or(doc_name).unwrap_or(&default_name).to_string();
            let halumem = map
                .get("sessions")
                .and_then(Value::as_array)
                .and_then(|s| s.first())
                .is_some_and(|s| s.get("dialogue").is_some());
            if halumem {
                load_halumem_value(path, &value, &name)
            } else {
                let doc: NativeDocument =
                    serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))?;
                native_to_corpus(path, doc, &name)
            }
        }
        _ => Err(Error::format(path, "expected a JSON array or object")),
    }
}

pub fn load_longmemeval(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    load_longmemeval_value(path, &value, &corpus_name_from_path(path))
}

fn field<'a>(path: &Path, entry: &'a Value, name: &str, at: &str) -> Result<&'a Value> {
    entry
        .get(name)
        .ok_or_else(|| Error::format(path, format!("{at}: missing field `{name}`")))
}

fn string_of(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn turns_of(raw: &Value, role_key: &str, text_key: &str) -> Option<Vec<(Role, String)>> {
    raw.as_array()?
        .iter()
        .map(|t| {
            let role = match t.get(role_key)?.as_str()?.to_ascii_lowercase().as_str() {
                "user" | "human" => Role::User,
                "assistant" | "ai" | "bot" | "system" => Role::Assistant,
                _ => return None,
            };
            Some((role, t.get(text_key)?.as_str()?.to_string()))
        })
        .collect()
}

struct Builder {
    registry: SessionIdRegistry,
    corpus: Corpus,
}

impl Builder {
    fn new(name: &str) -> Self {
        Builder {
            registry: SessionIdRegistry::new(name),
            corpus: Corpus {
                name: name.to_string(),
                ..Default::default()
            },
        }
    }

    /// Registers a session and returns its canonical id.
    fn add(&mut self, raw_id: &str, date: CalendarDate, turns: Vec<(Role, String)>) -> Result<String> {
        let mut session = Session::new(String::new(), date, turns);
        match self.registry.assign(raw_id, &session.content_digest())? {
            Assigned::New(id) => {
                session.session_id = id.clone();
                self.corpus.sessions.push(session);
                Ok(id)
            }
            Assigned::Existing(id) => Ok(id),
        }
    }

    fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.corpus.warnings.push(message);
    }
}

fn load_longmemeval_value(path: &Path, value: &Value, name: &str) -> Result<Corpus> {
    let entries = value
        .as_array()
        .ok_or_else(|| Error::format(path, "expected a JSON array of questions"))?;
    let mut b = Builder::new(name);
    for (qi, entry) in entries.iter().enumerate() {
        let at = format!("entry {qi}");
        let question_id = string_of(field(path, entry, "question_id", &at)?);
        let question_text = string_of(field(path, entry, "question", &at)?);
        let answer_text = string_of(field(path, entry, "answer", &at)?);
        let ids = field(path, entry, "haystack_session_ids", &at)?
            .as_array()
            .ok_or_else(|| Error::format(path, format!("{at}: haystack_session_ids is not a list")))?;
        let dates = field(path, entry, "haystack_dates", &at)?
            .as_array()
            .ok_or_else(|| Error::format(path, format!("{at}: haystack_dates is not a list")))?;
        let sessions = field(path, entry, "haystack_sessions", &at)?
            .as_array()
            .ok_or_else(|| Error::format(path, format!("{at}: haystack_sessions is not a list")))?;
        if ids.len() != sessions.len() || dates.len() != sessions.len() {
            b.warn(format!("{at} ({question_id}): haystack lists differ in length; skipped"));
            continue;
        }
        let mut local: HashMap<String, String> = HashMap::new();
        let mut haystack = Vec::new();
        for ((raw_id, date), turns) in ids.iter().zip(dates).zip(sessions) {
            let raw_id = string_of(raw_id);
            let Some(date) = date.as_str().and_then(CalendarDate::parse_prefix) else {
                b.warn(format!("{at}: session {raw_id} has an unparseable date; skipped"));
                continue;
            };
            let Some(turns) = turns_of(turns, "role", "content") else {
                b.warn(format!("{at}: session {raw_id} has malformed turns; skipped"));
                continue;
            };
            let id = b.add(&raw_id, date, turns)?;
            if !haystack.contains(&id) {
                haystack.push(id.clone());
            }
            local.insert(raw_id, id);
        }
        let evidence_raw: Vec<String> = entry
            .get("answer_session_ids")
            .and_then(Value::as_array)
            .map(|a| a.iter().map(string_of).collect())
            .unwrap_or_default();
        let (mut evidence, mut unresolved) = (Vec::new(), Vec::new());
        for raw in evidence_raw {
            match local.get(&raw) {
                Some(id) if !evidence.contains(id) => evidence.push(id.clone()),
                Some(_) => {}
                None => unresolved.push(raw),
            }
        }
        if !unresolved.is_empty() {
            b.warn(format!("{question_id}: unresolved evidence {unresolved:?}"));
        }
        b.corpus.questions.push(BenchmarkQuestion {
            question_id,
            question_text,
            question_date: entry
                .get("question_date")
                .and_then(Value::as_str)
                .and_then(CalendarDate::parse_prefix),
            answer_text,
            evidence_session_ids: evidence,
            question_type: entry
                .get("question_type")
                .map(string_of)
                .unwrap_or_else(default_type),
            haystack_session_ids: Some(haystack),
            unresolved_evidence: unresolved,
        });
    }
    Ok(b.corpus)
}

fn resolve_global(
    b: &mut Builder,
    map: &HashMap<String, String>,
    question_id: &str,
    raw: &[String],
) -> (Vec<String>, Vec<String>) {
    let (mut evidence, mut unresolved) = (Vec::new(), Vec::new());
    for r in raw {
        match map.get(r) {
            Some(id) if !evidence.contains(id) => evidence.push(id.clone()),
            Some(_) => {}
            None => unresolved.push(r.clone()),
        }
    }
    if !unresolved.is_empty() {
        b.warn(format!("{question_id}: unresolved evidence {unresolved:?}"));
    }
    (evidence, unresolved)
}

fn native_to_corpus(path: &Path, doc: NativeDocument, name: &str) -> Result<Corpus> {
    let mut b = Builder::new(name);
    let mut map: HashMap<String, String> = HashMap::new();
    for s in doc.sessions {
        let Some(date) = CalendarDate::parse_prefix(&s.date) else {
            b.warn(format!("session {} has an unparseable date; skipped", s.session_id));
            continue;
        };
        if s.session_id.trim().is_empty() {
            return Err(Error::format(path, "session with empty session_id"));
        }
        let id = b.add(&s.session_id, date, s.turns.into_iter().map(|t| (t.role, t.text)).collect())?;
        map.entry(s.session_id).or_insert(id);
    }
    for q in doc.questions {
        let (evidence, unresolved) = resolve_global(&mut b, &map, &q.question_id, &q.evidence_session_ids);
        b.corpus.questions.push(BenchmarkQuestion {
            question_date: q.question_date.as_deref().and_then(CalendarDate::parse_prefix),
            question_id: q.question_id,
            question_text: q.question,
            answer_text: q.answer,
            evidence_session_ids: evidence,
            question_type: q.question_type,
            haystack_session_ids: None,
            unresolved_evidence: unresolved,
        });
    }
    Ok(b.corpus)
}

fn load_halumem_value(path: &Path, value: &Value, name: &str) -> Result<Corpus> {
    let mut b = Builder::new(name);
    let mut map: HashMap<String, String> = HashMap::new();
    let sessions = value["sessions"].as_array().expect("checked by caller");
    for (i, s) in sessions.iter().enumerate() {
        let at = format!("session {i}");
        let raw_id = string_of(field(path, s, "session_id", &at)?);
        let date_raw = s
            .get("date")
            .or_else(|| s.get("start_time"))
            .and_then(Value::as_str)
            .ok_or_else(|| Error::format(path, format!("{at}: missing field `date`")))?;
        let Some(date) = CalendarDate::parse_prefix(date_raw) else {
            b.warn(format!("{at}: unparseable date {date_raw:?}; skipped"));
            continue;
        };
        let Some(turns) = turns_of(field(path, s, "dialogue", &at)?, "role", "content") else {
            b.warn(format!("{at}: malformed dialogue; skipped"));
            continue;
        };
        let id = b.add(&raw_id, date, turns)?;
        map.entry(raw_id).or_insert(id.clone());
        for point in s.get("memory_points").and_then(Value::as_array).into_iter().flatten() {
            let content = point
                .get("memory_content")
                .or_else(|| point.get("content"))
                .and_then(Value::as_str);
            if let Some(content) = content {
                b.corpus.memory_points.push(MemoryPoint {
                    session_id: id.clone(),
                    content: content.to_string(),
                    memory_type: point.get("memory_type").map(string_of).unwrap_or_default(),
                    is_update: point.get("is_update").and_then(Value::as_bool).unwrap_or(false),
                });
            }
        }
    }
    for (i, q) in value
        .get("questions")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .enumerate()
    {
        let at = format!("question {i}");
        let question_id = q.get("question_id").map(string_of).unwrap_or_else(|| format!("q{i}"));
        let raw: Vec<String> = q
            .get("evidence")
            .or_else(|| q.get("evidence_session_ids"))
            .and_then(Value::as_array)
            .map(|a| a.iter().map(string_of).collect())
            .unwrap_or_default();
        let (evidence, unresolved) = resolve_global(&mut b, &map, &question_id, &raw);
        b.corpus.questions.push(BenchmarkQuestion {
            question_text: string_of(field(path, q, "question", &at)?),
            answer_text: string_of(field(path, q, "answer", &at)?),
            question_date: q.get("question_date").and_then(Value::as_str).and_then(CalendarDate::parse_prefix),
            question_type: q.get("question_type").map(string_of).unwrap_or_else(default_type),
            question_id,
            evidence_session_ids: evidence,
            haystack_session_ids: None,
            unresolved_evidence: unresolved,
        });
    }
    Ok(b.corpus)
}

/// Writes a corpus in the native shape (raw ids = canonical ids without the
/// corpus prefix).
pub fn to_native(corpus: &Corpus) -> NativeDocument {
    let strip = |id: &str| {
        id.strip_prefix(&format!("{}/", corpus.name))
            .unwrap_or(id)
            .to_string()
    };
    NativeDocument {
        name: Some(corpus.name.clone()),
        sessions: corpus
            .sessions
            .iter()
            .map(|s| NativeSession {
                session_id: strip(&s.session_id),
                date: s.date.to_string(),
                turns: s
                    .turns
                    .iter()
                    .map(|t| NativeTurn {
                        role: t.role,
                        text: t.text.clone(),
                    })
                    .collect(),
            })
            .collect(),
        questions: corpus
            .questions
            .iter()
            .map(|q| NativeQuestion {
                question_id: q.question_id.clone(),
                question: q.question_text.clone(),
                question_date: q.question_date.map(|d| d.to_string()),
                answer: q.answer_text.clone(),
                evidence_session_ids: q.evidence_session_ids.iter().map(|e| strip(e)).collect(),
                question_type: q.question_type.clone(),
            })
            .collect(),
    }
}

pub fn write_native(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&to_native(corpus)).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Deterministic rule-based provider used for offline builds and tests.
//!
//! Rules:
//! - flat extraction: summary = first user sentence; facts = user sentences
//!   containing a digit or a copular verb; keywords = distinct non-stopword
//!   tokens in first-seen order.
//! - graph extraction: dated phrases become `Time` entities named by their
//!   resolved date; capitalised word runs (leading stopwords dropped) become
//!   entities, typed `Place` after a locative cue and `Other` otherwise;
//!   remaining numbers become `Statistic` entities. Every entity is linked to
//!   a `USER` node with strength 5; descriptions are the source sentence.
//! - prejudge: keep iff some sentence has at least 4 tokens.
//! - memory decision: exact normalised match is `noop`; same first three
//!   tokens with a different remainder is `update`; otherwise `add`.
//! - answer: first context line containing every question content word,
//!   else "I don't know".
//! - summarize: descriptions joined by a space, truncated to the limit.
//! - similarity judge: yes iff hash-embedding cosine >= 0.5.

use std::collections::HashSet;

use super::embed::HashEmbedder;
use super::{BackendRequest, FlatExtraction, MemOpDecision, Provider, RequestKind};
use crate::error::BackendError;
use crate::extraction::{
    entity_record, normalize_time, relation_record, EntityType, RawEntity, RawRelation,
    COMPLETE_MARKER, RECORD_SEP,
};
use crate::model::{CalendarDate, MemOp};
use crate::text::{content_words, is_stopword, normalize_for_match, sentences, tokens, COPULAS};

pub const MOCK_RELATION_STRENGTH: u8 = 5;
pub const MOCK_SIMILARITY_THRESHOLD: f64 = 0.5;
pub const MOCK_PREJUDGE_MIN_TOKENS: usize = 4;
pub const I_DONT_KNOW: &str = "I don't know";

pub struct MockProvider {
    embedder: HashEmbedder,
}

impl MockProvider {
    pub fn new(dimension: usize) -> Self {
        MockProvider {
            embedder: HashEmbedder::new(dimension),
        }
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn model(&self) -> &str {
        "rules-v1"
    }

    fn template_version(&self, _kind: RequestKind) -> String {
        format!("mock-d{}", self.embedder_dimension())
    }

    fn call(&self, request: &BackendRequest) -> Result<String, BackendError> {
        Ok(match request {
            BackendRequest::ExtractFlat { user_text, .. } => {
                serde_json::to_string(&extract_flat(user_text)).expect("serializes")
            }
            BackendRequest::ExtractGraph {
                dialogue_time,
                input_text,
            } => extract_graph(input_text, *dialogue_time),
            BackendRequest::Prejudge { chunk } => {
                if prejudge(chunk) { "keep" } else { "skip" }.to_string()
            }
            BackendRequest::DecideMemOp {
                new_fact,
                candidates,
            } => serde_json::to_string(&decide(new_fact, candidates)).expect("serializes"),
            BackendRequest::Answer {
                question, context, ..
            } => answer(question, context),
            BackendRequest::Summarize {
                descriptions,
                max_chars,
            } => summarize(descriptions, *max_chars),
            BackendRequest::JudgeSimilar { first, second } => {
                let cos = self
                    .embedder
                    .embed_one(first)
                    .cosine(&self.embedder.embed_one(second));
                if cos >= MOCK_SIMILARITY_THRESHOLD { "yes" } else { "no" }.to_string()
            }
        })
    }
}

impl MockProvider {
    fn embedder_dimension(&self) -> usize {
        use super::embed::Embedder;
        self.embedder.spec().dimension
    }
}

fn has_digit_or_copula(sentence: &str) -> bool {
    sentence.chars().any(|c| c.is_ascii_digit())
        || tokens(sentence).iter().any(|t| COPULAS.contains(&t.as_str()))
}

pub fn extract_flat(user_text: &str) -> FlatExtraction {
    let sents = sentences(user_text);
    let summary = sents.first().cloned().unwrap_or_default();
    let facts = sents
        .iter()
        .filter(|s| has_digit_or_copula(s))
        .cloned()
        .collect();
    let mut seen = HashSet::new();
    let keywords = content_words(user_text)
        .into_iter()
        .filter(|w| seen.insert(w.clone()))
        .collect();
    FlatExtraction {
        summary,
        facts,
        keywords,
    }
    .normalized()
}

const PLACE_CUES: &[&str] = &[
    "in", "at", "to", "from", "near", "visited", "visit", "visiting", "around", "toward",
];

fn sanitize(text: &str) -> String {
    text.replace(COMPLETE_MARKER, " ")
        .replace("<|>", " ")
        .replace(RECORD_SEP, "#")
        .replace('"', "'")
        .replace(['\n', '\r'], " ")
        .trim()
        .to_string()
}

/// A word with surrounding punctuation removed (internal `/`, `.`, `-`, `'`
/// kept so dates and decimals survive) plus its lowercase form.
struct Word {
    raw: String,
    lower: String,
}

fn words_of(sentence: &str) -> Vec<Word> {
    sentence
        .split_whitespace()
        .map(|w| {
            let trimmed = w.trim_matches(|c: char| !c.is_alphanumeric());
            let raw = trimmed
                .strip_suffix("'s")
                .or_else(|| trimmed.strip_suffix("’s"))
                .unwrap_or(trimmed)
                .to_string();
            Word {
                lower: raw.to_lowercase(),
                raw,
            }
        })
        .filter(|w| !w.raw.is_empty())
        .collect()
}

fn is_number(word: &str) -> bool {
    word.chars().next().is_some_and(|c| c.is_ascii_digit())
        && word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(|c| c.is_uppercase())
}

pub fn extract_graph(input_text: &str, dialogue_time: CalendarDate) -> String {
    let mut entities: Vec<RawEntity> = Vec::new();
    let mut relations: Vec<RawRelation> = Vec::new();
    let mut emitted: HashSet<(String, String)> = HashSet::new();

    for sentence in sentences(input_text) {
        let description = sanitize(&sentence);
        let words = words_of(&sentence);
        let mut consumed = vec![false; words.len()];
        let mut found: Vec<(String, EntityType)> = Vec::new();

        // Dated phrases, longest window first.
        let mut i = 0;
        while i < words.len() {
            let mut matched = 0;
            for len in (1..=4).rev() {
                if i + len > words.len() {
                    continue;
                }
                let phrase = words[i..i + len]
                    .iter()
                    .map(|w| w.lower.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                if let Some(date) = normalize_time(&phrase, dialogue_time).date() {
                    found.push((date.to_string(), EntityType::Time));
                    matched = len;
                    break;
                }
            }
            if matched > 0 {
                consumed[i..i + matched].iter_mut().for_each(|c| *c = true);
                i += matched;
            } else {
                i += 1;
            }
        }

        // Capitalised runs and numbers.
        let mut i = 0;
        while i < words.len() {
            if consumed[i] {
                i += 1;
                continue;
            }
            if is_number(&words[i].raw) {
                found.push((words[i].raw.trim_end_matches(['.', ',']).to_string(), EntityType::Statistic));
                i += 1;
                continue;
            }
            if !is_capitalized(&words[i].raw) {
                i += 1;
                continue;
            }
            let start = i;
            while i < words.len() && !consumed[i] && is_capitalized(&words[i].raw) {
                i += 1;
            }
            let run: Vec<&Word> = words[start..i]
                .iter()
                .skip_while(|w| is_stopword(&w.lower))
                .collect();
            if run.is_empty() {
                continue;
            }
            let lead = start + (i - start - run.len());
            let etype = match lead.checked_sub(1).map(|p| words[p].lower.as_str()) {
                Some(cue) if PLACE_CUES.contains(&cue) => EntityType::Place,
                _ => EntityType::Other,
            };
            let name = run.iter().map(|w| w.raw.as_str()).collect::<Vec<_>>().join(" ");
            found.push((name, etype));
        }

        for (name, etype) in found {
            let name = crate::extraction::canonical_name(&name);
            if name == "USER" || !emitted.insert((name.clone(), description.clone())) {
                continue;
            }
            entities.push(RawEntity {
                name: name.clone(),
                etype,
                description: description.clone(),
                time_unresolved: false,
            });
            relations.push(RawRelation {
                source: "USER".into(),
                target: name,
                description: description.clone(),
                strength: MOCK_RELATION_STRENGTH,
            });
        }
    }

    if entities.is_empty() {
        return COMPLETE_MARKER.to_string();
    }
    let user = RawEntity {
        name: "USER".into(),
        etype: EntityType::User,
        description: "The user.".into(),
        time_unresolved: false,
    };
    let mut records = vec![entity_record(&user)];
    records.extend(entities.iter().map(entity_record));
    records.extend(relations.iter().map(relation_record));
    records.push(COMPLETE_MARKER.to_string());
    records.join(RECORD_SEP)
}

pub fn prejudge(chunk: &str) -> bool {
    sentences(chunk)
        .iter()
        .any(|s| tokens(s).len() >= MOCK_PREJUDGE_MIN_TOKENS)
}

pub fn decide(new_fact: &str, candidates: &[(String, String)]) -> MemOpDecision {
    let target = normalize_for_match(new_fact);
    if candidates
        .iter()
        .any(|(_, text)| normalize_for_match(text) == target)
    {
        return MemOpDecision {
            op: MemOp::Noop,
            target_key_id: None,
            revised_text: None,
            rationale: "exact duplicate".into(),
        };
    }
    let new_tokens = tokens(new_fact);
    if new_tokens.len() >= 3 {
        for (key_id, text) in candidates {
            let old = tokens(text);
            if old.len() >= 3 && old[..3] == new_tokens[..3] && old != new_tokens {
                return MemOpDecision {
                    op: MemOp::Update,
                    target_key_id: Some(key_id.clone()),
                    revised_text: Some(new_fact.to_string()),
                    rationale: format!("same subject as {key_id}"),
                };
            }
        }
    }
    MemOpDecision::add("novel")
}

pub fn answer(question: &str, context: &[String]) -> String {
    let needed: HashSet<String> = content_words(question).into_iter().collect();
    for line in context.iter().flat_map(|c| c.lines()) {
        let have: HashSet<String> = tokens(line).into_iter().collect();
        if !line.trim().is_empty() && needed.iter().all(|w| have.contains(w)) {
            return line.trim().to_string();
        }
    }
    I_DONT_KNOW.to_string()
}

pub fn summarize(descriptions: &[String], max_chars: usize) -> String {
    descriptions
        .iter()
        .map(|d| d.trim())
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .take(max_chars)
        .collect()
}

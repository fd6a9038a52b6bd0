//! Benchmark loading, metrics and evaluation runs.
//!
//! Recall is set recall (the fraction of evidence sessions found in the top
//! k), NDCG uses binary relevance. Key values are projected onto the sessions
//! they came from before scoring, so both value kinds are judged against the
//! same session-level ground truth.

pub mod loader;
pub mod metrics;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::remote::RemoteClient;
use crate::backend::{AnswerMode, Gateway};
use crate::engine::{Memory, RetrieveOptions};
use crate::error::{BackendError, Error, Result};
use crate::flat::{read_json, write_json};
use crate::model::{PipelineConfig, Query, ValueKind};
use crate::text::normalize_answer;

use loader::BenchmarkQuestion;
use metrics::{ndcg_at_k, recall_at_k};

pub const RECALL_DEFINITION: &str = "set recall: |top-k sessions ∩ evidence| / |evidence|, averaged over questions";
pub const RELEVANCE_DEFINITION: &str = "binary relevance; key values are projected to their source sessions";

/// Decides whether a generated answer is correct.
pub trait Judge: Sync {
    fn name(&self) -> &str;
    fn judge(&self, question: &BenchmarkQuestion, answer: &str) -> Result<bool>;
}

/// Correct iff the normalized gold answer occurs in the normalized answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContainmentJudge;

impl Judge for ContainmentJudge {
    fn name(&self) -> &str {
        "containment"
    }

    fn judge(&self, question: &BenchmarkQuestion, answer: &str) -> Result<bool> {
        let gold = normalize_answer(&question.answer_text);
        if gold.is_empty() {
            return Err(Error::Undefined(format!("{}: empty gold answer", question.question_id)));
        }
        let got = normalize_answer(answer);
        Ok(format!(" {got} ").contains(&format!(" {gold} ")))
    }
}

/// Asks a chat model whether the answer matches the reference.
pub struct RemoteJudge {
    client: Arc<RemoteClient>,
    model: String,
}

const JUDGE_TEMPLATE: &str = include_str!("../../assets/prompts/judge_answer.txt");

impl RemoteJudge {
    pub fn new(client: Arc<RemoteClient>, model: Option<String>) -> Self {
        let model = model.unwrap_or_else(|| client.config().chat_model.clone());
        RemoteJudge { client, model }
    }
}

impl Judge for RemoteJudge {
    fn name(&self) -> &str {
        "remote"
    }

    fn judge(&self, question: &BenchmarkQuestion, answer: &str) -> Result<bool> {
        let prompt = JUDGE_TEMPLATE
            .replace("{question}", &question.question_text)
            .replace("{reference}", &question.answer_text)
            .replace("{answer}", answer);
        let reply = self.client.chat(&self.model, &prompt)?;
        match reply.trim().trim_end_matches('.').to_ascii_lowercase().as_str() {
            "yes" => Ok(true),
            "no" => Ok(false),
            other => Err(Error::Backend(BackendError::Protocol(format!("judge replied {other:?}")))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub question_type: String,
    /// Retrieved value ids in rank order.
    pub retrieved: Vec<String>,
    /// Sessions behind the retrieved values, first occurrence kept.
    pub retrieved_sessions: Vec<String>,
    pub evidence: Vec<String>,
    /// 1-based rank of each evidence session in `retrieved_sessions`.
    pub evidence_ranks: Vec<Option<usize>>,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_at_5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_at_10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg_at_5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg_at_10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QuestionRecord {
    fn scored(&self) -> bool {
        self.recall_at_5.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub questions: usize,
    /// Questions with retrieval metrics.
    pub scored: usize,
    /// Questions excluded because no evidence resolved.
    pub flagged: usize,
    pub errors: usize,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub judged: usize,
    pub unjudged: usize,
}

impl Aggregates {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a QuestionRecord>, with_answers: bool) -> Self {
        let records: Vec<&QuestionRecord> = records.into_iter().collect();
        let scored: Vec<&&QuestionRecord> = records.iter().filter(|r| r.scored()).collect();
        let mean = |f: fn(&QuestionRecord) -> Option<f64>| {
            if scored.is_empty() {
                0.0
            } else {
                scored.iter().filter_map(|r| f(r)).sum::<f64>() / scored.len() as f64
            }
        };
        let judged: Vec<bool> = records.iter().filter_map(|r| r.correct).collect();
        let accuracy = (with_answers && !judged.is_empty())
            .then(|| judged.iter().filter(|c| **c).count() as f64 / judged.len() as f64);
        Aggregates {
            questions: records.len(),
            scored: scored.len(),
            flagged: records.iter().filter(|r| r.flagged).count(),
            errors: records.iter().filter(|r| r.error.is_some()).count(),
            recall_at_5: mean(|r| r.recall_at_5),
            recall_at_10: mean(|r| r.recall_at_10),
            ndcg_at_5: mean(|r| r.ndcg_at_5),
            ndcg_at_10: mean(|r| r.ndcg_at_10),
            accuracy,
            judged: judged.len(),
            unjudged: if with_answers {
                records.iter().filter(|r| r.answer.is_some() && r.correct.is_none()).count()
            } else {
                0
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub corpus: String,
    pub value_kind: ValueKind,
    pub k_keys: usize,
    pub n_values: usize,
    pub recall_definition: String,
    pub relevance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_mode: Option<AnswerMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub config: PipelineConfig,
    pub aggregates: Aggregates,
    pub by_type: BTreeMap<String, Aggregates>,
    pub questions: Vec<QuestionRecord>,
}

impl EvalReport {
    fn assemble(metadata: ReportMetadata, config: PipelineConfig, mut questions: Vec<QuestionRecord>) -> Self {
        questions.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        let with_answers = metadata.judge.is_some();
        let aggregates = Aggregates::from_records(&questions, with_answers);
        let mut groups: BTreeMap<String, Vec<&QuestionRecord>> = BTreeMap::new();
        for q in &questions {
            groups.entry(q.question_type.clone()).or_default().push(q);
        }
        let by_type = groups
            .into_iter()
            .map(|(t, rs)| (t, Aggregates::from_records(rs, with_answers)))
            .collect();
        EvalReport {
            metadata,
            config,
            aggregates,
            by_type,
            questions,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Structural checks a consumer can run on a report from disk.
    pub fn validate(&self) -> Result<()> {
        let again = EvalReport::assemble(self.metadata.clone(), self.config.clone(), self.questions.clone());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let (x, y) = (&self.aggregates, &again.aggregates);
        let consistent = x.questions == y.questions
            && x.scored == y.scored
            && close(x.recall_at_5, y.recall_at_5)
            && close(x.recall_at_10, y.recall_at_10)
            && close(x.ndcg_at_5, y.ndcg_at_5)
            && close(x.ndcg_at_10, y.ndcg_at_10)
            && x.accuracy.zip(y.accuracy).is_none_or(|(a, b)| close(a, b));
        if !consistent {
            return Err(Error::Input("report aggregates disagree with per-question values".into()));
        }
        for q in &self.questions {
            if q.retrieved.len() > self.metadata.n_values {
                return Err(Error::Input(format!("{}: more values than n", q.question_id)));
            }
            for v in [q.recall_at_5, q.recall_at_10, q.ndcg_at_5, q.ndcg_at_10].into_iter().flatten() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!("{}: metric out of range", q.question_id)));
                }
            }
        }
        Ok(())
    }
}

pub const TABLE_HEADER: &str = "value\tR@5\tR@10\tN@5\tN@10\tAcc";

/// One tab-separated row per labelled report, under [`TABLE_HEADER`].
pub fn table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for (label, r) in rows {
        let a = &r.aggregates;
        let acc = a.accuracy.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{label}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{acc}",
            a.recall_at_5, a.recall_at_10, a.ndcg_at_5, a.ndcg_at_10
        );
    }
    out
}

/// Label used for a report's row: the value kind it retrieved.
pub fn value_label(report: &EvalReport) -> &'static str {
    match report.metadata.value_kind {
        ValueKind::Session => "session",
        ValueKind::Key => "key",
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub k_keys: Option<usize>,
    pub n_values: Option<usize>,
    pub max_parallel: Option<usize>,
}

fn evaluate_question(
    memory: &Memory,
    q: &BenchmarkQuestion,
    k: usize,
    n: usize,
    answer: Option<(&Gateway, &dyn Judge, AnswerMode)>,
) -> QuestionRecord {
    let mut record = QuestionRecord {
        question_id: q.question_id.clone(),
        question_type: q.question_type.clone(),
        retrieved: Vec::new(),
        retrieved_sessions: Vec::new(),
        evidence: q.evidence_session_ids.clone(),
        evidence_ranks: Vec::new(),
        flagged: q.is_flagged(),
        recall_at_5: None,
        recall_at_10: None,
        ndcg_at_5: None,
        ndcg_at_10: None,
        answer: None,
        correct: None,
        error: None,
    };
    let query = match Query::new(q.question_text.clone()) {
        Ok(query) => query.with_date(q.question_date),
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let haystack: Option<HashSet<String>> = q.haystack_session_ids.as_ref().map(|h| h.iter().cloned().collect());
    let options = RetrieveOptions {
        k_keys: Some(k),
        n_values: Some(n),
        haystack: haystack.as_ref(),
    };
    let trace = match memory.retrieve(&query, options) {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let mut seen = HashSet::new();
    for v in &trace.values {
        record.retrieved.push(v.value.payload.clone());
        for s in memory.value_sessions(&v.value) {
            if seen.insert(s.clone()) {
                record.retrieved_sessions.push(s);
            }
        }
    }
    record.evidence_ranks = record
        .evidence
        .iter()
        .map(|e| record.retrieved_sessions.iter().position(|s| s == e).map(|p| p + 1))
        .collect();
    if !record.flagged {
        let gt: HashSet<String> = record.evidence.iter().cloned().collect();
        let r = &record.retrieved_sessions;
        record.recall_at_5 = recall_at_k(r, &gt, 5).ok();
        record.recall_at_10 = recall_at_k(r, &gt, 10).ok();
        record.ndcg_at_5 = ndcg_at_k(r, &gt, 5).ok();
        record.ndcg_at_10 = ndcg_at_k(r, &gt, 10).ok();
    }
    if let Some((gateway, judge, mode)) = answer {
        let context: Vec<String> = trace.values.iter().filter_map(|v| memory.value_text(&v.value)).collect();
        match gateway.generate_answer(&query, &context, mode) {
            Ok(text) => {
                match judge.judge(q, &text) {
                    Ok(c) => record.correct = Some(c),
                    Err(e) => record.error = Some(format!("judge: {e}")),
                }
                record.answer = Some(text);
            }
            Err(e) => record.error = Some(format!("answer: {e}")),
        }
    }
    record
}

fn run(
    memory: &Memory,
    questions: &[BenchmarkQuestion],
    corpus: &str,
    options: EvalOptions,
    n_default: usize,
    answer: Option<(&Gateway, &dyn Judge, AnswerMode)>,
) -> Result<EvalReport> {
    let k = options.k_keys.unwrap_or(memory.config.k_keys);
    let n = options.n_values.unwrap_or(n_default);
    if k == 0 || n == 0 {
        return Err(Error::Input("k and n must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.max_parallel.unwrap_or(crate::backend::remote::DEFAULT_MAX_PARALLEL).max(1))
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    let records: Vec<QuestionRecord> = pool.install(|| {
        questions
            .par_iter()
            .map(|q| evaluate_question(memory, q, k, n, answer))
            .collect()
    });
    let metadata = ReportMetadata {
        corpus: corpus.to_string(),
        value_kind: memory.config.value_kind,
        k_keys: k,
        n_values: n,
        recall_definition: RECALL_DEFINITION.into(),
        relevance: RELEVANCE_DEFINITION.into(),
        judge: answer.map(|(_, j, _)| j.name().to_string()),
        answer_mode: answer.map(|(_, _, m)| m),
    };
    Ok(EvalReport::assemble(metadata, memory.config.clone(), records))
}

/// Retrieval metrics for every question over a built memory.
pub fn run_retrieval_eval(
    memory: &Memory,
    questions: &[BenchmarkQuestion],
    corpus: &str,
    options: EvalOptions,
) -> Result<EvalReport> {
    run(memory, questions, corpus, options, memory.config.n_values, None)
}

/// Retrieval plus answer generation and judging. Without an explicit `n`,
/// 5 sessions or 20 keys are handed to the answering model.
pub fn run_qa_eval(
    memory: &Memory,
    questions: &[BenchmarkQuestion],
    corpus: &str,
    gateway: &Gateway,
    judge: &dyn Judge,
    mode: AnswerMode,
    options: EvalOptions,
) -> Result<EvalReport> {
    let n_default = PipelineConfig::default_answer_values(memory.config.value_kind);
    let options = EvalOptions {
        k_keys: options.k_keys.or(Some(memory.config.k_keys.max(n_default))),
        ..options
    };
    run(memory, questions, corpus, options, n_default, Some((gateway, judge, mode)))
}

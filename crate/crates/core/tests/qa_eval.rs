//! Question answering through retrieval, generation and judging.

mod common;

use std::fs;

use common::mock_build;
use dialmem_core::backend::{mock::I_DONT_KNOW, AnswerMode};
use dialmem_core::eval::loader::{load_corpus, Corpus};
use dialmem_core::eval::{run_qa_eval, run_retrieval_eval, ContainmentJudge, EvalOptions};
use dialmem_core::model::{KeyStrategy, MemOp, PipelineConfig, ValueKind};

const CORPUS: &str = r#"{
  "name": "qa",
  "sessions": [
    {"session_id": "a", "date": "2024/02/01", "turns": [
      {"role": "user", "text": "My brother Tomas moved to Porto in 2019."},
      {"role": "assistant", "text": "Porto is lovely."}]},
    {"session_id": "b", "date": "2024/02/03", "turns": [
      {"role": "user", "text": "I adopted a cat called Miso and she is shy."},
      {"role": "assistant", "text": "Give her time."}]},
    {"session_id": "c", "date": "2024/02/05", "turns": [
      {"role": "user", "text": "Our team meeting is every Tuesday at 9."},
      {"role": "assistant", "text": "Noted."}]}
  ],
  "questions": [
    {"question_id": "q1", "question": "Where was my brother Tomas moved to?", "answer": "Porto",
     "evidence_session_ids": ["a"]},
    {"question_id": "q2", "question": "What is my cat called?", "answer": "Miso",
     "evidence_session_ids": ["b"]},
    {"question_id": "q3", "question": "Which weekday is the team standup?", "answer": "Tuesday",
     "evidence_session_ids": ["c"]}
  ]
}"#;

fn corpus() -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qa.json");
    fs::write(&path, CORPUS).unwrap();
    load_corpus(&path, None).unwrap()
}

#[test]
fn answers_are_judged_against_gold() {
    let corpus = corpus();
    let (memory, gateway) = mock_build(&corpus, &PipelineConfig::default());
    for mode in [AnswerMode::Direct, AnswerMode::ChainOfNote] {
        let report = run_qa_eval(
            &memory,
            &corpus.questions,
            &corpus.name,
            &gateway,
            &ContainmentJudge,
            mode,
            EvalOptions::default(),
        )
        .unwrap();
        report.validate().unwrap();
        let by_id = |id: &str| report.questions.iter().find(|q| q.question_id == id).unwrap();
        // q1 and q2 share all content words with their evidence line; q3 asks
        // about a "standup", which no session mentions.
        assert_eq!(by_id("q1").correct, Some(true));
        assert_eq!(by_id("q2").correct, Some(true));
        assert_eq!(by_id("q3").answer.as_deref(), Some(I_DONT_KNOW));
        assert_eq!(by_id("q3").correct, Some(false));
        assert_eq!(report.aggregates.judged, 3);
        let acc = report.aggregates.accuracy.unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12, "{acc}");
    }
}

#[test]
fn answer_context_defaults_depend_on_value_kind() {
    let corpus = corpus();
    let config = PipelineConfig {
        key_strategy: KeyStrategy::SeparateSfk,
        value_kind: ValueKind::Key,
        op_set: [MemOp::Add, MemOp::Update, MemOp::Noop].into_iter().collect(),
        ..PipelineConfig::default()
    };
    let (memory, gateway) = mock_build(&corpus, &config);
    let report = run_qa_eval(
        &memory,
        &corpus.questions,
        &corpus.name,
        &gateway,
        &ContainmentJudge,
        AnswerMode::ChainOfNote,
        EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(report.metadata.n_values, PipelineConfig::default_answer_values(ValueKind::Key));
    assert!(report.questions.iter().all(|q| q.retrieved.len() <= 20));
    assert!(report.metadata.k_keys >= report.metadata.n_values);
}

#[test]
fn retrieval_only_reports_leave_accuracy_empty() {
    let corpus = corpus();
    let (memory, _) = mock_build(&corpus, &PipelineConfig::default());
    let report = run_retrieval_eval(&memory, &corpus.questions, &corpus.name, EvalOptions::default()).unwrap();
    report.validate().unwrap();
    assert_eq!(report.aggregates.accuracy, None);
    assert!(report.questions.iter().all(|q| q.answer.is_none() && q.correct.is_none()));
    assert!(report.aggregates.recall_at_5 > 0.99);
}

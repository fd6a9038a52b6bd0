//! Property tests over the index, metrics, parser and maintenance.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use proptest::prelude::*;

use common::{mock_build, DIM};
use dialmem_core::backend::embed::{EmbedderSpec, HashEmbedder};
use dialmem_core::backend::{FlatExtraction, Gateway};
use dialmem_core::eval::loader::Corpus;
use dialmem_core::eval::metrics::{ndcg_at_k, recall_at_k};
use dialmem_core::extraction::parse_extraction;
use dialmem_core::flat::FlatIndex;
use dialmem_core::maintenance::reconcile_session;
use dialmem_core::model::{CalendarDate, KeyKind, KeyStrategy, MemOp, PipelineConfig, Role, Session};
use dialmem_core::synthetic;

const WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
];

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..4).prop_map(|w| w.join(" "))
}

fn index_of(texts: &[String]) -> FlatIndex {
    let embedder = HashEmbedder::new(DIM);
    let mut index = FlatIndex::new(KeyStrategy::SeparateSfk, EmbedderSpec::hash_mock(DIM));
    for (i, t) in texts.iter().enumerate() {
        index.add_fact(&embedder, t, &format!("s{}", i % 7)).unwrap();
    }
    index
}

fn session(id: &str, text: &str) -> Session {
    Session::new(id, CalendarDate::from_ymd(2024, 1, 1).unwrap(), [(Role::User, text.to_string())])
}

fn all_ops() -> BTreeSet<MemOp> {
    [MemOp::Add, MemOp::Update, MemOp::Noop].into_iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_is_sorted_and_prefix_closed(texts in prop::collection::vec(text_strategy(), 1..80),
                                          query in text_strategy(), k in 1usize..20, extra in 0usize..20) {
        let index = index_of(&texts);
        let q = HashEmbedder::new(DIM).embed_one(&query);
        let small = index.search(&q, k).unwrap();
        let large = index.search(&q, k + extra).unwrap();
        prop_assert_eq!(small.len(), k.min(texts.len()));
        prop_assert!(large.starts_with(&small));
        prop_assert!(large.windows(2).all(|w| w[0].1 >= w[1].1));
        let ids: HashSet<_> = large.iter().map(|h| &h.0).collect();
        prop_assert_eq!(ids.len(), large.len());
    }

    #[test]
    fn recall_monotone_in_k(retrieved in prop::collection::vec(0u8..30, 0..20),
                            gt in prop::collection::btree_set(0u8..30, 1..6)) {
        let mut seen = HashSet::new();
        let retrieved: Vec<String> = retrieved.into_iter().filter(|x| seen.insert(*x)).map(|x| x.to_string()).collect();
        let gt: HashSet<String> = gt.into_iter().map(|x| x.to_string()).collect();
        let mut last = 0.0;
        for k in 1..=25 {
            let r = recall_at_k(&retrieved, &gt, k).unwrap();
            let n = ndcg_at_k(&retrieved, &gt, k).unwrap();
            prop_assert!(r >= last - 1e-12);
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0 + 1e-12).contains(&n));
            prop_assert_eq!(r == 0.0, n == 0.0);
            last = r;
        }
    }

    #[test]
    fn parser_is_total(input in ".{0,300}") {
        let report = parse_extraction(&input);
        prop_assert!(report.relations.iter().all(|r| (1..=10).contains(&r.strength)));
    }

    #[test]
    fn parser_keeps_every_well_formed_record(
        names in prop::collection::btree_set("[A-Z]{3,8}", 1..8),
        strengths in prop::collection::vec(1u8..=10, 8),
        delimiter in prop::sample::select(vec!["##", "\n", "##\n"]),
    ) {
        let names: Vec<String> = names.into_iter().collect();
        let mut records: Vec<String> = names
            .iter()
            .map(|n| format!("(\"entity\"<|>{n}<|>Person<|>{n} is someone)"))
            .collect();
        for (i, pair) in names.windows(2).enumerate() {
            records.push(format!(
                "(\"relationship\"<|>{}<|>{}<|>they know each other<|>{})",
                pair[0], pair[1], strengths[i]
            ));
        }
        let raw = format!("{}{delimiter}<|COMPLETE|>", records.join(delimiter));
        let report = parse_extraction(&raw);
        prop_assert_eq!(report.entities.len(), names.len());
        prop_assert_eq!(report.relations.len(), names.len() - 1);
        prop_assert!(report.warnings.is_empty(), "{:?}", report.warnings);
        prop_assert!(report.complete_marker_seen);
        for (i, r) in report.relations.iter().enumerate() {
            prop_assert_eq!(r.strength, strengths[i]);
        }
    }

    #[test]
    fn maintenance_conserves_facts_and_is_idempotent(
        facts in prop::collection::vec(prop::collection::vec(prop::sample::select(WORDS), 2..6), 1..12)
    ) {
        let embedder = HashEmbedder::new(DIM);
        let gateway = Gateway::mock(DIM);
        let mut index = FlatIndex::new(KeyStrategy::SeparateSfk, EmbedderSpec::hash_mock(DIM));
        let texts: Vec<String> = facts.iter().map(|w| w.join(" ")).collect();
        let extraction = FlatExtraction { summary: texts[0].clone(), facts: texts.clone(), keywords: vec![] }.normalized();
        let s = session("p/s1", &texts.join(". "));
        let first = reconcile_session(&mut index, &gateway, &embedder, &s, &extraction, &all_ops(), 5).unwrap();
        let fact_count = |i: &FlatIndex| i.keys().iter().filter(|k| k.unit.kind == KeyKind::Fact).count();
        prop_assert!(first.is_consistent());
        prop_assert_eq!(first.decisions.len(), extraction.facts.len());
        prop_assert_eq!(fact_count(&index), first.adds - first.deletes);
        let before = fact_count(&index);

        let s2 = session("p/s2", &texts.join(". "));
        let second = reconcile_session(&mut index, &gateway, &embedder, &s2, &extraction, &all_ops(), 5).unwrap();
        prop_assert_eq!(second.noops, extraction.facts.len());
        prop_assert_eq!(fact_count(&index), before);
        index.check_invariants().unwrap();
    }
}

fn merge_by_type_scores(corpus: &Corpus, query: &str) -> BTreeMap<String, f64> {
    let config = PipelineConfig {
        key_strategy: KeyStrategy::MergeByType,
        ..PipelineConfig::default()
    };
    let (memory, _) = mock_build(corpus, &config);
    let flat = memory.index.as_flat().unwrap();
    let q = HashEmbedder::new(DIM).embed_one(query);
    flat.score_sessions_merge_by_type(&q, usize::MAX, |_| true)
        .unwrap()
        .into_iter()
        .map(|s| (s.session_id, s.final_score))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn merge_by_type_scores_ignore_session_order(seed in 0u64..1000, shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let corpus = synthetic::random_dialogues(seed, 15);
        let mut permuted = corpus.clone();
        permuted.sessions.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
        let query = corpus.sessions[0].user_text();
        let a = merge_by_type_scores(&corpus, &query);
        let b = merge_by_type_scores(&permuted, &query);
        prop_assert_eq!(a.len(), b.len());
        for (sid, score) in &a {
            prop_assert!((score - b[sid]).abs() < 1e-12, "{} {} {}", sid, score, b[sid]);
        }
    }
}

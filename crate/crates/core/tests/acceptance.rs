//! Acceptance checks. Prints one line per criterion and exits non-zero if
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use common::{cli, dir_contents, mock_build, write_config, DIM};
use dialmem_core::backend::embed::{Embedder, EmbedderSpec, HashEmbedder};
use dialmem_core::backend::{mock, FlatExtraction, Gateway, RequestKind};
use dialmem_core::engine::{build, BuildOptions, RunManifest};
use dialmem_core::eval::loader::{load_corpus, Corpus};
use dialmem_core::eval::metrics::{ndcg_at_k, recall_at_k};
use dialmem_core::eval::{run_retrieval_eval, EvalOptions, EvalReport};
use dialmem_core::extraction::{canonical_name, parse_extraction, serialize_report, RawEntity, RawRelation, ParseReport};
use dialmem_core::flat::{merged_all_text, FlatIndex};
use dialmem_core::graph::retrieval::{activate, expand_one_hop, rank_values, ActivationSet};
use dialmem_core::graph::{DescriptionPolicy, Graph};
use dialmem_core::maintenance::ReconcileLog;
use dialmem_core::model::{
    Activation, CalendarDate, Expansion, GraphSchema, KeyKind, KeyStrategy, MemOp, PipelineConfig, Rerank, ValueKind,
};
use dialmem_core::synthetic;

enum Outcome {
    Pass(String),
    Skip(String),
}

type Check = Result<Outcome, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Check)> = vec![
        (1, "flat search matches brute-force cosine oracle", retrieval_oracle),
        (2, "metric fixtures and randomized metric oracles", metric_fixtures),
        (3, "extraction parser conformance and fuzzing", parser_conformance),
        (4, "graph invariants on a 500-session corpus", graph_invariants),
        (5, "value ranking semantics and expansion invariants", ranking_semantics),
        (6, "maintenance on planted contradictions and duplicates", maintenance_behavior),
        (7, "end-to-end synthetic benchmark", synthetic_benchmark),
        (8, "cache and prejudge cost accounting", cost_accounting),
        (9, "live run against an OpenAI-compatible backend", live_mode),
    ];
    let mut failures = 0;
    for (n, name, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(Outcome::Pass(detail)) => println!("criterion {n}: PASS  {name} — {detail} [{ms} ms]"),
            Ok(Outcome::Skip(why)) => println!("criterion {n}: SKIP  {name} — {why}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n}: FAIL  {name} — {why} [{ms} ms]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

const VOCAB: &[&str] = &[
    "apple", "river", "train", "violin", "garden", "lisbon", "berlin", "coffee", "marathon", "puppy", "novel", "bakery",
    "guitar", "mountain", "winter", "summer", "doctor", "museum", "recipe", "camera", "bicycle", "ocean", "forest",
    "candle", "school", "office", "market", "ticket", "letter", "pillow", "planet", "yellow", "orange", "silver",
    "castle", "bridge", "island", "window", "pencil", "rocket",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

fn raw_cosine(e: &HashEmbedder, a: &str, b: &str) -> f64 {
    let (x, y) = (e.raw_vector(a), e.raw_vector(b));
    let d: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let n = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
    d / (n(&x) * n(&y))
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let embedder = HashEmbedder::new(DIM);
    let started = Instant::now();
    let (mut comparisons, mut tied_prefixes) = (0usize, 0usize);
    for index_no in 0..50 {
        let n_keys = rng.random_range(1..=1000);
        let mut index = FlatIndex::new(KeyStrategy::SeparateSfk, EmbedderSpec::hash_mock(DIM));
        for _ in 0..n_keys {
            // Short texts over a small vocabulary: many exact duplicates, so
            // the tie rules are exercised.
            let text = random_text(&mut rng, 3);
            let sid = format!("s{}", rng.random_range(0..20));
            index.add_fact(&embedder, &text, &sid).map_err(|e| e.to_string())?;
        }
        for _ in 0..20 {
            let qtext = random_text(&mut rng, 4);
            let q = embedder.embed_one(&qtext);
            let mut oracle: Vec<(f64, u64, String, String)> = index
                .keys()
                .iter()
                .filter(|k| !k.internal && !k.unit.embedding.is_degenerate())
                .map(|k| {
                    let s = dot(q.values(), k.unit.embedding.values());
                    (s, k.unit.created_at, k.unit.key_id.clone(), k.unit.text.clone())
                })
                .collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (s, _, _, text) in oracle.iter().take(3) {
                let independent = raw_cosine(&embedder, &qtext, text);
                ensure((s - independent).abs() < 1e-6, || {
                    format!("stored cosine {s} vs raw-count cosine {independent}")
                })?;
            }
            for k in [1usize, 5, 10, 50] {
                let got = index.search(&q, k).map_err(|e| e.to_string())?;
                let want: Vec<(String, f64)> = oracle.iter().take(k).map(|o| (o.2.clone(), o.0)).collect();
                ensure(got == want, || format!("index {index_no} k={k}: {got:?} != {want:?}"))?;
                if want.windows(2).any(|w| w[0].1 == w[1].1) {
                    tied_prefixes += 1;
                }
                comparisons += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(Outcome::Pass(format!(
        "{comparisons} top-k lists identical to oracle, {tied_prefixes} with score ties, {secs:.1}s"
    )))
}

// ---------------------------------------------------------------- 2

fn set(items: &[&str]) -> HashSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn list(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn metric_fixtures() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let fixtures: [(f64, f64); 4] = [
        (recall_at_k(&list(&["a", "x", "y", "z", "w"]), &set(&["a", "b"]), 5).unwrap(), 0.5),
        (ndcg_at_k(&list(&["s1", "s2"]), &set(&["s1"]), 2).unwrap(), 1.0),
        (ndcg_at_k(&list(&["s2", "s1"]), &set(&["s1"]), 2).unwrap(), 1.0 / 3f64.log2()),
        (
            ndcg_at_k(&list(&["s1", "s3", "s2"]), &set(&["s1", "s2"]), 3).unwrap(),
            (1.0 + 0.5) / (1.0 + 1.0 / 3f64.log2()),
        ),
    ];
    for (i, (got, want)) in fixtures.iter().enumerate() {
        ensure(close(*got, *want), || format!("fixture {i}: {got} != {want}"))?;
    }
    ensure(close(fixtures[2].1, 0.6309), || "0.6309".into()).or_else(|_| {
        ensure((fixtures[2].1 - 0.6309).abs() < 1e-4, || "0.6309 fixture drifted".into())
    })?;
    ensure((fixtures[3].1 - 0.9197).abs() < 1e-4, || "0.9197 fixture drifted".into())?;
    ensure(recall_at_k(&list(&["a"]), &set(&["a"]), 5).unwrap() == 1.0, || "gt {a} recall".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool: Vec<String> = (0..30).map(|i| format!("s{i}")).collect();
    for case in 0..200 {
        let mut ids = pool.clone();
        ids.shuffle(&mut rng);
        let retrieved: Vec<String> = ids[..rng.random_range(0..=20)].to_vec();
        let gt_len = rng.random_range(1..=8);
        let gt: BTreeSet<String> = pool.choose_multiple(&mut rng, gt_len).cloned().collect();
        let k = rng.random_range(1..=25);
        let top: BTreeSet<String> = retrieved.iter().take(k).cloned().collect();
        let recall_oracle = top.intersection(&gt).count() as f64 / gt.len() as f64;
        let mut dcg = 0.0;
        for (i, id) in retrieved.iter().take(k).enumerate() {
            if gt.contains(id) {
                dcg += 1.0 / ((i + 2) as f64).log2();
            }
        }
        let idcg: f64 = (1..=gt.len().min(k)).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
        let gt_hash: HashSet<String> = gt.iter().cloned().collect();
        let r = recall_at_k(&retrieved, &gt_hash, k).unwrap();
        let n = ndcg_at_k(&retrieved, &gt_hash, k).unwrap();
        ensure(close(r, recall_oracle), || format!("case {case}: recall {r} != {recall_oracle}"))?;
        ensure(close(n, dcg / idcg), || format!("case {case}: ndcg {n} != {}", dcg / idcg))?;
    }
    Ok(Outcome::Pass("4 hand-computed fixtures, 200 randomized cases".into()))
}

// ---------------------------------------------------------------- 3

#[derive(Deserialize)]
struct ExpectedReport {
    entities: Vec<RawEntity>,
    relations: Vec<RawRelation>,
    warning_count: usize,
    complete_marker_seen: bool,
    #[serde(default)]
    warning_contains: Option<String>,
}

fn parser_conformance() -> Check {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/parser");
    let mut names: Vec<_> = fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    names.sort();
    ensure(names.len() >= 10, || format!("only {} fixtures", names.len()))?;
    for path in &names {
        let raw = fs::read_to_string(path).map_err(|e| e.to_string())?;
        let expected: ExpectedReport =
            serde_json::from_str(&fs::read_to_string(path.with_extension("json")).map_err(|e| e.to_string())?)
                .map_err(|e| format!("{}: {e}", path.display()))?;
        let got = parse_extraction(&raw);
        let name = path.file_name().unwrap().to_string_lossy();
        ensure(got.entities == expected.entities, || format!("{name}: entities {:?}", got.entities))?;
        ensure(got.relations == expected.relations, || format!("{name}: relations {:?}", got.relations))?;
        ensure(got.complete_marker_seen == expected.complete_marker_seen, || format!("{name}: marker"))?;
        ensure(got.warnings.len() == expected.warning_count, || {
            format!("{name}: warnings {:?}", got.warnings)
        })?;
        if let Some(needle) = &expected.warning_contains {
            ensure(got.warnings.iter().any(|w| w.contains(needle.as_str())), || {
                format!("{name}: no warning containing {needle:?}")
            })?;
        }
        let again = parse_extraction(&serialize_report(&got));
        ensure(again.same_content(&got), || format!("{name}: round trip changed the report"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pieces = ["(", ")", "<|>", "##", "\"", "entity", "relationship", "<|COMPLETE|>", "7", "Time", " ", "\n"];
    // Even cases: 10k random byte strings. Odd cases: 10k strings assembled
    // from grammar fragments, which reach deeper into the record parser.
    for case in 0..20_000 {
        let input = if case % 2 == 0 {
            let bytes: Vec<u8> = (0..rng.random_range(0..200)).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            (0..rng.random_range(0..40))
                .map(|_| {
                    if rng.random_bool(0.7) {
                        pieces.choose(&mut rng).unwrap().to_string()
                    } else {
                        random_text(&mut rng, 2)
                    }
                })
                .collect()
        };
        let report: ParseReport = catch_unwind(|| parse_extraction(&input))
            .map_err(|_| format!("fuzz case {case} panicked on {input:?}"))?;
        if case % 2 == 0 && !input.contains('(') {
            ensure(report.entities.is_empty() && report.relations.is_empty(), || {
                format!("fuzz case {case}: records from noise")
            })?;
        }
    }
    Ok(Outcome::Pass(format!(
        "{} fixtures exact, 10000 random-byte and 10000 grammar-fragment fuzz cases without abort",
        names.len()
    )))
}

// ---------------------------------------------------------------- 4

fn graph_reports(corpus: &Corpus, gateway: &Gateway) -> Vec<(String, ParseReport)> {
    corpus
        .sessions
        .iter()
        .filter(|s| mock::prejudge(&s.user_text()))
        .map(|s| {
            let raw = gateway.extract_graph(s, s.date).expect("mock extraction");
            (s.session_id.clone(), parse_extraction(&raw))
        })
        .collect()
}

fn ingest_all(reports: &[(String, ParseReport)], embedder: &HashEmbedder) -> Result<Graph, String> {
    let mut g = Graph::new(GraphSchema::Desc, embedder.spec().clone());
    for (sid, report) in reports {
        g.ingest_extraction(embedder, report, sid, DescriptionPolicy::default())
            .map_err(|e| e.to_string())?;
    }
    Ok(g)
}

fn graph_invariants() -> Check {
    let corpus = synthetic::random_dialogues(4, 500);
    let embedder = HashEmbedder::new(DIM);
    let gateway = Gateway::mock(DIM);
    let mut reports = graph_reports(&corpus, &gateway);
    // Mock relations all carry the same strength; randomise them so the
    // max-merge rule is actually exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, r) in &mut reports {
        for rel in &mut r.relations {
            rel.strength = rng.random_range(1..=10);
        }
    }
    let graph = ingest_all(&reports, &embedder)?;

    // Name uniqueness: one node per canonical name.
    let names: HashSet<&str> = graph.nodes().iter().map(|n| n.canonical_name.as_str()).collect();
    ensure(names.len() == graph.nodes().len(), || "duplicate node names".into())?;
    ensure(graph.nodes().iter().all(|n| canonical_name(&n.canonical_name) == n.canonical_name), || {
        "non-canonical node name".into()
    })?;

    // Strength max-merge against an oracle over the raw reports.
    let mut oracle: HashMap<(String, String), u8> = HashMap::new();
    for (_, r) in &reports {
        for rel in &r.relations {
            if rel.source == rel.target {
                continue;
            }
            let key = if rel.source < rel.target {
                (rel.source.clone(), rel.target.clone())
            } else {
                (rel.target.clone(), rel.source.clone())
            };
            let slot = oracle.entry(key).or_insert(0);
            *slot = (*slot).max(rel.strength);
        }
    }
    let id_to_name: HashMap<&str, &str> =
        graph.nodes().iter().map(|n| (n.node_id.as_str(), n.canonical_name.as_str())).collect();
    ensure(graph.edges().len() == oracle.len(), || {
        format!("{} edges, oracle has {} pairs", graph.edges().len(), oracle.len())
    })?;
    for e in graph.edges() {
        let (a, b) = (id_to_name[e.src.as_str()], id_to_name[e.dst.as_str()]);
        let key = if a < b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        ensure(oracle.get(&key) == Some(&e.strength), || {
            format!("edge {a}-{b}: strength {} vs oracle {:?}", e.strength, oracle.get(&key))
        })?;
    }

    // Embedding freshness: stored vectors equal a fresh embedding of the
    // node's current description text.
    for n in graph.nodes() {
        let fresh = embedder.embed_one(&n.description_text());
        ensure(&fresh == n.embedding(), || format!("stale embedding on {}", n.canonical_name))?;
    }
    graph.check_invariants(Some(&embedder)).map_err(|e| e.to_string())?;

    // Alignment idempotence: re-ingesting every report changes no node or edge.
    let mut again = graph.clone();
    for (sid, report) in &reports {
        again
            .ingest_extraction(&embedder, report, sid, DescriptionPolicy::default())
            .map_err(|e| e.to_string())?;
    }
    ensure(again.nodes() == graph.nodes() && again.edges() == graph.edges(), || {
        "re-ingesting changed the graph".into()
    })?;

    // Re-ingest from scratch: byte-identical persisted graph.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    graph.save(&tmp.path().join("a")).map_err(|e| e.to_string())?;
    ingest_all(&reports, &embedder)?
        .save(&tmp.path().join("b"))
        .map_err(|e| e.to_string())?;
    let (a, b) = (dir_contents(&tmp.path().join("a")), dir_contents(&tmp.path().join("b")));
    ensure(!a.is_empty() && a == b, || "persisted graphs differ".into())?;

    // The same through the full pipeline.
    let (m1, _) = mock_build(&corpus, &PipelineConfig::desc_graph());
    let (m2, _) = mock_build(&corpus, &PipelineConfig::desc_graph());
    m1.save(&tmp.path().join("m1")).map_err(|e| e.to_string())?;
    m2.save(&tmp.path().join("m2")).map_err(|e| e.to_string())?;
    ensure(dir_contents(&tmp.path().join("m1")) == dir_contents(&tmp.path().join("m2")), || {
        "pipeline builds differ".into()
    })?;

    Ok(Outcome::Pass(format!(
        "{} sessions, {} nodes, {} edges; all invariants hold",
        corpus.sessions.len(),
        graph.nodes().len(),
        graph.edges().len()
    )))
}

// ---------------------------------------------------------------- 5

fn entity(name: &str, description: &str) -> RawEntity {
    RawEntity {
        name: name.into(),
        etype: dialmem_core::extraction::EntityType::Other,
        description: description.into(),
        time_unresolved: false,
    }
}

fn relation(a: &str, b: &str, strength: u8) -> RawRelation {
    RawRelation {
        source: a.into(),
        target: b.into(),
        description: format!("{a} and {b}"),
        strength,
    }
}

/// Three sessions share the best-matching node, so they tie on score_e;
/// they differ in how many other activated nodes they touch.
fn tie_fixture(embedder: &HashEmbedder) -> Result<Graph, String> {
    let sessions: [(&str, Vec<RawEntity>, Vec<RawRelation>); 3] = [
        (
            "s1",
            vec![entity("LISBON", "lisbon tram ride"), entity("ALPHA", "alpha tram")],
            vec![relation("LISBON", "ALPHA", 3)],
        ),
        (
            "s2",
            vec![
                entity("LISBON", "lisbon tram ride"),
                entity("BRAVO", "bravo lisbon"),
                entity("CHARLIE", "charlie ride"),
            ],
            vec![relation("LISBON", "BRAVO", 8), relation("LISBON", "CHARLIE", 2)],
        ),
        (
            "s3",
            vec![entity("LISBON", "lisbon tram ride"), entity("DELTA", "delta tram")],
            vec![relation("LISBON", "DELTA", 9)],
        ),
    ];
    let mut g = Graph::new(GraphSchema::Desc, embedder.spec().clone());
    for (sid, entities, relations) in sessions {
        let report = ParseReport {
            entities,
            relations,
            warnings: vec![],
            complete_marker_seen: true,
        };
        g.ingest_extraction(embedder, &report, sid, DescriptionPolicy::default())
            .map_err(|e| e.to_string())?;
    }
    Ok(g)
}

fn order(values: &[dialmem_core::graph::retrieval::RankedValue]) -> Vec<String> {
    values.iter().map(|v| v.value.payload.clone()).collect()
}

fn ranking_semantics() -> Check {
    let embedder = HashEmbedder::new(DIM);
    let g = tie_fixture(&embedder)?;
    let q = embedder.embed_one("lisbon tram ride");
    let act = activate(&g, &q, 10, Activation::Entity).map_err(|e| e.to_string())?;
    // Hand enumeration: every session contains LISBON (cosine 1), so
    // score_e ties at 1.0 for all three. Activated nodes per session:
    // s1 {LISBON, ALPHA} = 2, s2 {LISBON, BRAVO, CHARLIE} = 3,
    // s3 {LISBON, DELTA} = 2. (score_e, score_g) ranks s2 first; s1 and s3
    // stay in first-seen order (LISBON's session order).
    let eg = rank_values(&g, &act, &q, 10, Rerank::ScoreEG, ValueKind::Session);
    ensure(order(&eg) == ["s2", "s1", "s3"], || format!("score_e_g order {:?}", order(&eg)))?;
    let e_only = rank_values(&g, &act, &q, 10, Rerank::ScoreE, ValueKind::Session);
    ensure(order(&e_only) == ["s1", "s2", "s3"], || format!("score_e order {:?}", order(&e_only)))?;
    ensure(eg.iter().all(|v| v.score.score_e == 1.0 || (v.score.score_e - 1.0).abs() < 1e-6), || {
        "fixture lost its score_e tie".into()
    })?;

    // Refinement and expansion invariants on a larger random graph.
    let corpus = synthetic::random_dialogues(5, 200);
    let (memory, _) = mock_build(&corpus, &PipelineConfig::desc_graph());
    let graph = memory.index.as_graph().ok_or("not a graph")?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut refined_pairs = 0usize;
    for _ in 0..30 {
        let qtext = corpus.sessions.choose(&mut rng).unwrap().user_text();
        let q = embedder.embed_one(&qtext);
        let k = rng.random_range(1..=20);
        let act = activate(graph, &q, k, Activation::Entity).map_err(|e| e.to_string())?;
        let ranked = rank_values(graph, &act, &q, usize::MAX, Rerank::ScoreEG, ValueKind::Session);
        for (i, a) in ranked.iter().enumerate() {
            for b in &ranked[i + 1..] {
                ensure(a.score.score_e >= b.score.score_e, || "score_e_g contradicts score_e".into())?;
                if a.score.score_e == b.score.score_e {
                    ensure(a.score.score_g >= b.score.score_g, || "score_g not descending within a tie".into())?;
                } else {
                    refined_pairs += 1;
                }
            }
        }
        check_expansion(graph, &act, &q)?;
    }
    Ok(Outcome::Pass(format!(
        "tie fixture matches hand order; {refined_pairs} distinct-score pairs preserved; budgets 0/1/3/50 ok"
    )))
}

fn check_expansion(graph: &Graph, act: &ActivationSet, q: &dialmem_core::model::Embedding) -> Result<(), String> {
    let seeds: HashSet<usize> = act.seeds.iter().filter_map(|(id, _)| graph.node_index(id)).collect();
    let mut neighbours: HashSet<usize> = HashSet::new();
    for &s in &seeds {
        for &e in graph.incident(s) {
            let o = graph.other_end(e, s);
            if !seeds.contains(&o) {
                neighbours.insert(o);
            }
        }
    }
    let mut previous: Vec<String> = Vec::new();
    for budget in [0usize, 1, 3, 50] {
        let x = expand_one_hop(graph, act, q, budget);
        ensure(x.seeds == act.seeds, || "expansion changed the seeds".into())?;
        ensure(x.expanded.len() == budget.min(neighbours.len()), || {
            format!("budget {budget}: {} expanded of {} neighbours", x.expanded.len(), neighbours.len())
        })?;
        let ids: Vec<String> = x.expanded_ids().iter().map(|s| s.to_string()).collect();
        for id in &ids {
            let i = graph.node_index(id).ok_or("unknown expanded node")?;
            ensure(neighbours.contains(&i), || format!("{id} is not a neighbour of a seed"))?;
        }
        ensure(ids.len() == ids.iter().collect::<HashSet<_>>().len(), || "duplicate expansions".into())?;
        ensure(ids.starts_with(&previous), || "larger budget reordered expansions".into())?;
        let candidates: HashSet<&str> = x.candidates().map(|(id, _)| id.as_str()).collect();
        ensure(act.seed_ids().iter().all(|s| candidates.contains(s)), || "candidates lost a seed".into())?;
        previous = ids;
    }
    Ok(())
}

// ---------------------------------------------------------------- 6

fn maintenance_config(ops: &[MemOp]) -> PipelineConfig {
    PipelineConfig {
        key_strategy: KeyStrategy::SeparateSfk,
        value_kind: ValueKind::Key,
        op_set: ops.iter().copied().collect(),
        ..PipelineConfig::default()
    }
}

fn maintenance_behavior() -> Check {
    let fixture = synthetic::maintenance(6);
    let (full, _) = mock_build(&fixture.corpus, &maintenance_config(&[MemOp::Add, MemOp::Update, MemOp::Noop]));
    let (add_only, _) = mock_build(&fixture.corpus, &maintenance_config(&[MemOp::Add]));

    let totals = |logs: &[ReconcileLog]| {
        logs.iter().fold((0, 0, 0, 0), |t, l| (t.0 + l.adds, t.1 + l.updates, t.2 + l.noops, t.3 + l.deletes))
    };
    let (adds, updates, noops, deletes) = totals(&full.reconcile_logs);
    ensure(updates == 20 && noops == 30 && deletes == 0, || {
        format!("updates {updates}, noops {noops}, deletes {deletes}")
    })?;
    ensure(adds == 50, || format!("adds {adds}"))?;
    ensure(full.reconcile_logs.iter().all(|l| l.is_consistent()), || "log counters disagree".into())?;

    // Rule oracle: each revision updates the key holding its original, and
    // each restatement is a noop.
    let flat = full.index.as_flat().ok_or("not flat")?;
    let revised: HashMap<&str, &str> = fixture.contradictions.iter().map(|(o, n)| (n.as_str(), o.as_str())).collect();
    let dups: HashSet<&str> = fixture.duplicates.iter().map(String::as_str).collect();
    let mut agree = 0;
    let mut decisions = 0;
    for log in &full.reconcile_logs[10..] {
        for d in &log.decisions {
            decisions += 1;
            let ok = if revised.contains_key(d.fact_text.as_str()) {
                d.applied == MemOp::Update && d.key_id.as_deref().and_then(|k| flat.get(k)).is_some_and(|k| k.unit.text == d.fact_text)
            } else if dups.contains(d.fact_text.as_str()) {
                d.applied == MemOp::Noop
            } else {
                false
            };
            agree += ok as usize;
        }
    }
    ensure(decisions == 50 && agree == decisions, || format!("rule agreement {agree}/{decisions}"))?;

    let has_text = |m: &dialmem_core::engine::Memory, text: &str| {
        m.index.as_flat().unwrap().keys().iter().any(|k| k.unit.kind == KeyKind::Fact && k.unit.text == text)
    };
    let embedder = HashEmbedder::new(DIM);
    let mut stale_retrieved_add_only = 0;
    for (old, new) in &fixture.contradictions {
        ensure(!has_text(&full, old), || format!("stale fact kept: {old}"))?;
        ensure(has_text(&add_only, old) && has_text(&add_only, new), || format!("add-only lost {old}"))?;
        let q = embedder.embed_one(old);
        let hits = flat.search_where(&q, 5, |k| k.unit.kind == KeyKind::Fact).map_err(|e| e.to_string())?;
        let texts: Vec<&str> = hits.iter().map(|(id, _)| flat.get(id).unwrap().unit.text.as_str()).collect();
        ensure(texts.contains(&new.as_str()) && !texts.contains(&old.as_str()), || {
            format!("query {old:?} retrieved {texts:?}")
        })?;
        let ao = add_only.index.as_flat().unwrap();
        let hits = ao.search_where(&q, 5, |k| k.unit.kind == KeyKind::Fact).map_err(|e| e.to_string())?;
        if hits.iter().any(|(id, _)| ao.get(id).unwrap().unit.text == *old) {
            stale_retrieved_add_only += 1;
        }
    }
    ensure(stale_retrieved_add_only == 20, || format!("add-only retrieved {stale_retrieved_add_only}/20 stale"))?;
    Ok(Outcome::Pass(
        "20 updates, 30 noops, rule agreement 50/50; only revised facts retrieved; add-only keeps 20 stale facts"
            .into(),
    ))
}

// ---------------------------------------------------------------- 7

fn r5(memory: &dialmem_core::engine::Memory, corpus: &Corpus) -> Result<f64, String> {
    let report: EvalReport =
        run_retrieval_eval(memory, &corpus.questions, &corpus.name, EvalOptions::default()).map_err(|e| e.to_string())?;
    Ok(report.aggregates.recall_at_5)
}

/// Exact-cosine oracle over merged [S,F,K] texts built from the mock
/// extraction rules, independent of the index code.
fn oracle_r5(corpus: &Corpus) -> f64 {
    let e = HashEmbedder::new(DIM);
    let keys: Vec<(String, Vec<f32>)> = corpus
        .sessions
        .iter()
        .map(|s| {
            let fx: FlatExtraction = mock::extract_flat(&s.user_text());
            (s.session_id.clone(), e.embed_one(&merged_all_text(&fx)).values().to_vec())
        })
        .collect();
    let mut hits = 0.0;
    for q in &corpus.questions {
        let qv = e.embed_one(&q.question_text);
        let mut scored: Vec<(f64, &str)> = keys.iter().map(|(id, v)| (dot(qv.values(), v), id.as_str())).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top: HashSet<&str> = scored.iter().take(5).map(|s| s.1).collect();
        let gt = &q.evidence_session_ids;
        hits += gt.iter().filter(|g| top.contains(g.as_str())).count() as f64 / gt.len() as f64;
    }
    hits / corpus.questions.len() as f64
}

fn vocabulary(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// For each question, the best vocabulary overlap between its planted
/// evidence sentence and any distractor session; returns the minimum.
fn min_distractor_overlap(corpus: &Corpus) -> f64 {
    let evidence: HashSet<&str> = corpus
        .questions
        .iter()
        .flat_map(|q| q.evidence_session_ids.iter().map(String::as_str))
        .collect();
    let distractors: Vec<HashSet<String>> = corpus
        .sessions
        .iter()
        .filter(|s| !evidence.contains(s.session_id.as_str()))
        .map(|s| vocabulary(&s.user_text()))
        .collect();
    corpus
        .questions
        .iter()
        .map(|q| {
            let session = corpus.session(&q.evidence_session_ids[0]).expect("evidence session exists");
            let first_turn = session.user_turns().next().expect("user turn").text.clone();
            let planted = vocabulary(first_turn.split('.').next().unwrap_or_default());
            distractors
                .iter()
                .map(|d| planted.intersection(d).count() as f64 / planted.len() as f64)
                .fold(0.0, f64::max)
        })
        .fold(1.0, f64::min)
}

fn synthetic_benchmark() -> Check {
    let mut lines = Vec::new();
    for seed in [11u64, 12, 13] {
        let corpus = synthetic::benchmark(seed);
        ensure(corpus.sessions.len() == 100 && corpus.questions.len() == 20, || "bad corpus shape".into())?;
        let overlap = min_distractor_overlap(&corpus);
        ensure(overlap >= 0.5, || format!("seed {seed}: distractor vocabulary overlap {overlap:.2}"))?;
        let oracle = oracle_r5(&corpus);
        let flat = r5(&mock_build(&corpus, &PipelineConfig::default()).0, &corpus)?;
        let desc = r5(&mock_build(&corpus, &PipelineConfig::desc_graph()).0, &corpus)?;
        let sim_cfg = PipelineConfig {
            key_strategy: KeyStrategy::MergeAll,
            graph_schema: GraphSchema::Sim,
            expansion: Expansion::OneHop,
            rerank: Rerank::ScoreS,
            ..PipelineConfig::desc_graph()
        };
        let sim = r5(&mock_build(&corpus, &sim_cfg).0, &corpus)?;
        ensure(oracle == 1.0, || format!("seed {seed}: oracle R@5 {oracle}"))?;
        ensure(flat >= 0.9, || format!("seed {seed}: merge_all R@5 {flat}"))?;
        ensure(desc >= 0.9, || format!("seed {seed}: DescGraph R@5 {desc}"))?;
        ensure(sim < flat && sim < desc, || format!("seed {seed}: SimGraph score_s R@5 {sim} not lower"))?;
        lines.push(format!("seed {seed}: overlap {overlap:.2} oracle {oracle:.2} merge_all {flat:.2} desc {desc:.2} sim/score_s {sim:.2}"));
    }
    Ok(Outcome::Pass(lines.join("; ")))
}

// ---------------------------------------------------------------- 8

fn extraction_calls(gateway: &Gateway) -> u64 {
    let s = gateway.stats();
    s.calls(RequestKind::ExtractFlat) + s.calls(RequestKind::ExtractGraph)
}

fn cost_accounting() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let corpus_path = root.join("bench.json");
    let config_path = root.join("flat.toml");
    let cache = root.join("cache");
    let p = |x: &Path| x.to_string_lossy().into_owned();
    ensure(cli(&["synth", "--kind", "benchmark", "--seed", "8", "--out", &p(&corpus_path)]) == 0, || "synth".into())?;
    write_config(&config_path, &PipelineConfig::default(), Some("provider = \"mock\"\ndimension = 256"));
    let mut manifests = Vec::new();
    for out in ["first", "second"] {
        let code = cli(&[
            "build", "--corpus", &p(&corpus_path), "--config", &p(&config_path), "--out", &p(&root.join(out)),
            "--cache-dir", &p(&cache),
        ]);
        ensure(code == 0, || format!("build {out} exited {code}"))?;
        manifests.push(RunManifest::read(&root.join(out)).map_err(|e| e.to_string())?);
    }
    let (a, b) = (&manifests[0], &manifests[1]);
    ensure(a.counters.extraction_calls > 0, || "first build made no extraction calls".into())?;
    ensure(b.counters.extraction_calls == 0, || format!("rebuild made {} extraction calls", b.counters.extraction_calls))?;
    ensure(b.counters.calls.total_calls() == 0 && b.counters.cache_hits > 0, || "rebuild missed the cache".into())?;
    ensure(a.fingerprint == b.fingerprint, || "fingerprints differ".into())?;
    ensure(a.counters.cache_misses == a.counters.calls.total_calls(), || "misses != provider calls".into())?;
    let strip = |mut m: BTreeMap<String, Vec<u8>>| {
        m.remove("manifest.json");
        m
    };
    ensure(
        strip(dir_contents(&root.join("first"))) == strip(dir_contents(&root.join("second"))),
        || "rebuilt index differs".into(),
    )?;

    let corpora = [
        synthetic::benchmark(8),
        synthetic::maintenance(8).corpus,
        synthetic::random_dialogues(8, 500),
        load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpora/smalltalk.json"), None)
            .map_err(|e| e.to_string())?,
    ];
    let mut pairs = Vec::new();
    for corpus in &corpora {
        for base in [PipelineConfig::default(), PipelineConfig::desc_graph()] {
            let mut counts = [0u64; 2];
            for (i, prejudge) in [true, false].into_iter().enumerate() {
                let config = PipelineConfig {
                    prejudge_enabled: prejudge,
                    ..base.clone()
                };
                let gateway = Gateway::mock(DIM);
                let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(DIM));
                build(corpus, &config, &gateway, embedder, BuildOptions::default()).map_err(|e| e.to_string())?;
                counts[i] = extraction_calls(&gateway);
            }
            ensure(counts[0] <= counts[1], || format!("{}: prejudge {} > {}", corpus.name, counts[0], counts[1]))?;
            pairs.push(format!("{} {}/{}", corpus.name, counts[0], counts[1]));
        }
    }
    Ok(Outcome::Pass(format!(
        "rebuild: 0 extraction calls, {} cache hits; prejudge on/off extraction calls: {}",
        b.counters.cache_hits,
        pairs.join(", ")
    )))
}

// ---------------------------------------------------------------- 9

fn live_mode() -> Check {
    let has_key = ["DIALMEM_API_KEY", "OPENAI_API_KEY"]
        .iter()
        .any(|k| std::env::var(k).is_ok_and(|v| !v.is_empty()));
    if !has_key {
        return Ok(Outcome::Skip("no credentials (set DIALMEM_API_KEY or OPENAI_API_KEY)".into()));
    }
    let Some(data) = std::env::var_os("DIALMEM_LME_PATH") else {
        return Ok(Outcome::Skip("credentials found but DIALMEM_LME_PATH (LongMemEval-S file) is unset".into()));
    };
    let full = load_corpus(Path::new(&data), Some("lme_s")).map_err(|e| e.to_string())?;
    let mut sample = full.clone();
    sample.questions.truncate(50);
    let needed: HashSet<&String> = sample
        .questions
        .iter()
        .flat_map(|q| q.haystack_session_ids.iter().flatten().chain(&q.evidence_session_ids))
        .collect();
    sample.sessions.retain(|s| needed.contains(&s.session_id));

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let p = |x: &Path| x.to_string_lossy().into_owned();
    let sample_path = root.join("lme_s.json");
    dialmem_core::eval::loader::write_native(&sample_path, &sample).map_err(|e| e.to_string())?;
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets/baseline_graph.toml");
    let config_path = root.join("live.toml");
    let (config, _) = dialmem_core::cli::read_config(&preset).map_err(|e| e.to_string())?;
    write_config(&config_path, &config, Some("provider = \"remote\""));
    let index = root.join("index");
    let code = cli(&["build", "--corpus", &p(&sample_path), "--config", &p(&config_path), "--out", &p(&index)]);
    ensure(code == 0, || format!("live build exited {code}"))?;
    let code = cli(&["eval", &p(&index), &p(&sample_path), "--judge", "remote", "--limit", "50"]);
    ensure(code == 0, || format!("live eval exited {code}"))?;
    let report = EvalReport::read(&index.join("eval/report.json")).map_err(|e| e.to_string())?;
    report.validate().map_err(|e| e.to_string())?;
    let table = fs::read_to_string(index.join("eval/table.tsv")).map_err(|e| e.to_string())?;
    ensure(table.starts_with(dialmem_core::eval::TABLE_HEADER), || "table header".into())?;
    Ok(Outcome::Pass(format!(
        "{} questions: R@5 {:.4}, accuracy {:?}",
        report.aggregates.questions, report.aggregates.recall_at_5, report.aggregates.accuracy
    )))
}

#[allow(dead_code)]
fn _date() -> CalendarDate {
    CalendarDate::from_ymd(2023, 1, 1).unwrap()
}

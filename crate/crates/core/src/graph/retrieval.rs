//! Activation, one-hop expansion and value ranking over a frozen graph.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::model::{Activation, Embedding, Expansion, PipelineConfig, Rerank, ValueKind, ValueRef};

/// Seeds chosen by query similarity, plus neighbours added by expansion.
/// Scores are query cosines of the node embeddings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationSet {
    pub seeds: Vec<(String, f64)>,
    pub expanded: Vec<(String, f64)>,
}

impl ActivationSet {
    pub fn seed_ids(&self) -> Vec<&str> {
        self.seeds.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn expanded_ids(&self) -> Vec<&str> {
        self.expanded.iter().map(|(id, _)| id.as_str()).collect()
    }

    /// Seeds followed by expanded nodes.
    pub fn candidates(&self) -> impl Iterator<Item = &(String, f64)> {
        self.seeds.iter().chain(self.expanded.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub score_e: f64,
    pub score_g: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedValue {
    pub value: ValueRef,
    pub score: RankScore,
}

/// Query-cosine top-k over nodes (entity mode) or edges (triple mode). In
/// triple mode the seeds are the endpoints of the selected edges in edge
/// score order, each scored by its own node cosine.
pub fn activate(graph: &Graph, query: &Embedding, k: usize, mode: Activation) -> Result<ActivationSet> {
    if k == 0 {
        return Err(Error::Input("k must be positive".into()));
    }
    query.check_dimension(graph.spec().dimension)?;
    let node_score = |i: usize| query.cosine(graph.nodes()[i].embedding());
    match mode {
        Activation::Entity => {
            let mut scored: Vec<(f64, usize)> = graph
                .nodes()
                .iter()
                .enumerate()
                .filter(|(_, n)| !n.embedding().is_degenerate())
                .map(|(i, _)| (node_score(i), i))
                .collect();
            top_k(&mut scored, k);
            Ok(ActivationSet {
                seeds: scored
                    .into_iter()
                    .map(|(s, i)| (graph.nodes()[i].node_id.clone(), s))
                    .collect(),
                expanded: Vec::new(),
            })
        }
        Activation::Triple => {
            let mut scored: Vec<(f64, usize)> = graph
                .edges()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.embedding.as_ref().is_some_and(|v| !v.is_degenerate()))
                .map(|(i, e)| (query.cosine(e.embedding()), i))
                .collect();
            top_k(&mut scored, k);
            let mut seen = HashSet::new();
            let mut seeds = Vec::new();
            for (_, e) in scored {
                let edge = &graph.edges()[e];
                for id in [&edge.src, &edge.dst] {
                    if seen.insert(id.clone()) {
                        let i = graph.node_index(id).expect("edge endpoints exist");
                        seeds.push((id.clone(), node_score(i)));
                    }
                }
            }
            Ok(ActivationSet {
                seeds,
                expanded: Vec::new(),
            })
        }
    }
}

/// Sorts by score desc then index asc and keeps the first `k`.
fn top_k(scored: &mut Vec<(f64, usize)>, k: usize) {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
}

/// Adds neighbours of the seeds that are not seeds themselves, ordered by
/// the strongest edge linking them to a seed, then query cosine, then node
/// order; at most `budget` are kept.
pub fn expand_one_hop(graph: &Graph, activation: &ActivationSet, query: &Embedding, budget: usize) -> ActivationSet {
    let mut out = ActivationSet {
        seeds: activation.seeds.clone(),
        expanded: Vec::new(),
    };
    if budget == 0 {
        return out;
    }
    let seeds: HashSet<usize> = activation
        .seeds
        .iter()
        .filter_map(|(id, _)| graph.node_index(id))
        .collect();
    let mut best: HashMap<usize, u8> = HashMap::new();
    for &s in &seeds {
        for &e in graph.incident(s) {
            let other = graph.other_end(e, s);
            if seeds.contains(&other) {
                continue;
            }
            let strength = graph.edges()[e].strength;
            let slot = best.entry(other).or_insert(strength);
            *slot = (*slot).max(strength);
        }
    }
    let mut neighbours: Vec<(u8, f64, usize)> = best
        .into_iter()
        .map(|(n, strength)| (strength, query.cosine(graph.nodes()[n].embedding()), n))
        .collect();
    neighbours.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });
    out.expanded = neighbours
        .into_iter()
        .take(budget)
        .map(|(_, score, n)| (graph.nodes()[n].node_id.clone(), score))
        .collect();
    out
}

fn compare(mode: Rerank, a: &RankScore, b: &RankScore) -> Ordering {
    match mode {
        Rerank::ScoreS => b
            .score_s
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.score_s.unwrap_or(f64::NEG_INFINITY)),
        Rerank::ScoreE => b.score_e.total_cmp(&a.score_e),
        Rerank::ScoreEG => b
            .score_e
            .total_cmp(&a.score_e)
            .then(b.score_g.cmp(&a.score_g)),
    }
}

/// Lifts candidate node scores to values and orders them under `mode`.
/// Ties keep first-seen order (seeds before expanded nodes).
pub fn rank_values(
    graph: &Graph,
    activation: &ActivationSet,
    query: &Embedding,
    n_values: usize,
    mode: Rerank,
    value_kind: ValueKind,
) -> Vec<RankedValue> {
    let mut order: Vec<ValueRef> = Vec::new();
    let mut scores: HashMap<ValueRef, RankScore> = HashMap::new();
    for (node_id, cosine) in activation.candidates() {
        let values: Vec<ValueRef> = match value_kind {
            ValueKind::Key => vec![ValueRef::key(node_id.clone())],
            ValueKind::Session => graph
                .node(node_id)
                .map(|n| n.sessions.iter().cloned().map(ValueRef::session).collect())
                .unwrap_or_default(),
        };
        for value in values {
            match scores.get_mut(&value) {
                Some(score) => {
                    score.score_e = score.score_e.max(*cosine);
                    score.score_g += 1;
                }
                None => {
                    order.push(value.clone());
                    scores.insert(
                        value,
                        RankScore {
                            score_e: *cosine,
                            score_g: 1,
                            score_s: None,
                        },
                    );
                }
            }
        }
    }
    let mut ranked: Vec<RankedValue> = order
        .into_iter()
        .map(|value| {
            let mut score = scores[&value];
            if mode == Rerank::ScoreS && value.kind == ValueKind::Session {
                score.score_s = graph.session_embedding(&value.payload).map(|s| query.cosine(s));
            }
            RankedValue { value, score }
        })
        .collect();
    // Stable sort: equal scores keep first-seen order.
    ranked.sort_by(|a, b| compare(mode, &a.score, &b.score));
    ranked.truncate(n_values);
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub activation: ActivationSet,
    pub values: Vec<RankedValue>,
}

/// Activation with `k_keys`, optional one-hop expansion, then ranking to
/// `n_values`. `keep` restricts activation to nodes it accepts.
pub fn retrieve_traced(
    graph: &Graph,
    query: &Embedding,
    config: &PipelineConfig,
    n_values: usize,
    keep: Option<&dyn Fn(&super::GraphNode) -> bool>,
) -> Result<RetrievalTrace> {
    if graph.is_empty() {
        return Ok(RetrievalTrace {
            activation: ActivationSet::default(),
            values: Vec::new(),
        });
    }
    let mut activation = match keep {
        None => activate(graph, query, config.k_keys, config.activation)?,
        Some(keep) => activate_filtered(graph, query, config.k_keys, config.activation, keep)?,
    };
    if config.expansion == Expansion::OneHop {
        activation = expand_one_hop(graph, &activation, query, config.expansion_budget);
        if let Some(keep) = keep {
            activation
                .expanded
                .retain(|(id, _)| graph.node(id).is_some_and(|n| keep(n)));
        }
    }
    let values = rank_values(graph, &activation, query, n_values, config.rerank, config.value_kind);
    Ok(RetrievalTrace { activation, values })
}

pub fn retrieve(graph: &Graph, query: &Embedding, config: &PipelineConfig) -> Result<Vec<ValueRef>> {
    Ok(retrieve_traced(graph, query, config, config.n_values, None)?
        .values
        .into_iter()
        .map(|v| v.value)
        .collect())
}

fn activate_filtered(
    graph: &Graph,
    query: &Embedding,
    k: usize,
    mode: Activation,
    keep: &dyn Fn(&super::GraphNode) -> bool,
) -> Result<ActivationSet> {
    // Activation over the subgraph of accepted nodes: rank everything, then
    // keep the first k accepted seeds.
    let all = activate(graph, query, graph.nodes().len().max(graph.edges().len()).max(1), mode)?;
    let mut seeds = Vec::new();
    match mode {
        Activation::Entity => {
            seeds.extend(
                all.seeds
                    .into_iter()
                    .filter(|(id, _)| graph.node(id).is_some_and(|n| keep(n)))
                    .take(k),
            );
        }
        Activation::Triple => {
            // Re-run edge selection restricted to edges with both ends kept.
            let mut scored: Vec<(f64, usize)> = graph
                .edges()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.embedding.as_ref().is_some_and(|v| !v.is_degenerate()))
                .filter(|(_, e)| {
                    [&e.src, &e.dst]
                        .iter()
                        .all(|id| graph.node(id).is_some_and(|n| keep(n)))
                })
                .map(|(i, e)| (query.cosine(e.embedding()), i))
                .collect();
            top_k(&mut scored, k);
            let mut seen = HashSet::new();
            for (_, e) in scored {
                let edge = &graph.edges()[e];
                for id in [&edge.src, &edge.dst] {
                    if seen.insert(id.clone()) {
                        let n = graph.node(id).expect("endpoint exists");
                        seeds.push((id.clone(), query.cosine(n.embedding())));
                    }
                }
            }
        }
    }
    Ok(ActivationSet {
        seeds,
        expanded: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::embed::{Embedder, HashEmbedder};
    use crate::extraction::{EntityType, ParseReport, RawEntity, RawRelation};
    use crate::graph::DescriptionPolicy;
    use crate::model::GraphSchema;

    fn star(e: &HashEmbedder) -> Graph {
        let mut g = Graph::new(GraphSchema::Desc, e.spec().clone());
        let mut entities = vec![RawEntity {
            name: "CENTER".into(),
            etype: EntityType::Other,
            description: "hub node".into(),
            time_unresolved: false,
        }];
        let mut relations = Vec::new();
        for (i, strength) in [3u8, 9, 1, 7, 5].iter().enumerate() {
            entities.push(RawEntity {
                name: format!("LEAF{i}"),
                etype: EntityType::Other,
                description: format!("leaf number {i}"),
                time_unresolved: false,
            });
            relations.push(RawRelation {
                source: "CENTER".into(),
                target: format!("LEAF{i}"),
                description: "links".into(),
                strength: *strength,
            });
        }
        let report = ParseReport {
            entities,
            relations,
            warnings: vec![],
            complete_marker_seen: true,
        };
        g.ingest_extraction(e, &report, "s1", DescriptionPolicy::default()).unwrap();
        g
    }

    #[test]
    fn expansion_orders_by_strength_and_respects_budget() {
        let e = HashEmbedder::new(64);
        let g = star(&e);
        let q = e.embed("hub").unwrap();
        let act = ActivationSet {
            seeds: vec![("n0".into(), 1.0)],
            expanded: vec![],
        };
        let ex = expand_one_hop(&g, &act, &q, 3);
        // LEAF1 (9), LEAF3 (7), LEAF4 (5)
        assert_eq!(ex.expanded_ids(), ["n2", "n4", "n5"]);
        assert!(expand_one_hop(&g, &act, &q, 0).expanded.is_empty());
        let leaf = ActivationSet {
            seeds: vec![("n1".into(), 0.5)],
            expanded: vec![],
        };
        assert_eq!(expand_one_hop(&g, &leaf, &q, 50).expanded_ids(), ["n0"]);
    }

    #[test]
    fn lexicographic_ranking() {
        let scores = [(0.9, 2), (0.9, 5), (0.8, 9)];
        let mut ranked: Vec<(usize, RankScore)> = scores
            .iter()
            .enumerate()
            .map(|(i, &(e, g))| {
                (
                    i,
                    RankScore {
                        score_e: e,
                        score_g: g,
                        score_s: None,
                    },
                )
            })
            .collect();
        let mut by_e = ranked.clone();
        ranked.sort_by(|a, b| compare(Rerank::ScoreEG, &a.1, &b.1));
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 0, 2]);
        by_e.sort_by(|a, b| compare(Rerank::ScoreE, &a.1, &b.1));
        assert_eq!(by_e.iter().map(|r| r.0).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn triple_mode_seeds_are_endpoints() {
        let e = HashEmbedder::new(64);
        let g = star(&e);
        let q = e.embed("CENTER links LEAF1").unwrap();
        let act = activate(&g, &q, 1, Activation::Triple).unwrap();
        assert_eq!(act.seed_ids().len(), 2);
        assert!(act.seed_ids().contains(&"n0"));
    }

    #[test]
    fn empty_graph_yields_nothing() {
        let e = HashEmbedder::new(16);
        let g = Graph::new(GraphSchema::Desc, e.spec().clone());
        let q = e.embed("x").unwrap();
        assert!(retrieve(&g, &q, &PipelineConfig::desc_graph()).unwrap().is_empty());
    }
}

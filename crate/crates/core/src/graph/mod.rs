//! Entity graphs: DescGraph and KnowGraph built from extraction reports, and
//! SimGraph built over merged key groups.

pub mod retrieval;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::embed::{Embedder, EmbedderSpec};
use crate::backend::Gateway;
use crate::error::{Error, Result};
use crate::extraction::{canonical_name, EntityType, ParseReport};
use crate::flat::{read_json, read_jsonl, read_matrix, write_json, write_jsonl, write_matrix};
use crate::model::{DescriptionMode, Embedding, GraphSchema, KeyUnit};
use crate::text::normalize_for_match;

const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SUMMARIZE_THRESHOLD: usize = 1024;
pub const SIM_EDGE_STRENGTH: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub session_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: String,
    pub canonical_name: String,
    pub etype: EntityType,
    pub descriptions: Vec<Description>,
    /// Provenance sessions in first-seen order.
    pub sessions: Vec<String>,
    #[serde(skip)]
    pub embedding: Option<Embedding>,
}

impl GraphNode {
    pub fn embedding(&self) -> &Embedding {
        self.embedding.as_ref().expect("node embedded after ingest")
    }

    pub fn description_text(&self) -> String {
        self.descriptions
            .iter()
            .map(|d| d.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub edge_id: String,
    pub src: String,
    pub dst: String,
    pub descriptions: Vec<Description>,
    pub strength: u8,
    pub triple_text: String,
    pub sessions: Vec<String>,
    #[serde(skip)]
    pub embedding: Option<Embedding>,
}

impl GraphEdge {
    pub fn embedding(&self) -> &Embedding {
        self.embedding.as_ref().expect("edge embedded after ingest")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEdge {
    pub src: String,
    pub dst: String,
    pub cosine: f64,
    pub judged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ProvenanceEvent {
    NodeCreated { node_id: String, session_id: String },
    NodeMerged { node_id: String, session_id: String },
    DescriptionsSummarized { node_id: String, session_id: String },
    EdgeCreated { edge_id: String, session_id: String, strength: u8 },
    EdgeMerged { edge_id: String, session_id: String, strength: u8 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub nodes_added: usize,
    pub nodes_merged: usize,
    pub edges_added: usize,
    pub edges_merged: usize,
    pub warnings: Vec<String>,
}

/// How node descriptions grow when an entity is seen again.
#[derive(Clone, Copy)]
pub struct DescriptionPolicy<'a> {
    pub mode: DescriptionMode,
    pub threshold: usize,
    pub summarizer: Option<&'a Gateway>,
}

impl Default for DescriptionPolicy<'_> {
    fn default() -> Self {
        DescriptionPolicy {
            mode: DescriptionMode::Append,
            threshold: DEFAULT_SUMMARIZE_THRESHOLD,
            summarizer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    schema: GraphSchema,
    spec: EmbedderSpec,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
    by_name: HashMap<String, usize>,
    by_node_id: HashMap<String, usize>,
    by_pair: HashMap<(usize, usize), usize>,
    adjacency: Vec<Vec<usize>>,
    session_embeddings: BTreeMap<String, Embedding>,
    log: Vec<ProvenanceEvent>,
    dirty_nodes: Vec<usize>,
    dirty_edges: Vec<usize>,
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|s| s == item) {
        list.push(item.to_string());
    }
}

/// Appends unless an existing description has the same normalized text.
fn push_description(list: &mut Vec<Description>, session_id: &str, text: &str) -> bool {
    let norm = normalize_for_match(text);
    if norm.is_empty() || list.iter().any(|d| normalize_for_match(&d.text) == norm) {
        return false;
    }
    list.push(Description {
        session_id: session_id.to_string(),
        text: text.trim().to_string(),
    });
    true
}

fn pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Graph {
    pub fn new(schema: GraphSchema, spec: EmbedderSpec) -> Self {
        Graph {
            schema,
            spec,
            nodes: Vec::new(),
            edges: Vec::new(),
            by_name: HashMap::new(),
            by_node_id: HashMap::new(),
            by_pair: HashMap::new(),
            adjacency: Vec::new(),
            session_embeddings: BTreeMap::new(),
            log: Vec::new(),
            dirty_nodes: Vec::new(),
            dirty_edges: Vec::new(),
        }
    }

    pub fn schema(&self) -> GraphSchema {
        self.schema
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn provenance_log(&self) -> &[ProvenanceEvent] {
        &self.log
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, node_id: &str) -> Option<usize> {
        self.by_node_id.get(node_id).copied()
    }

    pub fn node_by_name(&self, name: &str) -> Option<&GraphNode> {
        self.by_name.get(&canonical_name(name)).map(|&i| &self.nodes[i])
    }

    pub fn node(&self, node_id: &str) -> Option<&GraphNode> {
        self.node_index(node_id).map(|i| &self.nodes[i])
    }

    /// Edge indices incident to a node.
    pub fn incident(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<&GraphEdge> {
        self.by_pair.get(&pair(a, b)).map(|&e| &self.edges[e])
    }

    /// Index of the node at the other end of `edge` from `node`.
    pub fn other_end(&self, edge: usize, node: usize) -> usize {
        let e = &self.edges[edge];
        let src = self.by_node_id[&e.src];
        if src == node {
            self.by_node_id[&e.dst]
        } else {
            src
        }
    }

    pub fn session_embedding(&self, session_id: &str) -> Option<&Embedding> {
        self.session_embeddings.get(session_id)
    }

    pub fn session_embeddings(&self) -> &BTreeMap<String, Embedding> {
        &self.session_embeddings
    }

    /// Stores query–session embeddings used by session-level ranking.
    pub fn set_session_embedding(&mut self, session_id: &str, embedding: Embedding) -> Result<()> {
        embedding.check_dimension(self.spec.dimension)?;
        self.session_embeddings.insert(session_id.to_string(), embedding);
        Ok(())
    }

    /// Provenance sessions of a node, first-seen order.
    pub fn node_session_values(&self, node_id: &str) -> Result<Vec<String>> {
        self.node(node_id)
            .map(|n| n.sessions.clone())
            .ok_or_else(|| Error::NotFound(format!("node {node_id}")))
    }

    fn add_node(&mut self, name: String, etype: EntityType, session_id: &str) -> usize {
        let idx = self.nodes.len();
        let node_id = format!("n{idx}");
        self.nodes.push(GraphNode {
            node_id: node_id.clone(),
            canonical_name: name.clone(),
            etype,
            descriptions: Vec::new(),
            sessions: vec![session_id.to_string()],
            embedding: None,
        });
        self.adjacency.push(Vec::new());
        self.by_name.insert(name, idx);
        self.by_node_id.insert(node_id.clone(), idx);
        self.log.push(ProvenanceEvent::NodeCreated {
            node_id,
            session_id: session_id.to_string(),
        });
        idx
    }

    fn text_for_node(&self, node: &GraphNode) -> String {
        match self.schema {
            GraphSchema::Know => node.canonical_name.clone(),
            GraphSchema::Desc | GraphSchema::Sim => node.description_text(),
        }
    }

    /// Adds a description to a node under `policy`. Returns whether the
    /// description list changed. Embeddings are refreshed by [`Graph::refresh`].
    fn add_description(
        &mut self,
        idx: usize,
        text: &str,
        session_id: &str,
        policy: DescriptionPolicy<'_>,
    ) -> bool {
        if !push_description(&mut self.nodes[idx].descriptions, session_id, text) {
            return false;
        }
        if policy.mode == DescriptionMode::Summarize {
            let node = &self.nodes[idx];
            let total: usize = node.descriptions.iter().map(|d| d.text.chars().count()).sum::<usize>()
                + node.descriptions.len().saturating_sub(1);
            if total > policy.threshold && node.descriptions.len() > 1 {
                if let Some(gateway) = policy.summarizer {
                    let texts: Vec<String> = node.descriptions.iter().map(|d| d.text.clone()).collect();
                    match gateway.summarize(&texts, policy.threshold) {
                        Ok(summary) if !summary.trim().is_empty() => {
                            let summary: String = summary.trim().chars().take(policy.threshold).collect();
                            let node_id = node.node_id.clone();
                            self.nodes[idx].descriptions = vec![Description {
                                session_id: session_id.to_string(),
                                text: summary,
                            }];
                            self.log.push(ProvenanceEvent::DescriptionsSummarized {
                                node_id,
                                session_id: session_id.to_string(),
                            });
                        }
                        Ok(_) => log::warn!("empty summary; keeping appended descriptions"),
                        Err(e) => log::warn!("summarize failed, keeping appended descriptions: {e}"),
                    }
                }
            }
        }
        self.dirty_nodes.push(idx);
        true
    }

    /// Adds a description to an existing node and re-embeds it.
    pub fn update_description(
        &mut self,
        embedder: &dyn Embedder,
        node_id: &str,
        text: &str,
        session_id: &str,
        policy: DescriptionPolicy<'_>,
    ) -> Result<&GraphNode> {
        let idx = self
            .node_index(node_id)
            .ok_or_else(|| Error::NotFound(format!("node {node_id}")))?;
        self.add_description(idx, text, session_id, policy);
        push_unique(&mut self.nodes[idx].sessions, session_id);
        self.dirty_nodes.push(idx);
        self.refresh(embedder)?;
        Ok(&self.nodes[idx])
    }

    fn ensure_node(
        &mut self,
        name: &str,
        etype: EntityType,
        description: &str,
        session_id: &str,
        policy: DescriptionPolicy<'_>,
        summary: &mut IngestSummary,
    ) -> Option<usize> {
        let canonical = canonical_name(name);
        if canonical.is_empty() {
            summary.warnings.push(format!("skipping entity with empty name {name:?}"));
            return None;
        }
        let idx = match self.by_name.get(&canonical) {
            Some(&idx) => {
                summary.nodes_merged += 1;
                let first_visit = !self.nodes[idx].sessions.iter().any(|s| s == session_id);
                push_unique(&mut self.nodes[idx].sessions, session_id);
                if first_visit {
                    self.log.push(ProvenanceEvent::NodeMerged {
                        node_id: self.nodes[idx].node_id.clone(),
                        session_id: session_id.to_string(),
                    });
                }
                idx
            }
            None => {
                summary.nodes_added += 1;
                let idx = self.add_node(canonical.clone(), etype, session_id);
                self.dirty_nodes.push(idx);
                idx
            }
        };
        let text = if description.trim().is_empty() {
            // Keeps every node embeddable from its descriptions.
            canonical
        } else {
            description.to_string()
        };
        if self.nodes[idx].descriptions.is_empty() {
            push_description(&mut self.nodes[idx].descriptions, session_id, &text);
            self.dirty_nodes.push(idx);
        } else {
            self.add_description(idx, &text, session_id, policy);
        }
        Some(idx)
    }

    fn triple_text(&self, edge: &GraphEdge) -> String {
        let name = |id: &str| self.nodes[self.by_node_id[id]].canonical_name.clone();
        let descs = edge
            .descriptions
            .iter()
            .map(|d| d.text.as_str())
            .collect::<Vec<_>>()
            .join("; ");
        format!("{} | {} | {}", name(&edge.src), descs, name(&edge.dst))
    }

    fn ensure_edge(
        &mut self,
        a: usize,
        b: usize,
        description: &str,
        strength: u8,
        session_id: &str,
        summary: &mut IngestSummary,
    ) {
        let key = pair(a, b);
        match self.by_pair.get(&key) {
            Some(&e) => {
                summary.edges_merged += 1;
                let edge = &mut self.edges[e];
                edge.strength = edge.strength.max(strength);
                push_description(&mut edge.descriptions, session_id, description);
                push_unique(&mut edge.sessions, session_id);
                self.log.push(ProvenanceEvent::EdgeMerged {
                    edge_id: edge.edge_id.clone(),
                    session_id: session_id.to_string(),
                    strength,
                });
                self.dirty_edges.push(e);
            }
            None => {
                summary.edges_added += 1;
                let e = self.edges.len();
                let mut descriptions = Vec::new();
                push_description(&mut descriptions, session_id, description);
                let edge = GraphEdge {
                    edge_id: format!("e{e}"),
                    src: self.nodes[a].node_id.clone(),
                    dst: self.nodes[b].node_id.clone(),
                    descriptions,
                    strength,
                    triple_text: String::new(),
                    sessions: vec![session_id.to_string()],
                    embedding: None,
                };
                self.log.push(ProvenanceEvent::EdgeCreated {
                    edge_id: edge.edge_id.clone(),
                    session_id: session_id.to_string(),
                    strength,
                });
                self.edges.push(edge);
                self.by_pair.insert(key, e);
                self.adjacency[a].push(e);
                self.adjacency[b].push(e);
                self.dirty_edges.push(e);
            }
        }
    }

    /// Aligns a parsed extraction into the graph: entities by canonical name,
    /// relations by unordered endpoint pair with max strength. Embeddings of
    /// every touched node and edge are recomputed before returning.
    pub fn ingest_extraction(
        &mut self,
        embedder: &dyn Embedder,
        report: &ParseReport,
        session_id: &str,
        policy: DescriptionPolicy<'_>,
    ) -> Result<IngestSummary> {
        if self.schema == GraphSchema::Sim {
            return Err(Error::Input("entity extractions cannot be ingested into a SimGraph".into()));
        }
        let mut summary = IngestSummary::default();
        for entity in &report.entities {
            self.ensure_node(
                &entity.name,
                entity.etype,
                &entity.description,
                session_id,
                policy,
                &mut summary,
            );
        }
        for relation in &report.relations {
            let src = self.by_name.get(&canonical_name(&relation.source)).copied();
            let dst = self.by_name.get(&canonical_name(&relation.target)).copied();
            let (Some(a), Some(b)) = (src, dst) else {
                summary.warnings.push(format!(
                    "relation {} -> {} has an unknown endpoint; skipped",
                    relation.source, relation.target
                ));
                continue;
            };
            if a == b {
                summary
                    .warnings
                    .push(format!("self-relation on {} skipped", relation.source));
                continue;
            }
            self.ensure_edge(a, b, &relation.description, relation.strength.clamp(1, 10), session_id, &mut summary);
        }
        self.refresh(embedder)?;
        Ok(summary)
    }

    /// Re-embeds every node and edge touched since the last refresh.
    pub fn refresh(&mut self, embedder: &dyn Embedder) -> Result<()> {
        if embedder.spec() != &self.spec {
            return Err(Error::Input(format!(
                "embedder {} does not match graph embedder {}",
                embedder.spec().name,
                self.spec.name
            )));
        }
        let mut nodes: Vec<usize> = std::mem::take(&mut self.dirty_nodes);
        nodes.sort_unstable();
        nodes.dedup();
        let mut edges: Vec<usize> = std::mem::take(&mut self.dirty_edges);
        // Edge texts name their endpoints, so nothing else needs refreshing
        // when only node descriptions change.
        edges.sort_unstable();
        edges.dedup();
        for &e in &edges {
            self.edges[e].triple_text = self.triple_text(&self.edges[e]);
        }
        let mut texts: Vec<String> = nodes.iter().map(|&i| self.text_for_node(&self.nodes[i])).collect();
        texts.extend(edges.iter().map(|&e| self.edges[e].triple_text.clone()));
        if texts.is_empty() {
            return Ok(());
        }
        let mut vectors = embedder.embed_texts(&texts)?.into_iter();
        for &i in &nodes {
            let v = vectors.next().expect("vector per node");
            v.check_dimension(self.spec.dimension)?;
            self.nodes[i].embedding = Some(v);
        }
        for &e in &edges {
            let v = vectors.next().expect("vector per edge");
            v.check_dimension(self.spec.dimension)?;
            self.edges[e].embedding = Some(v);
        }
        Ok(())
    }

    /// Builds a SimGraph whose nodes are the given merged key groups and
    /// whose edges are the judged-similar pairs.
    pub fn from_key_groups(spec: EmbedderSpec, groups: &[KeyUnit], edges: &[SimEdge]) -> Result<Self> {
        let mut graph = Graph::new(GraphSchema::Sim, spec);
        let mut summary = IngestSummary::default();
        for group in groups {
            let sid = group
                .provenance_session_ids
                .first()
                .ok_or_else(|| Error::Input(format!("key {} has no provenance", group.key_id)))?;
            let idx = graph.add_node(canonical_name(&format!("GROUP:{sid}")), EntityType::Other, sid);
            for extra in &group.provenance_session_ids[1..] {
                push_unique(&mut graph.nodes[idx].sessions, extra);
            }
            push_description(&mut graph.nodes[idx].descriptions, sid, &group.text);
            group.embedding.check_dimension(graph.spec.dimension)?;
            graph.nodes[idx].embedding = Some(group.embedding.clone());
        }
        let by_key: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.key_id.as_str(), i)).collect();
        for edge in edges {
            let (Some(&a), Some(&b)) = (by_key.get(edge.src.as_str()), by_key.get(edge.dst.as_str())) else {
                return Err(Error::Input(format!("sim edge {} - {} names unknown groups", edge.src, edge.dst)));
            };
            let sid = graph.nodes[a].sessions[0].clone();
            graph.ensure_edge(a, b, "similar", SIM_EDGE_STRENGTH, &sid, &mut summary);
        }
        // Group nodes keep their key embeddings; only edges need embedding
        // and they are never activated in this schema.
        graph.dirty_nodes.clear();
        for e in std::mem::take(&mut graph.dirty_edges) {
            graph.edges[e].triple_text = graph.triple_text(&graph.edges[e]);
        }
        Ok(graph)
    }

    /// Checks name uniqueness, strength bounds, edge endpoints and that
    /// every stored embedding equals a fresh embedding of its source text.
    pub fn check_invariants(&self, embedder: Option<&dyn Embedder>) -> Result<()> {
        let mut names = HashSet::new();
        for node in &self.nodes {
            if !names.insert(node.canonical_name.as_str()) {
                return Err(Error::Input(format!("duplicate node name {}", node.canonical_name)));
            }
            if node.canonical_name != canonical_name(&node.canonical_name) {
                return Err(Error::Input(format!("node name {} is not canonical", node.canonical_name)));
            }
            if node.sessions.is_empty() {
                return Err(Error::Input(format!("node {} has no provenance", node.node_id)));
            }
        }
        let mut pairs = HashSet::new();
        for edge in &self.edges {
            let (Some(a), Some(b)) = (self.node_index(&edge.src), self.node_index(&edge.dst)) else {
                return Err(Error::Input(format!("edge {} has a dangling endpoint", edge.edge_id)));
            };
            if a == b || !pairs.insert(pair(a, b)) {
                return Err(Error::Input(format!("edge {} is a self-loop or duplicate", edge.edge_id)));
            }
            if !(1..=10).contains(&edge.strength) {
                return Err(Error::Input(format!("edge {} strength out of range", edge.edge_id)));
            }
        }
        if let (Some(embedder), true) = (embedder, self.schema != GraphSchema::Sim) {
            for node in &self.nodes {
                if node.embedding.as_ref() != Some(&embedder.embed(&self.text_for_node(node))?) {
                    return Err(Error::Input(format!("node {} embedding is stale", node.node_id)));
                }
            }
            for edge in &self.edges {
                if edge.triple_text != self.triple_text(edge)
                    || edge.embedding.as_ref() != Some(&embedder.embed(&edge.triple_text)?)
                {
                    return Err(Error::Input(format!("edge {} embedding is stale", edge.edge_id)));
                }
            }
        }
        Ok(())
    }

    /// Max strength over the provenance log for each edge id.
    pub fn logged_max_strengths(&self) -> BTreeMap<String, u8> {
        let mut out: BTreeMap<String, u8> = BTreeMap::new();
        for event in &self.log {
            if let ProvenanceEvent::EdgeCreated { edge_id, strength, .. }
            | ProvenanceEvent::EdgeMerged { edge_id, strength, .. } = event
            {
                let slot = out.entry(edge_id.clone()).or_insert(*strength);
                *slot = (*slot).max(*strength);
            }
        }
        out
    }
}

/// Pairs each key group with its top-`neighbors` cosine neighbours, judges
/// each unordered pair once, and keeps the pairs the judge accepts.
pub fn build_simgraph(
    groups: &[KeyUnit],
    neighbors: usize,
    judge: &mut dyn FnMut(&KeyUnit, &KeyUnit, f64) -> Result<bool>,
) -> Result<Vec<SimEdge>> {
    let mut judged: HashSet<(usize, usize)> = HashSet::new();
    let mut edges = Vec::new();
    for (i, group) in groups.iter().enumerate() {
        if group.embedding.is_degenerate() {
            continue;
        }
        let mut scored: Vec<(f64, usize)> = groups
            .iter()
            .enumerate()
            .filter(|(j, g)| *j != i && !g.embedding.is_degenerate())
            .map(|(j, g)| (group.embedding.cosine(&g.embedding), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(cosine, j) in scored.iter().take(neighbors) {
            if !judged.insert(pair(i, j)) {
                continue;
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if judge(&groups[a], &groups[b], cosine)? {
                edges.push(SimEdge {
                    src: groups[a].key_id.clone(),
                    dst: groups[b].key_id.clone(),
                    cosine,
                    judged: true,
                });
            }
        }
    }
    Ok(edges)
}

#[derive(Serialize, Deserialize)]
struct GraphMeta {
    format_version: u32,
    schema: GraphSchema,
    embedder: EmbedderSpec,
    dimension: usize,
    node_count: usize,
    edge_count: usize,
    session_count: usize,
}

#[derive(Serialize, Deserialize)]
struct FlagRow {
    degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct SessionRow {
    session_id: String,
    degenerate: bool,
}

impl Graph {
    /// Writes nodes, edges, session ids, their embedding matrices and the
    /// provenance log into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(
            &dir.join("meta.json"),
            &GraphMeta {
                format_version: FORMAT_VERSION,
                schema: self.schema,
                embedder: self.spec.clone(),
                dimension: self.spec.dimension,
                node_count: self.nodes.len(),
                edge_count: self.edges.len(),
                session_count: self.session_embeddings.len(),
            },
        )?;
        write_jsonl(&dir.join("nodes.jsonl"), &self.nodes)?;
        write_jsonl(&dir.join("edges.jsonl"), &self.edges)?;
        let node_vecs: Vec<&Embedding> = self.nodes.iter().map(|n| n.embedding()).collect();
        write_matrix(&dir.join("node_embeddings.f32"), node_vecs.iter().copied())?;
        write_jsonl(
            &dir.join("node_flags.jsonl"),
            node_vecs.iter().map(|v| FlagRow {
                degenerate: v.is_degenerate(),
            }),
        )?;
        let reserved = Embedding::reserved(self.spec.dimension);
        let edge_vecs: Vec<&Embedding> = self
            .edges
            .iter()
            .map(|e| e.embedding.as_ref().unwrap_or(&reserved))
            .collect();
        write_matrix(&dir.join("edge_embeddings.f32"), edge_vecs.iter().copied())?;
        write_jsonl(
            &dir.join("edge_flags.jsonl"),
            edge_vecs.iter().map(|v| FlagRow {
                degenerate: v.is_degenerate(),
            }),
        )?;
        write_jsonl(
            &dir.join("sessions.jsonl"),
            self.session_embeddings.iter().map(|(sid, v)| SessionRow {
                session_id: sid.clone(),
                degenerate: v.is_degenerate(),
            }),
        )?;
        write_matrix(&dir.join("session_embeddings.f32"), self.session_embeddings.values())?;
        write_jsonl(&dir.join("provenance.jsonl"), &self.log)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: GraphMeta = read_json(&meta_path)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(&meta_path, format!("unsupported format {}", meta.format_version)));
        }
        let d = meta.dimension;
        let mut nodes: Vec<GraphNode> = read_jsonl(&dir.join("nodes.jsonl"))?;
        let mut edges: Vec<GraphEdge> = read_jsonl(&dir.join("edges.jsonl"))?;
        if nodes.len() != meta.node_count || edges.len() != meta.edge_count {
            return Err(Error::format(&meta_path, "node/edge counts do not match records"));
        }
        let node_flags: Vec<FlagRow> = read_jsonl(&dir.join("node_flags.jsonl"))?;
        let edge_flags: Vec<FlagRow> = read_jsonl(&dir.join("edge_flags.jsonl"))?;
        let node_m = read_matrix(&dir.join("node_embeddings.f32"), nodes.len(), d)?;
        let edge_m = read_matrix(&dir.join("edge_embeddings.f32"), edges.len(), d)?;
        for ((node, row), flag) in nodes.iter_mut().zip(node_m).zip(&node_flags) {
            node.embedding = Some(Embedding::from_stored(row, flag.degenerate)?);
        }
        for ((edge, row), flag) in edges.iter_mut().zip(edge_m).zip(&edge_flags) {
            edge.embedding = Some(Embedding::from_stored(row, flag.degenerate)?);
        }
        let session_rows: Vec<SessionRow> = read_jsonl(&dir.join("sessions.jsonl"))?;
        let session_m = read_matrix(&dir.join("session_embeddings.f32"), session_rows.len(), d)?;
        let log: Vec<ProvenanceEvent> = read_jsonl(&dir.join("provenance.jsonl"))?;

        let mut graph = Graph::new(meta.schema, meta.embedder);
        for (i, node) in nodes.into_iter().enumerate() {
            graph.by_name.insert(node.canonical_name.clone(), i);
            graph.by_node_id.insert(node.node_id.clone(), i);
            graph.adjacency.push(Vec::new());
            graph.nodes.push(node);
        }
        for (e, edge) in edges.into_iter().enumerate() {
            let (Some(a), Some(b)) = (graph.node_index(&edge.src), graph.node_index(&edge.dst)) else {
                return Err(Error::format(dir.join("edges.jsonl"), format!("edge {} has unknown endpoint", edge.edge_id)));
            };
            graph.by_pair.insert(pair(a, b), e);
            graph.adjacency[a].push(e);
            graph.adjacency[b].push(e);
            graph.edges.push(edge);
        }
        for (row, values) in session_rows.into_iter().zip(session_m) {
            graph
                .session_embeddings
                .insert(row.session_id, Embedding::from_stored(values, row.degenerate)?);
        }
        graph.log = log;
        graph.check_invariants(None)?;
        Ok(graph)
    }
}

//! Add / update / noop / delete reconciliation of newly extracted facts
//! against an existing flat index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::embed::Embedder;
use crate::backend::{FlatExtraction, Gateway, MemOpDecision};
use crate::error::{Error, Result};
use crate::flat::FlatIndex;
use crate::model::{KeyKind, MemOp, Session};

pub const DEFAULT_CANDIDATES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactDecision {
    pub fact_text: String,
    /// What the decider returned.
    pub decision: MemOpDecision,
    /// What was actually applied after checking the allowed operations.
    pub applied: MemOp,
    /// Key added, updated or deleted; absent for noops.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_id: Option<String>,
    /// Set when an `add` was suppressed because add is not allowed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub forced_noop: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconcileLog {
    pub session_id: String,
    pub decisions: Vec<FactDecision>,
    pub adds: usize,
    pub updates: usize,
    pub noops: usize,
    pub deletes: usize,
    pub forced_noops: usize,
}

impl ReconcileLog {
    fn new(session_id: &str) -> Self {
        ReconcileLog {
            session_id: session_id.to_string(),
            ..Default::default()
        }
    }

    fn record(&mut self, entry: FactDecision) {
        match entry.applied {
            MemOp::Add => self.adds += 1,
            MemOp::Update => self.updates += 1,
            MemOp::Noop => self.noops += 1,
            MemOp::Delete => self.deletes += 1,
        }
        if entry.forced_noop {
            self.forced_noops += 1;
        }
        self.decisions.push(entry);
    }

    /// Counters agree with the recorded decisions.
    pub fn is_consistent(&self) -> bool {
        let count = |op| self.decisions.iter().filter(|d| d.applied == op).count();
        count(MemOp::Add) == self.adds
            && count(MemOp::Update) == self.updates
            && count(MemOp::Noop) == self.noops
            && count(MemOp::Delete) == self.deletes
            && self.decisions.iter().filter(|d| d.forced_noop).count() == self.forced_noops
    }
}

/// Top-`m` stored facts by cosine to `new_fact`. Only fact units compete:
/// summaries, keywords, merged groups and session texts are excluded.
pub fn candidate_memories(
    index: &FlatIndex,
    embedder: &dyn Embedder,
    new_fact: &str,
    m: usize,
) -> Result<Vec<(String, String)>> {
    if m == 0 || index.keys().iter().all(|k| k.unit.kind != KeyKind::Fact) {
        return Ok(Vec::new());
    }
    let query = embedder.embed(new_fact)?;
    let hits = index.search_where(&query, m, |k| k.unit.kind == KeyKind::Fact)?;
    Ok(hits
        .into_iter()
        .map(|(id, _)| {
            let text = index.get(&id).expect("hit exists").unit.text.clone();
            (id, text)
        })
        .collect())
}

/// Reconciles one session's facts in extraction order, then rebuilds the
/// per-session keys of every session whose facts changed.
pub fn reconcile_session(
    index: &mut FlatIndex,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    session: &Session,
    extraction: &FlatExtraction,
    op_set: &BTreeSet<MemOp>,
    candidate_count: usize,
) -> Result<ReconcileLog> {
    let sid = session.session_id.as_str();
    index.register_session(session, extraction);
    let mut log = ReconcileLog::new(sid);
    let mut touched: BTreeSet<String> = BTreeSet::new();
    touched.insert(sid.to_string());
    let add_only = op_set.len() == 1 && op_set.contains(&MemOp::Add);

    for fact in &extraction.facts {
        if add_only {
            let key_id = index.add_fact(embedder, fact, sid)?;
            log.record(FactDecision {
                fact_text: fact.clone(),
                decision: MemOpDecision::add("add-only operation set"),
                applied: MemOp::Add,
                key_id: Some(key_id),
                forced_noop: false,
            });
            continue;
        }
        let candidates = candidate_memories(index, embedder, fact, candidate_count)?;
        let decision = gateway.decide_mem_op(fact, &candidates)?;
        let entry = apply(index, embedder, fact, sid, decision, op_set, &mut touched)?;
        log.record(entry);
    }
    for other in &touched {
        if index.session(other).is_some() {
            index.rebuild_session(embedder, other)?;
        }
    }
    Ok(log)
}

/// Reconciliation with only update and noop allowed: novel facts are dropped
/// and counted as forced noops.
pub fn ablation_without_add(
    index: &mut FlatIndex,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    session: &Session,
    extraction: &FlatExtraction,
    candidate_count: usize,
) -> Result<ReconcileLog> {
    let ops: BTreeSet<MemOp> = [MemOp::Update, MemOp::Noop].into_iter().collect();
    reconcile_session(index, gateway, embedder, session, extraction, &ops, candidate_count)
}

fn apply(
    index: &mut FlatIndex,
    embedder: &dyn Embedder,
    fact: &str,
    sid: &str,
    decision: MemOpDecision,
    op_set: &BTreeSet<MemOp>,
    touched: &mut BTreeSet<String>,
) -> Result<FactDecision> {
    let mut op = decision.op;
    let mut forced_noop = false;
    if !op_set.contains(&op) {
        // A disallowed update/delete degrades to add; a disallowed add
        // becomes a noop.
        op = if op != MemOp::Add && op_set.contains(&MemOp::Add) {
            MemOp::Add
        } else {
            forced_noop = op == MemOp::Add;
            MemOp::Noop
        };
    }
    let target = decision.target_key_id.clone();
    let target_ok = target.as_deref().is_some_and(|t| index.get(t).is_some());
    if matches!(op, MemOp::Update | MemOp::Delete) && !target_ok {
        log::warn!("decision for {fact:?} targets a missing key; adding instead");
        op = if op_set.contains(&MemOp::Add) {
            MemOp::Add
        } else {
            MemOp::Noop
        };
    }
    let key_id = match op {
        MemOp::Add => Some(index.add_fact(embedder, fact, sid)?),
        MemOp::Update => {
            let target = target.expect("checked above");
            let text = decision
                .revised_text
                .clone()
                .filter(|t| !t.trim().is_empty())
                .unwrap_or_else(|| fact.to_string());
            touched.extend(
                index
                    .get(&target)
                    .expect("checked above")
                    .unit
                    .provenance_session_ids
                    .iter()
                    .cloned(),
            );
            index.update_key(embedder, &target, &text, sid)?;
            Some(target)
        }
        MemOp::Delete => {
            let target = target.expect("checked above");
            let removed = index.remove_key(&target)?;
            touched.extend(removed.unit.provenance_session_ids.iter().cloned());
            Some(target)
        }
        MemOp::Noop => None,
    };
    Ok(FactDecision {
        fact_text: fact.to_string(),
        decision,
        applied: op,
        key_id,
        forced_noop,
    })
}

/// Serializes logs as one JSON record per line.
pub fn write_logs(path: &std::path::Path, logs: &[ReconcileLog]) -> Result<()> {
    crate::flat::write_jsonl(path, logs)
}

pub fn read_logs(path: &std::path::Path) -> Result<Vec<ReconcileLog>> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    crate::flat::read_jsonl(path)
}

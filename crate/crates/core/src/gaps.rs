//! Post-hoc analysis of one-shot traces: per-subtree timelines of leaving
//! and entering messages, the gaps between them, the forest obtained by
//! closing every gap at its lowest subtree, and the amortization checks that
//! bound the realized cost by that forest's weight.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::is_cyclic_directed;
use petgraph::graphmap::DiGraphMap;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::checker::CheckReport;
use crate::forest::{locality_violations, RequestForest};
use crate::protocol::{MessageId, RequestId};
use crate::rational::{self, Rational};
use crate::sim::{Event, Trace};

/// A schedule edge as `(pred, succ)`.
pub type Edge = (RequestId, RequestId);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("gap analysis needs a one-shot trace")]
    NotOneShot,
    #[error("message {0} has no schedule edge")]
    UnscheduledMessage(MessageId),
}

/// One message crossing a subtree root. `msg` is `None` for the virtual
/// entry of a subtree that starts with a server inside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Crossing {
    pub msg: Option<MessageId>,
    #[serde(with = "rational::pair")]
    pub time: Rational,
    pub event: Option<usize>,
}

impl Crossing {
    fn key(&self) -> (Rational, i64) {
        (self.time, self.event.map_or(-1, |e| e as i64))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubtreeTimeline {
    pub subtree_root: usize,
    /// Messages leaving the subtree, in the order they reach its root.
    pub up: Vec<Crossing>,
    /// Messages entering the subtree, in the order they reach its root.
    pub down: Vec<Crossing>,
}

impl SubtreeTimeline {
    /// Checks `t_up[0] < t_down[0] <= t_up[1] < t_down[1] <= ...`.
    pub fn alternation_violation(&self) -> Option<String> {
        let mut merged: Vec<(bool, &Crossing)> =
            self.up.iter().map(|c| (true, c)).chain(self.down.iter().map(|c| (false, c))).collect();
        merged.sort_by_key(|(_, c)| c.key());
        for (i, (is_up, c)) in merged.iter().enumerate() {
            if *is_up != (i % 2 == 0) {
                return Some(format!("subtree {}: crossing {} out of order at {:?}", self.subtree_root, i, c.msg));
            }
            if i > 0 && !is_up && merged[i - 1].1.time >= c.time {
                return Some(format!("subtree {}: entry {:?} not after preceding exit", self.subtree_root, c.msg));
            }
        }
        None
    }

    pub fn cardinality_holds(&self) -> bool {
        self.down.len() <= self.up.len() && self.up.len() <= self.down.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GapKind {
    Intra,
    Inter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Gap {
    pub subtree_root: usize,
    pub entering: MessageId,
    pub leaving: MessageId,
    #[serde(with = "rational::pair")]
    pub size: Rational,
    pub kind: GapKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LocalPredecessor {
    pub request: RequestId,
    pub local_predecessor: RequestId,
    pub subtree_root: usize,
    pub kind: GapKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformationLedger {
    pub gaps: Vec<Gap>,
    pub local_predecessors: Vec<LocalPredecessor>,
    pub removed: BTreeSet<Edge>,
    pub added: BTreeSet<Edge>,
    pub potential_sources: BTreeSet<Edge>,
    /// For each removed edge, the potential edges whose messages gap with it.
    pub potential_of: BTreeMap<Edge, BTreeSet<Edge>>,
    /// For each potential edge, the removed edges it gaps with.
    pub removed_of: BTreeMap<Edge, BTreeSet<Edge>>,
    /// Removed edges grouped into replacement rounds; `None` if the
    /// dependency graph has a cycle.
    pub replacement_rounds: Option<Vec<Vec<Edge>>>,
    pub result: RequestForest,
}

fn ancestors(trace: &Trace, leaf: usize) -> Vec<usize> {
    let hst = &trace.scenario.hst;
    let mut out = vec![leaf];
    let mut v = leaf;
    while let Some(p) = hst.parent(v) {
        out.push(p);
        v = p;
    }
    out
}

/// Timelines of every subtree containing a request.
pub fn build_timelines(trace: &Trace) -> Result<BTreeMap<usize, SubtreeTimeline>, AnalysisError> {
    if !trace.scenario.is_one_shot() {
        return Err(AnalysisError::NotOneShot);
    }
    let hst = &trace.scenario.hst;
    let mut out: BTreeMap<usize, SubtreeTimeline> = BTreeMap::new();
    for r in &trace.scenario.requests {
        for x in ancestors(trace, r.node) {
            let tl = out.entry(x).or_insert_with(|| SubtreeTimeline { subtree_root: x, up: vec![], down: vec![] });
            if r.is_dummy && tl.up.is_empty() {
                tl.up.push(Crossing { msg: None, time: rational::zero(), event: None });
            }
        }
    }
    for (i, ev) in trace.events.iter().enumerate() {
        let (x, msg, time, up) = match ev {
            Event::Send { from, msg, time, .. } if hst.is_leaf(*from) => (*from, *msg, *time, true),
            Event::Process { node, from, msg, time, forwarded_to, .. } => {
                let parent = hst.parent(*node);
                if parent == Some(*from) {
                    (*node, *msg, *time, false)
                } else if parent.is_some() && *forwarded_to == parent {
                    (*node, *msg, *time, true)
                } else {
                    continue;
                }
            }
            _ => continue,
        };
        let tl = out.entry(x).or_insert_with(|| SubtreeTimeline { subtree_root: x, up: vec![], down: vec![] });
        let c = Crossing { msg: Some(msg), time, event: Some(i) };
        if up {
            tl.up.push(c);
        } else {
            tl.down.push(c);
        }
    }
    for tl in out.values_mut() {
        tl.up.sort_by_key(Crossing::key);
        tl.down.sort_by_key(Crossing::key);
    }
    Ok(out)
}

/// The gap `(down[i], up[i + 1])` on every subtree, sorted by subtree and
/// entering message.
pub fn find_gaps(trace: &Trace, timelines: &BTreeMap<usize, SubtreeTimeline>) -> Vec<Gap> {
    let hst = &trace.scenario.hst;
    let msgs = trace.messages();
    let comps = trace.forest.components();
    let mut out = Vec::new();
    for (&x, tl) in timelines {
        for (i, down) in tl.down.iter().enumerate() {
            let (Some(entering), Some(Some(leaving))) = (down.msg, tl.up.get(i + 1).map(|c| c.msg)) else {
                continue;
            };
            let (me, ml) = (&msgs[&entering], &msgs[&leaving]);
            let size = hst.leaf_distance(me.dest_leaf.expect("entering message was delivered"), ml.source_leaf);
            let same = me.pred.and_then(|p| comps.get(&p)) == comps.get(&ml.origin);
            out.push(Gap {
                subtree_root: x,
                entering,
                leaving,
                size,
                kind: if same { GapKind::Intra } else { GapKind::Inter },
            });
        }
    }
    out
}

fn edge_of_message(trace: &Trace) -> BTreeMap<MessageId, Edge> {
    trace.forest.edges.iter().filter_map(|e| e.msg.map(|m| (m, (e.pred, e.succ)))).collect()
}

/// For each leaving message, the gap on the lowest subtree it takes part in.
pub fn lowest_gaps<'a>(trace: &Trace, gaps: &'a [Gap]) -> BTreeMap<MessageId, &'a Gap> {
    let hst = &trace.scenario.hst;
    let mut out: BTreeMap<MessageId, &Gap> = BTreeMap::new();
    for g in gaps {
        let lower = out.get(&g.leaving).is_none_or(|cur| hst.height(g.subtree_root) < hst.height(cur.subtree_root));
        if lower {
            out.insert(g.leaving, g);
        }
    }
    out
}

/// Closes every gap at its lowest subtree: the leaving message's edge is
/// replaced by one from the entering message's destination request.
pub fn transform(trace: &Trace, gaps: &[Gap]) -> Result<TransformationLedger, AnalysisError> {
    let msgs = trace.messages();
    let edge_of = edge_of_message(trace);
    let lookup = |m: MessageId| edge_of.get(&m).copied().ok_or(AnalysisError::UnscheduledMessage(m));

    let gnn: BTreeSet<Edge> = trace.forest.edges.iter().map(|e| (e.pred, e.succ)).collect();
    let mut pred = trace.forest.predecessor_map();
    let mut local_predecessors = Vec::new();
    for (leaving, g) in lowest_gaps(trace, gaps) {
        let request = msgs[&leaving].origin;
        let local = lookup(g.entering)?.0;
        pred.insert(request, local);
        local_predecessors.push(LocalPredecessor {
            request,
            local_predecessor: local,
            subtree_root: g.subtree_root,
            kind: g.kind,
        });
    }
    let mdf: BTreeSet<Edge> = pred.iter().map(|(&s, &p)| (p, s)).collect();
    let removed: BTreeSet<Edge> = gnn.difference(&mdf).copied().collect();
    let added: BTreeSet<Edge> = mdf.difference(&gnn).copied().collect();

    let mut potential_sources = BTreeSet::new();
    let mut potential_of: BTreeMap<Edge, BTreeSet<Edge>> = BTreeMap::new();
    let mut removed_of: BTreeMap<Edge, BTreeSet<Edge>> = BTreeMap::new();
    for g in gaps {
        let old = lookup(g.leaving)?;
        if removed.contains(&old) {
            let pot = lookup(g.entering)?;
            potential_sources.insert(pot);
            potential_of.entry(old).or_default().insert(pot);
            removed_of.entry(pot).or_default().insert(old);
        }
    }

    let result = RequestForest::new(trace.scenario.requests.clone(), mdf.into_iter().collect());
    let replacement_rounds = replacement_rounds(&removed, &potential_of);
    Ok(TransformationLedger {
        gaps: gaps.to_vec(),
        local_predecessors,
        removed,
        added,
        potential_sources,
        potential_of,
        removed_of,
        replacement_rounds,
        result,
    })
}

/// Dependency graph over removed and potential edges: `e -> e'` when `e'` is
/// removed and `e` supplies potential to it.
pub fn dependency_graph(ledger: &TransformationLedger) -> DiGraphMap<Edge, ()> {
    let mut g = DiGraphMap::new();
    for &e in ledger.removed.iter().chain(&ledger.potential_sources) {
        g.add_node(e);
    }
    for (&old, pots) in &ledger.potential_of {
        for &pot in pots {
            g.add_edge(pot, old, ());
        }
    }
    g
}

fn replacement_rounds(removed: &BTreeSet<Edge>, potential_of: &BTreeMap<Edge, BTreeSet<Edge>>) -> Option<Vec<Vec<Edge>>> {
    // an edge may be replaced once no pending removed edge needs its potential
    let mut pending = removed.clone();
    let mut rounds = Vec::new();
    while !pending.is_empty() {
        let round: Vec<Edge> = pending
            .iter()
            .copied()
            .filter(|e| !pending.iter().any(|o| potential_of.get(o).is_some_and(|p| p.contains(e))))
            .collect();
        if round.is_empty() {
            return None;
        }
        for e in &round {
            pending.remove(e);
        }
        rounds.push(round);
    }
    Some(rounds)
}

fn tree_weight(trace: &Trace, edges: impl IntoIterator<Item = Edge>) -> Rational {
    let hst = &trace.scenario.hst;
    let loc = |r: RequestId| trace.scenario.request(r).expect("edge endpoints are requests").node;
    edges.into_iter().map(|(a, b)| hst.leaf_distance(loc(a), loc(b))).sum()
}

/// Tree weight minus realized latency over a set of schedule edges.
pub fn potential(edges: &BTreeSet<Edge>, trace: &Trace) -> Rational {
    let lat = trace.edge_latency();
    let paid: Rational = edges.iter().map(|e| lat.get(e).copied().unwrap_or_else(rational::zero)).sum();
    tree_weight(trace, edges.iter().copied()) - paid
}

/// Amortization, cost bound, per-gap latency bound, lowest-gap size, the
/// shape of the added edges, dependency acyclicity and the locality of the
/// resulting forest.
pub fn verify_amortization(ledger: &TransformationLedger, trace: &Trace) -> CheckReport {
    let hst = &trace.scenario.hst;
    let msgs = trace.messages();
    let diameter = |x: usize| hst.subtree_diameter(x).expect("subtree roots are nodes");
    let mut report = CheckReport::default();

    let w_old = tree_weight(trace, ledger.removed.iter().copied());
    let w_new = tree_weight(trace, ledger.added.iter().copied());
    let phi = potential(&ledger.potential_sources, trace);
    report.record(
        "amortization",
        (w_old > w_new + phi).then(|| {
            format!(
                "W(removed) = {} > W(added) + potential = {} + {}",
                rational::display(&w_old),
                rational::display(&w_new),
                rational::display(&phi)
            )
        }),
    );

    let cost = trace.total_cost();
    let w_mdf = tree_weight(trace, ledger.result.edges.iter().copied());
    report.record(
        "cost_within_modified_forest",
        (cost > w_mdf).then(|| format!("cost {} > weight {}", rational::display(&cost), rational::display(&w_mdf))),
    );

    let latency_bad = ledger.gaps.iter().find(|g| msgs[&g.entering].latency > diameter(g.subtree_root));
    report.record(
        "gap_latency_within_diameter",
        latency_bad.map(|g| format!("gap ({}, {}) on subtree {}", g.entering, g.leaving, g.subtree_root)),
    );

    let lowest = lowest_gaps(trace, &ledger.gaps);
    let size_bad = lowest.values().find(|g| g.size != diameter(g.subtree_root));
    report.record(
        "lowest_gap_size_is_diameter",
        size_bad.map(|g| format!("gap ({}, {}) on subtree {}", g.entering, g.leaving, g.subtree_root)),
    );

    let loc = |r: RequestId| trace.scenario.request(r).expect("known request").node;
    let split_bad = ledger.local_predecessors.iter().find(|lp| {
        ledger.added.contains(&(lp.local_predecessor, lp.request))
            && hst.lca(loc(lp.local_predecessor), loc(lp.request)) != lp.subtree_root
    });
    report.record(
        "added_edges_split_at_closing_subtree",
        split_bad.map(|lp| format!("({}, {}) at subtree {}", lp.local_predecessor, lp.request, lp.subtree_root)),
    );

    let cyclic = is_cyclic_directed(&dependency_graph(ledger)) || ledger.replacement_rounds.is_none();
    report.record("dependency_graph_acyclic", cyclic.then(|| "cycle among removed edges".to_string()));

    report.record("modified_forest_spanning", ledger.result.validate().err().map(|e| e.to_string()));
    let locality = locality_violations(hst, &ledger.result);
    report.record("modified_forest_locality", locality.first().cloned());
    report
}

/// Everything the analyzer derives from one trace.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub timelines: BTreeMap<usize, SubtreeTimeline>,
    pub ledger: TransformationLedger,
    pub report: CheckReport,
}

pub fn analyze(trace: &Trace) -> Result<Analysis, AnalysisError> {
    let timelines = build_timelines(trace)?;
    let mut report = CheckReport::default();
    let alternation = timelines.values().find_map(SubtreeTimeline::alternation_violation);
    report.record("timeline_alternation", alternation);
    let card = timelines.values().find(|t| !t.cardinality_holds());
    report.record("timeline_cardinality", card.map(|t| format!("subtree {}", t.subtree_root)));
    let gaps = find_gaps(trace, &timelines);
    let ledger = transform(trace, &gaps)?;
    report.merge(verify_amortization(&ledger, trace));
    Ok(Analysis { timelines, ledger, report })
}

impl Analysis {
    pub fn to_json(&self, trace: &Trace) -> Value {
        let l = &self.ledger;
        let pair = |q: Rational| rational::to_pair(&q);
        json!({
            "gaps": l.gaps,
            "local_predecessors": l.local_predecessors,
            "removed": l.removed,
            "added": l.added,
            "potential_sources": l.potential_sources,
            "replacement_rounds": l.replacement_rounds,
            "weight_removed": pair(tree_weight(trace, l.removed.iter().copied())),
            "weight_added": pair(tree_weight(trace, l.added.iter().copied())),
            "potential": pair(potential(&l.potential_sources, trace)),
            "cost": pair(trace.total_cost()),
            "modified_forest": l.result.edges,
            "modified_weight": pair(tree_weight(trace, l.result.edges.iter().copied())),
            "report": self.report,
        })
    }
}

//! Predicates over overlay snapshots and finished traces.
//!
//! Checks report verdicts instead of panicking so that fault-injected states
//! and corrupted traces can be inspected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use petgraph::algo::is_cyclic_directed;
use petgraph::graphmap::DiGraphMap;
use serde::Serialize;

use crate::protocol::{init_overlay, Message, OverlayState, RequestId};
use crate::rational;
use crate::sim::{CheckMode, Event, Trace};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CheckReport {
    pub verdicts: Vec<Verdict>,
    /// Index of the event after which the first failing check was observed.
    pub first_violation_event: Option<usize>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn verdict(&self, check: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.check == check)
    }

    pub(crate) fn record(&mut self, check: &str, witness: Option<String>) {
        self.verdicts.push(Verdict { check: check.to_string(), passed: witness.is_none(), witness });
    }

    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.passed)
    }

    /// Folds another report in, keeping the earliest violation index.
    pub fn merge(&mut self, other: CheckReport) {
        self.verdicts.extend(other.verdicts);
        self.first_violation_event = match (self.first_violation_event, other.first_violation_event) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed: Vec<String> = self
            .failures()
            .map(|v| format!("{} ({})", v.check, v.witness.as_deref().unwrap_or("")))
            .collect();
        if failed.is_empty() {
            write!(f, "all {} checks passed", self.verdicts.len())
        } else {
            write!(f, "failed: {}", failed.join("; "))
        }
    }
}

/// Link non-emptiness, per-edge exclusivity, acyclicity and a directed path
/// from every leaf to a self-looping leaf.
pub fn check_state(state: &OverlayState) -> CheckReport {
    let hst = state.hst();
    let n = hst.node_count();
    let mut report = CheckReport::default();

    report.record("links_non_empty", (0..n).find(|&v| state.links(v).is_empty()).map(|v| format!("node {v}")));

    let bad_target = (0..n).find_map(|v| {
        state
            .links(v)
            .iter()
            .find(|&&x| !(x == v && hst.is_leaf(v)) && hst.edge_weight(v, x).is_none())
            .map(|&x| format!("node {v} links to {x}"))
    });
    report.record("links_to_neighbours", bad_target);

    let mut carriers: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for m in state.in_flight().values() {
        *carriers.entry((m.from.min(m.to), m.from.max(m.to))).or_default() += 1;
    }
    let exclusivity = (1..n).find_map(|c| {
        let p = hst.parent(c).unwrap();
        let count = state.links(p).contains(&c) as usize
            + state.links(c).contains(&p) as usize
            + carriers.get(&(p.min(c), p.max(c))).copied().unwrap_or(0);
        (count != 1).then(|| format!("edge {p}-{c} carries {count} links/messages"))
    });
    report.record("edge_exclusivity", exclusivity);

    let mut g: DiGraphMap<usize, ()> = DiGraphMap::new();
    for v in 0..n {
        g.add_node(v);
        for &x in state.links(v) {
            if x != v {
                g.add_edge(v, x, ());
            }
        }
    }
    report.record("acyclic", is_cyclic_directed(&g).then(|| "directed cycle among links".to_string()));

    let is_sink = |v: usize| hst.is_leaf(v) && state.links(v).len() == 1 && state.links(v).contains(&v);
    let stranded = hst.leaves().find(|&leaf| {
        let mut seen = BTreeSet::from([leaf]);
        let mut stack = vec![leaf];
        while let Some(v) = stack.pop() {
            if is_sink(v) {
                return false;
            }
            for &x in state.links(v) {
                if seen.insert(x) {
                    stack.push(x);
                }
            }
        }
        true
    });
    report.record("leaf_reaches_self_loop", stranded.map(|l| format!("leaf {l}")));
    report
}

/// End-of-run checks: every request scheduled once, messages travel simple
/// direct paths within their latency budget, and the schedule is `k` paths
/// each headed by its own dummy.
pub fn check_trace(trace: &Trace) -> CheckReport {
    let s = &trace.scenario;
    let hst = &s.hst;
    let mut report = CheckReport::default();

    let nondecreasing = trace
        .events
        .windows(2)
        .position(|w| w[1].time() < w[0].time())
        .map(|i| format!("event {} goes back in time", i + 1));
    report.record("times_non_decreasing", nondecreasing);

    // every receive matches the latest send of that message
    let mut pending: BTreeMap<u32, (usize, usize, rational::Rational)> = BTreeMap::new();
    let mut timing = None;
    let mut latency_bound = None;
    for (i, ev) in trace.events.iter().enumerate() {
        match ev {
            Event::Send { time, msg, from, to, latency, .. } => {
                match hst.edge_weight(*from, *to) {
                    Some(w) if rational::is_positive(latency) && *latency <= w => {}
                    _ => {
                        latency_bound.get_or_insert(format!("event {i}: hop {from}-{to} latency out of range"));
                    }
                }
                pending.insert(*msg, (*from, *to, *time + *latency));
            }
            Event::Receive { time, msg, node, from, .. } => match pending.remove(msg) {
                Some((f, t, due)) if f == *from && t == *node && due == *time => {}
                _ => {
                    timing.get_or_insert(format!("event {i}: receive of message {msg} does not match its send"));
                }
            },
            _ => {}
        }
    }
    report.record("hop_latency_in_range", latency_bound);
    report.record("receive_matches_send", timing);

    let invoked: BTreeSet<RequestId> = s.invoked().iter().map(|r| r.id).collect();
    let dummies: BTreeSet<RequestId> = s.dummies().iter().map(|r| r.id).collect();
    let mut succ_count: BTreeMap<RequestId, usize> = BTreeMap::new();
    for e in &trace.forest.edges {
        *succ_count.entry(e.succ).or_default() += 1;
    }
    let scheduled = invoked
        .iter()
        .find(|r| succ_count.get(r) != Some(&1))
        .map(|r| format!("request {r} scheduled {} times", succ_count.get(r).copied().unwrap_or(0)))
        .or_else(|| dummies.iter().find(|d| succ_count.contains_key(d)).map(|d| format!("dummy {d} has a predecessor")));
    report.record("every_request_scheduled_once", scheduled);

    let node_of: BTreeMap<RequestId, usize> = s.requests.iter().map(|r| (r.id, r.node)).collect();
    let msgs = trace.messages();
    let revisit = msgs.values().find_map(|m| {
        let distinct: BTreeSet<_> = m.hops.iter().collect();
        (distinct.len() != m.hops.len()).then(|| format!("message {} hops {:?}", m.id, m.hops))
    });
    report.record("no_node_revisited", revisit);

    let mut direct = None;
    let mut within = None;
    for m in msgs.values() {
        let (Some(dest), Some(pred)) = (m.dest_leaf, m.pred) else { continue };
        if node_of.get(&m.origin) != Some(&m.source_leaf) || node_of.get(&pred) != Some(&dest) {
            direct.get_or_insert(format!("message {} endpoints do not match its requests", m.id));
        } else if hst.path(m.source_leaf, dest) != m.hops {
            direct.get_or_insert(format!("message {} took {:?}", m.id, m.hops));
        }
        if m.latency > hst.leaf_distance(m.source_leaf, dest) {
            within.get_or_insert(format!("message {} latency exceeds the tree distance", m.id));
        }
    }
    report.record("direct_path", direct);
    report.record("latency_within_distance", within);

    let shape = match trace.forest.paths() {
        Err(r) => Some(format!("request {r} has two successors or lies on a cycle")),
        Ok(paths) => {
            let covered: usize = paths.iter().map(Vec::len).sum();
            let heads: BTreeSet<RequestId> = trace.forest.heads.iter().copied().collect();
            if heads != dummies || heads.len() != s.k() {
                Some("heads are not the dummies".to_string())
            } else if covered != s.requests.len() {
                Some(format!("paths cover {covered} of {} requests", s.requests.len()))
            } else {
                None
            }
        }
    };
    report.record("k_directed_paths", shape);
    report
}

/// Each server's serving order: its dummy followed by its path.
pub fn serving_order(trace: &Trace) -> Option<Vec<Vec<RequestId>>> {
    trace.forest.paths().ok()
}

/// Rebuilds every intermediate overlay state from the trace's link deltas
/// and runs [`check_state`] at the end of each atomic step.
pub fn replay_states(trace: &Trace, mode: CheckMode) -> CheckReport {
    let s = &trace.scenario;
    let servers: Vec<(usize, RequestId)> = s.dummies().iter().map(|r| (r.node, r.id)).collect();
    let mut report = CheckReport::default();
    let mut state = match init_overlay(s.hst.clone(), &servers) {
        Ok(st) => st,
        Err(e) => {
            report.record("replay_consistent", Some(e.to_string()));
            return report;
        }
    };
    let initial = check_state(&state);
    if !initial.passed() {
        report.record("initial_state", Some(initial.to_string()));
        return report;
    }
    let mut inconsistent = None;
    let mut violation = None;
    for (i, ev) in trace.events.iter().enumerate() {
        let ok = match ev {
            Event::Invoke { request, node, delta, .. } => {
                state.set_last_request(*node, *request);
                apply_delta(&mut state, *node, delta)
            }
            Event::Send { time, msg, from, to, latency, .. } => {
                let entry = state.in_flight_mut().entry(*msg).or_insert_with(|| Message {
                    id: *msg,
                    origin: *msg,
                    from: *from,
                    to: *to,
                    hops: Vec::new(),
                    send_time: *time,
                    arrival_time: *time,
                    latency: rational::zero(),
                });
                entry.hops.push(*from);
                entry.from = *from;
                entry.to = *to;
                entry.arrival_time = *time + *latency;
                entry.latency += *latency;
                true
            }
            Event::Receive { .. } | Event::Schedule { .. } => true,
            Event::Process { msg, node, delta, forwarded_to, .. } => {
                if forwarded_to.is_none() {
                    state.in_flight_mut().remove(msg);
                }
                apply_delta(&mut state, *node, delta)
            }
        };
        if !ok {
            inconsistent.get_or_insert(format!("event {i} removes a missing link or adds an existing one"));
        }
        let step_ends = trace.events.get(i + 1).is_none_or(|next| next.step() != ev.step());
        let due = match mode {
            CheckMode::Off => false,
            CheckMode::Inline => true,
            CheckMode::Sampled(k) => k > 0 && ev.step() % k == 0,
        };
        if step_ends && due && violation.is_none() {
            let r = check_state(&state);
            if !r.passed() {
                violation = Some((i, r.to_string()));
            }
        }
    }
    report.record("replay_consistent", inconsistent);
    report.first_violation_event = violation.as_ref().map(|v| v.0);
    report.record("state_invariants_every_step", violation.map(|(i, r)| format!("after event {i}: {r}")));
    report
}

fn apply_delta(state: &mut OverlayState, node: usize, delta: &crate::protocol::LinkDelta) -> bool {
    let links = state.links_mut(node);
    let mut ok = true;
    for r in &delta.removed {
        ok &= links.remove(r);
    }
    for a in &delta.added {
        ok &= links.insert(*a);
    }
    ok
}

//! Link-reversal scheduling on an overlay tree.
//!
//! Every tree node keeps a set of links to neighbours (a leaf may link to
//! itself). A request at a leaf that holds its self-loop is queued behind the
//! last request invoked there. Otherwise the leaf sends a find-predecessor
//! message upward and takes the self-loop. A node receiving a message
//! forwards it along one of its downward links, or upward if it has none, and
//! reverses the used link to point back at the sender. A message that reaches
//! a leaf's self-loop queues its request behind the last one invoked there.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hst::Hst;
use crate::rational::{self, Rational};

pub type RequestId = u32;
/// A request sends at most one message, so messages reuse the request id.
pub type MessageId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    /// Leaf node of the overlay tree.
    pub node: usize,
    #[serde(with = "rational::pair")]
    pub time: Rational,
    pub is_dummy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub origin: RequestId,
    pub from: usize,
    pub to: usize,
    /// Nodes visited so far, starting with the source leaf.
    pub hops: Vec<usize>,
    #[serde(with = "rational::pair")]
    pub send_time: Rational,
    #[serde(with = "rational::pair")]
    pub arrival_time: Rational,
    /// Sum of hop latencies including the hop in progress.
    #[serde(with = "rational::pair")]
    pub latency: Rational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScheduleEdge {
    pub pred: RequestId,
    pub succ: RequestId,
    /// `None` when the successor was queued locally without a message.
    pub msg: Option<MessageId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleForest {
    pub edges: Vec<ScheduleEdge>,
    pub heads: Vec<RequestId>,
}

impl ScheduleForest {
    pub fn predecessor_map(&self) -> BTreeMap<RequestId, RequestId> {
        self.edges.iter().map(|e| (e.succ, e.pred)).collect()
    }

    /// Follows predecessors back to a head. Returns `None` on a cycle or a
    /// dangling chain.
    pub fn head_of(&self, r: RequestId) -> Option<RequestId> {
        let pred = self.predecessor_map();
        let heads: BTreeSet<_> = self.heads.iter().copied().collect();
        let mut x = r;
        for _ in 0..=pred.len() {
            if heads.contains(&x) {
                return Some(x);
            }
            x = *pred.get(&x)?;
        }
        None
    }

    /// Head of the component of every request that reaches one.
    pub fn components(&self) -> BTreeMap<RequestId, RequestId> {
        let mut out = BTreeMap::new();
        for &h in &self.heads {
            out.insert(h, h);
        }
        for e in &self.edges {
            if let Some(h) = self.head_of(e.succ) {
                out.insert(e.succ, h);
            }
        }
        out
    }

    /// Each head's serving order, following successors. Fails if some head
    /// has two successors.
    pub fn paths(&self) -> Result<Vec<Vec<RequestId>>, RequestId> {
        let mut succ: BTreeMap<RequestId, RequestId> = BTreeMap::new();
        for e in &self.edges {
            if succ.insert(e.pred, e.succ).is_some() {
                return Err(e.pred);
            }
        }
        let mut out = Vec::new();
        for &h in &self.heads {
            let mut path = vec![h];
            let mut x = h;
            while let Some(&n) = succ.get(&x) {
                if path.contains(&n) {
                    return Err(n);
                }
                path.push(n);
                x = n;
            }
            out.push(path);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkDelta {
    pub removed: Vec<usize>,
    pub added: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvokeOutcome {
    ScheduledLocally { pred: RequestId },
    Emitted { msg: MessageId, to: usize, latency: Rational },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReceiveOutcome {
    Forwarded { next: usize, latency: Rational },
    /// The finished message is handed back for the trace.
    Scheduled { pred: RequestId, message: Message },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("no server locations given")]
    NoServers,
    #[error("server location {0} is not a leaf")]
    ServerNotLeaf(usize),
    #[error("two servers share leaf {0}")]
    DuplicateServer(usize),
    #[error("request {0} is not at a leaf")]
    RequestNotAtLeaf(RequestId),
    #[error("message {0} is not in transit")]
    NotInFlight(MessageId),
    #[error("message {msg} delivered to {got} but travels to {expected}")]
    WrongNode { msg: MessageId, got: usize, expected: usize },
    #[error("message {msg} crosses edge {from}->{to} that still carries a link")]
    EdgeConflict { msg: MessageId, from: usize, to: usize },
    #[error("message {msg} visits node {node} twice")]
    Revisit { msg: MessageId, node: usize },
    #[error("node {0} has an empty or ambiguous link set")]
    BadLinks(usize),
    #[error("leaf {0} has no request to queue behind")]
    NoLastRequest(usize),
    #[error("hop latency {latency} on edge {from}-{to} is outside (0, {weight}]")]
    BadLatency { from: usize, to: usize, latency: String, weight: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayState {
    hst: Arc<Hst>,
    links: Vec<BTreeSet<usize>>,
    in_flight: BTreeMap<MessageId, Message>,
    last_request: BTreeMap<usize, RequestId>,
}

/// Hop latency supplier: `(message, from, to) -> latency`.
pub type LatencyFn<'a> = dyn FnMut(MessageId, usize, usize) -> Rational + 'a;
/// Picks an index into a sorted candidate list of at least two children.
pub type ChooseFn<'a> = dyn FnMut(&[usize]) -> usize + 'a;

/// Initial orientation. Every node on a root path of a server points down to
/// each child that leads to a server; server leaves hold self-loops; all
/// other nodes point to their parent.
pub fn init_overlay(hst: Arc<Hst>, servers: &[(usize, RequestId)]) -> Result<OverlayState, ProtocolError> {
    if servers.is_empty() {
        return Err(ProtocolError::NoServers);
    }
    let n = hst.node_count();
    let mut on_path = vec![false; n];
    let mut last_request = BTreeMap::new();
    for &(leaf, dummy) in servers {
        if !hst.is_leaf(leaf) {
            return Err(ProtocolError::ServerNotLeaf(leaf));
        }
        if last_request.insert(leaf, dummy).is_some() {
            return Err(ProtocolError::DuplicateServer(leaf));
        }
        let mut v = Some(leaf);
        while let Some(x) = v {
            on_path[x] = true;
            v = hst.parent(x);
        }
    }
    let mut links = vec![BTreeSet::new(); n];
    for v in 0..n {
        if on_path[v] {
            if hst.is_leaf(v) {
                links[v].insert(v);
            } else {
                links[v].extend(hst.children(v).iter().copied().filter(|&c| on_path[c]));
            }
        } else {
            links[v].insert(hst.parent(v).expect("the root is always on a server path"));
        }
    }
    Ok(OverlayState { hst, links, in_flight: BTreeMap::new(), last_request })
}

impl OverlayState {
    /// Assembles a state directly; used for replays and fault injection.
    pub fn from_parts(
        hst: Arc<Hst>,
        links: Vec<BTreeSet<usize>>,
        in_flight: BTreeMap<MessageId, Message>,
        last_request: BTreeMap<usize, RequestId>,
    ) -> Self {
        OverlayState { hst, links, in_flight, last_request }
    }

    pub fn hst(&self) -> &Arc<Hst> {
        &self.hst
    }

    pub fn links(&self, v: usize) -> &BTreeSet<usize> {
        &self.links[v]
    }

    pub fn links_mut(&mut self, v: usize) -> &mut BTreeSet<usize> {
        &mut self.links[v]
    }

    pub fn in_flight(&self) -> &BTreeMap<MessageId, Message> {
        &self.in_flight
    }

    pub fn in_flight_mut(&mut self) -> &mut BTreeMap<MessageId, Message> {
        &mut self.in_flight
    }

    pub fn last_request(&self, leaf: usize) -> Option<RequestId> {
        self.last_request.get(&leaf).copied()
    }

    pub fn set_last_request(&mut self, leaf: usize, r: RequestId) {
        self.last_request.insert(leaf, r);
    }

    fn replace_links(&mut self, v: usize, new: BTreeSet<usize>) -> LinkDelta {
        let old = std::mem::replace(&mut self.links[v], new);
        LinkDelta {
            removed: old.difference(&self.links[v]).copied().collect(),
            added: self.links[v].difference(&old).copied().collect(),
        }
    }

    fn hop_latency(
        &self,
        msg: MessageId,
        from: usize,
        to: usize,
        latency: &mut LatencyFn<'_>,
    ) -> Result<Rational, ProtocolError> {
        let weight = self.hst.edge_weight(from, to).expect("hops follow tree edges");
        let l = latency(msg, from, to);
        if !rational::is_positive(&l) || l > weight {
            return Err(ProtocolError::BadLatency {
                from,
                to,
                latency: rational::display(&l),
                weight: rational::display(&weight),
            });
        }
        Ok(l)
    }

    /// Handles a request invoked at its leaf. One atomic step.
    pub fn on_invoke(
        &mut self,
        r: &Request,
        now: Rational,
        latency: &mut LatencyFn<'_>,
    ) -> Result<(InvokeOutcome, LinkDelta), ProtocolError> {
        let u = r.node;
        if !self.hst.is_leaf(u) {
            return Err(ProtocolError::RequestNotAtLeaf(r.id));
        }
        if self.links[u].len() == 1 && self.links[u].contains(&u) {
            let pred = self.last_request(u).ok_or(ProtocolError::NoLastRequest(u))?;
            self.last_request.insert(u, r.id);
            return Ok((InvokeOutcome::ScheduledLocally { pred }, LinkDelta::default()));
        }
        let parent = self.hst.parent(u).ok_or(ProtocolError::BadLinks(u))?;
        if self.links[u].len() != 1 || !self.links[u].contains(&parent) {
            return Err(ProtocolError::BadLinks(u));
        }
        let l = self.hop_latency(r.id, u, parent, latency)?;
        let delta = self.replace_links(u, BTreeSet::from([u]));
        self.last_request.insert(u, r.id);
        self.in_flight.insert(
            r.id,
            Message {
                id: r.id,
                origin: r.id,
                from: u,
                to: parent,
                hops: vec![u],
                send_time: now,
                arrival_time: now + l,
                latency: l,
            },
        );
        Ok((InvokeOutcome::Emitted { msg: r.id, to: parent, latency: l }, delta))
    }

    /// Handles the arrival of `msg` at `w`. One atomic step.
    pub fn on_receive(
        &mut self,
        w: usize,
        msg: MessageId,
        now: Rational,
        choose: &mut ChooseFn<'_>,
        latency: &mut LatencyFn<'_>,
    ) -> Result<(ReceiveOutcome, LinkDelta), ProtocolError> {
        let m = self.in_flight.get(&msg).ok_or(ProtocolError::NotInFlight(msg))?;
        if m.to != w {
            return Err(ProtocolError::WrongNode { msg, got: w, expected: m.to });
        }
        let from = m.from;
        if self.links[w].contains(&from) || self.links[from].contains(&w) {
            return Err(ProtocolError::EdgeConflict { msg, from, to: w });
        }
        if m.hops.contains(&w) {
            return Err(ProtocolError::Revisit { msg, node: w });
        }
        let child_links: Vec<usize> =
            self.links[w].iter().copied().filter(|&c| self.hst.parent(c) == Some(w)).collect();
        let z = match child_links.len() {
            0 if self.links[w].len() == 1 => *self.links[w].iter().next().unwrap(),
            0 => return Err(ProtocolError::BadLinks(w)),
            1 => child_links[0],
            _ => {
                let i = choose(&child_links);
                child_links[i % child_links.len()]
            }
        };
        if z == from {
            return Err(ProtocolError::Revisit { msg, node: from });
        }
        let mut new_links = self.links[w].clone();
        new_links.remove(&z);
        new_links.insert(from);
        if z == w {
            let pred = self.last_request(w).ok_or(ProtocolError::NoLastRequest(w))?;
            let delta = self.replace_links(w, new_links);
            let mut message = self.in_flight.remove(&msg).unwrap();
            message.hops.push(w);
            return Ok((ReceiveOutcome::Scheduled { pred, message }, delta));
        }
        let l = self.hop_latency(msg, w, z, latency)?;
        let delta = self.replace_links(w, new_links);
        let m = self.in_flight.get_mut(&msg).unwrap();
        m.hops.push(w);
        m.from = w;
        m.to = z;
        m.arrival_time = now + l;
        m.latency += l;
        Ok((ReceiveOutcome::Forwarded { next: z, latency: l }, delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hst::build_explicit_hst;
    use crate::rational::int;

    fn sync(h: &Hst) -> impl FnMut(MessageId, usize, usize) -> Rational + '_ {
        move |_, a, b| h.edge_weight(a, b).unwrap()
    }

    fn req(id: RequestId, node: usize) -> Request {
        Request { id, node, time: int(0), is_dummy: false }
    }

    #[test]
    fn star_init() {
        let hst = Arc::new(build_explicit_hst(int(2), 1, &[3]).unwrap());
        let s = init_overlay(hst, &[(1, 0)]).unwrap();
        assert_eq!(s.links(0), &BTreeSet::from([1]));
        assert_eq!(s.links(1), &BTreeSet::from([1]));
        assert_eq!(s.links(2), &BTreeSet::from([0]));
        assert_eq!(s.links(3), &BTreeSet::from([0]));
    }

    #[test]
    fn init_rejects_inner_server() {
        let hst = Arc::new(build_explicit_hst(int(2), 2, &[2, 2]).unwrap());
        assert_eq!(init_overlay(hst.clone(), &[(1, 0)]).unwrap_err(), ProtocolError::ServerNotLeaf(1));
        assert_eq!(init_overlay(hst.clone(), &[]).unwrap_err(), ProtocolError::NoServers);
        assert_eq!(
            init_overlay(hst, &[(2, 0), (2, 1)]).unwrap_err(),
            ProtocolError::DuplicateServer(2)
        );
    }

    #[test]
    fn local_schedule_at_server() {
        let hst = Arc::new(build_explicit_hst(int(2), 1, &[2]).unwrap());
        let h = hst.clone();
        let mut s = init_overlay(hst, &[(1, 0)]).unwrap();
        let (out, delta) = s.on_invoke(&req(5, 1), int(0), &mut sync(&h)).unwrap();
        assert_eq!(out, InvokeOutcome::ScheduledLocally { pred: 0 });
        assert_eq!(delta, LinkDelta::default());
        assert_eq!(s.last_request(1), Some(5));
    }

    #[test]
    fn two_invocations_before_any_return() {
        // leaf 3 invokes twice; the second queues behind the first
        let hst = Arc::new(build_explicit_hst(int(2), 2, &[2, 2]).unwrap());
        let h = hst.clone();
        let mut s = init_overlay(hst, &[(2, 0)]).unwrap();
        let (out, _) = s.on_invoke(&req(1, 5), int(0), &mut sync(&h)).unwrap();
        assert!(matches!(out, InvokeOutcome::Emitted { to: 4, .. }));
        let (out, _) = s.on_invoke(&req(2, 5), int(0), &mut sync(&h)).unwrap();
        assert_eq!(out, InvokeOutcome::ScheduledLocally { pred: 1 });
    }

    #[test]
    fn receive_forwards_down_and_flips() {
        // leaves a=2, b=3 under x=1; server at a; request at b
        let hst = Arc::new(build_explicit_hst(int(2), 2, &[2, 2]).unwrap());
        let h = hst.clone();
        let mut s = init_overlay(hst, &[(2, 0)]).unwrap();
        s.on_invoke(&req(1, 3), int(0), &mut sync(&h)).unwrap();
        let mut first = |_: &[usize]| 0usize;
        let (out, delta) = s.on_receive(1, 1, int(1), &mut first, &mut sync(&h)).unwrap();
        assert_eq!(out, ReceiveOutcome::Forwarded { next: 2, latency: int(1) });
        assert_eq!(delta, LinkDelta { removed: vec![2], added: vec![3] });
        let (out, _) = s.on_receive(2, 1, int(2), &mut first, &mut sync(&h)).unwrap();
        match out {
            ReceiveOutcome::Scheduled { pred, message } => {
                assert_eq!(pred, 0);
                assert_eq!(message.hops, vec![3, 1, 2]);
                assert_eq!(message.latency, int(2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.links(2), &BTreeSet::from([1]));
        assert!(s.in_flight().is_empty());
    }

    #[test]
    fn wrong_delivery_is_rejected() {
        let hst = Arc::new(build_explicit_hst(int(2), 2, &[2, 2]).unwrap());
        let h = hst.clone();
        let mut s = init_overlay(hst, &[(2, 0)]).unwrap();
        s.on_invoke(&req(1, 3), int(0), &mut sync(&h)).unwrap();
        let mut first = |_: &[usize]| 0usize;
        assert_eq!(
            s.on_receive(0, 1, int(1), &mut first, &mut sync(&h)).unwrap_err(),
            ProtocolError::WrongNode { msg: 1, got: 0, expected: 1 }
        );
        assert_eq!(
            s.on_receive(1, 9, int(1), &mut first, &mut sync(&h)).unwrap_err(),
            ProtocolError::NotInFlight(9)
        );
    }

    #[test]
    fn latency_above_weight_is_rejected() {
        let hst = Arc::new(build_explicit_hst(int(2), 1, &[2]).unwrap());
        let mut s = init_overlay(hst, &[(1, 0)]).unwrap();
        let mut slow = |_: MessageId, _: usize, _: usize| int(2);
        assert!(matches!(
            s.on_invoke(&req(1, 2), int(0), &mut slow),
            Err(ProtocolError::BadLatency { .. })
        ));
    }

    #[test]
    fn forest_paths_and_components() {
        let f = ScheduleForest {
            edges: vec![
                ScheduleEdge { pred: 0, succ: 3, msg: Some(3) },
                ScheduleEdge { pred: 3, succ: 4, msg: Some(4) },
                ScheduleEdge { pred: 1, succ: 2, msg: None },
            ],
            heads: vec![0, 1],
        };
        assert_eq!(f.paths().unwrap(), vec![vec![0, 3, 4], vec![1, 2]]);
        assert_eq!(f.head_of(4), Some(0));
        assert_eq!(f.components()[&2], 1);
    }
}

//! Deterministic discrete-event execution of the protocol.
//!
//! Work is grouped into batches keyed by `(time, node)`. Within a batch,
//! invocations run first in request-id order, then arrivals in the order
//! chosen by the tie policy. Each invocation or arrival is one atomic step.
//! Latencies are strictly positive, so a message sent during a batch never
//! joins it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checker::{check_state, CheckReport};
use crate::embed::embed_frt;
use crate::graph::{metric_closure, normalize_weights, WeightedGraph};
use crate::hst::Hst;
use crate::protocol::{
    init_overlay, InvokeOutcome, LinkDelta, MessageId, OverlayState, ProtocolError, ReceiveOutcome, Request,
    RequestId, ScheduleEdge, ScheduleForest,
};
use crate::rational::{self, Rational};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub msg: MessageId,
    pub edge: [usize; 2],
    #[serde(with = "rational::pair")]
    pub latency: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    /// Every hop takes exactly the edge weight.
    Synchronous,
    /// Each hop takes `w * j / denominator` for `j` uniform in
    /// `1..=denominator`, drawn from the scenario seed.
    RandomFraction { denominator: u32 },
    /// Per-(message, edge) latencies; unlisted hops take the edge weight.
    Scripted { script: Vec<ScriptEntry> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TiePolicy {
    LowestId,
    /// Random choices drawn from the scenario seed.
    SeededRandom,
    /// Each decision among `m > 1` options takes `picks[i] mod m`; once the
    /// picks run out, the lowest option.
    Scripted { picks: Vec<u32> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    Off,
    /// Check the overlay invariants after every atomic step.
    Inline,
    /// Check after every `n`-th step.
    Sampled(u64),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("latency script entry {index}: {reason}")]
    Script { index: usize, reason: String },
    #[error("protocol error at event {event_index}: {source}")]
    Protocol { event_index: usize, source: ProtocolError },
    #[error("invariant violation after event {event_index}: {report}")]
    Invariant { event_index: usize, report: CheckReport },
    #[error("run ended with {0} unscheduled requests")]
    Incomplete(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub hst: Arc<Hst>,
    /// Server leaves; dummy `i` has request id `i` and sits on `servers[i]`.
    pub servers: Vec<usize>,
    /// Dummies first, then the invoked requests.
    pub requests: Vec<Request>,
    pub latency: LatencyModel,
    pub tie_policy: TiePolicy,
    pub seed: u64,
}

impl Scenario {
    /// Assigns ids `k, k+1, ...` to the given `(leaf, time)` requests.
    pub fn new(hst: Arc<Hst>, servers: Vec<usize>, requests: &[(usize, Rational)]) -> Result<Self, SimError> {
        let k = servers.len() as RequestId;
        let reqs = requests
            .iter()
            .enumerate()
            .map(|(i, &(node, time))| Request { id: k + i as RequestId, node, time, is_dummy: false })
            .collect();
        Scenario::with_requests(hst, servers, reqs)
    }

    /// `requests` are the invoked (non-dummy) requests with explicit ids,
    /// which must avoid the dummy ids `0..k`.
    pub fn with_requests(hst: Arc<Hst>, servers: Vec<usize>, requests: Vec<Request>) -> Result<Self, SimError> {
        let mut all: Vec<Request> = servers
            .iter()
            .enumerate()
            .map(|(i, &node)| Request { id: i as RequestId, node, time: rational::zero(), is_dummy: true })
            .collect();
        all.extend(requests);
        let s = Scenario {
            hst,
            servers,
            requests: all,
            latency: LatencyModel::Synchronous,
            tie_policy: TiePolicy::LowestId,
            seed: 0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_tie_policy(mut self, tie_policy: TiePolicy) -> Self {
        self.tie_policy = tie_policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let k = self.servers.len();
        if k == 0 {
            return Err(SimError::Scenario("at least one server is required".into()));
        }
        let mut ids = BTreeSet::new();
        let mut seen_servers = BTreeSet::new();
        for (i, r) in self.requests.iter().enumerate() {
            if !ids.insert(r.id) {
                return Err(SimError::Scenario(format!("duplicate request id {}", r.id)));
            }
            if !self.hst.is_leaf(r.node) {
                return Err(SimError::Scenario(format!("request {} is at non-leaf node {}", r.id, r.node)));
            }
            if r.time < rational::zero() {
                return Err(SimError::Scenario(format!("request {} has a negative time", r.id)));
            }
            let should_be_dummy = i < k;
            if r.is_dummy != should_be_dummy {
                return Err(SimError::Scenario(format!("request {} has the wrong dummy flag", r.id)));
            }
            if r.is_dummy {
                if r.id != i as RequestId || r.node != self.servers[i] || r.time != rational::zero() {
                    return Err(SimError::Scenario(format!("dummy {} does not match server {}", r.id, i)));
                }
                if !seen_servers.insert(r.node) {
                    return Err(SimError::Scenario(format!("two servers share leaf {}", r.node)));
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.servers.len()
    }

    pub fn dummies(&self) -> &[Request] {
        &self.requests[..self.k()]
    }

    pub fn invoked(&self) -> &[Request] {
        &self.requests[self.k()..]
    }

    pub fn request(&self, id: RequestId) -> Option<&Request> {
        self.requests.iter().find(|r| r.id == id)
    }

    /// All invoked requests arrive at time 0.
    pub fn is_one_shot(&self) -> bool {
        self.invoked().iter().all(|r| r.time == rational::zero())
    }

    pub fn to_json(&self) -> Value {
        let requests: Vec<Value> = self
            .invoked()
            .iter()
            .map(|r| serde_json::json!({"id": r.id, "node": r.node, "time": rational::to_pair(&r.time)}))
            .collect();
        serde_json::json!({
            "hst": self.hst.to_json(),
            "servers": self.servers,
            "requests": requests,
            "latency": self.latency,
            "tie_policy": self.tie_policy,
            "seed": self.seed,
        })
    }

    /// Accepts either an embedded `hst` (nodes are leaf ids) or a `graph`
    /// plus `embed: {alpha, seed}` (nodes are graph node ids).
    pub fn from_json(value: &Value) -> Result<Self, SimError> {
        #[derive(Deserialize)]
        struct EmbedSpec {
            #[serde(with = "rational::pair", default = "default_alpha")]
            alpha: Rational,
            seed: u64,
        }
        fn default_alpha() -> Rational {
            rational::int(2)
        }
        #[derive(Deserialize)]
        struct RequestSpec {
            id: Option<RequestId>,
            node: usize,
            #[serde(with = "rational::opt_pair", default)]
            time: Option<Rational>,
        }
        #[derive(Deserialize)]
        struct Raw {
            hst: Option<Value>,
            graph: Option<Value>,
            embed: Option<EmbedSpec>,
            servers: Vec<usize>,
            #[serde(default)]
            requests: Vec<RequestSpec>,
            #[serde(default = "default_latency")]
            latency: LatencyModel,
            #[serde(default = "default_tie")]
            tie_policy: TiePolicy,
            #[serde(default)]
            seed: u64,
        }
        fn default_latency() -> LatencyModel {
            LatencyModel::Synchronous
        }
        fn default_tie() -> TiePolicy {
            TiePolicy::LowestId
        }
        let raw: Raw = serde_json::from_value(value.clone()).map_err(|e| SimError::Scenario(e.to_string()))?;
        let (hst, map): (Hst, Box<dyn Fn(usize) -> Result<usize, SimError>>) = match (raw.hst, raw.graph) {
            (Some(h), None) => (Hst::from_json(&h).map_err(|e| SimError::Scenario(e.to_string()))?, Box::new(Ok)),
            (None, Some(g)) => {
                let g = WeightedGraph::from_json(&g).map_err(|e| SimError::Scenario(e.to_string()))?;
                let g = normalize_weights(&g).map_err(|e| SimError::Scenario(e.to_string()))?;
                let embed = raw.embed.ok_or_else(|| SimError::Scenario("graph input needs an embed block".into()))?;
                let hst = embed_frt(&metric_closure(&g), embed.alpha, embed.seed)
                    .map_err(|e| SimError::Scenario(e.to_string()))?;
                let n = g.node_count();
                let h2 = hst.clone();
                let f = move |p: usize| {
                    if p < n {
                        Ok(h2.leaf_of_point(p))
                    } else {
                        Err(SimError::Scenario(format!("graph node {p} out of range")))
                    }
                };
                (hst, Box::new(f))
            }
            _ => return Err(SimError::Scenario("give exactly one of hst or graph".into())),
        };
        let servers = raw.servers.iter().map(|&p| map(p)).collect::<Result<Vec<_>, _>>()?;
        let k = servers.len() as RequestId;
        let mut next_id = k;
        let mut requests = Vec::new();
        for spec in raw.requests {
            let id = spec.id.unwrap_or(next_id);
            next_id = next_id.max(id + 1);
            if id < k {
                return Err(SimError::Scenario(format!("request id {id} collides with a dummy id")));
            }
            requests.push(Request {
                id,
                node: map(spec.node)?,
                time: spec.time.unwrap_or_else(rational::zero),
                is_dummy: false,
            });
        }
        let s = Scenario::with_requests(Arc::new(hst), servers, requests)?
            .with_latency(raw.latency)
            .with_tie_policy(raw.tie_policy)
            .with_seed(raw.seed);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Invoke {
        step: u64,
        #[serde(with = "rational::pair")]
        time: Rational,
        request: RequestId,
        node: usize,
        delta: LinkDelta,
    },
    Send {
        step: u64,
        #[serde(with = "rational::pair")]
        time: Rational,
        msg: MessageId,
        from: usize,
        to: usize,
        #[serde(with = "rational::pair")]
        latency: Rational,
    },
    Receive {
        step: u64,
        #[serde(with = "rational::pair")]
        time: Rational,
        msg: MessageId,
        node: usize,
        from: usize,
    },
    Process {
        step: u64,
        #[serde(with = "rational::pair")]
        time: Rational,
        msg: MessageId,
        node: usize,
        from: usize,
        delta: LinkDelta,
        forwarded_to: Option<usize>,
    },
    Schedule {
        step: u64,
        #[serde(with = "rational::pair")]
        time: Rational,
        pred: RequestId,
        succ: RequestId,
        msg: Option<MessageId>,
    },
}

impl Event {
    pub fn step(&self) -> u64 {
        match self {
            Event::Invoke { step, .. }
            | Event::Send { step, .. }
            | Event::Receive { step, .. }
            | Event::Process { step, .. }
            | Event::Schedule { step, .. } => *step,
        }
    }

    pub fn time(&self) -> Rational {
        match self {
            Event::Invoke { time, .. }
            | Event::Send { time, .. }
            | Event::Receive { time, .. }
            | Event::Process { time, .. }
            | Event::Schedule { time, .. } => *time,
        }
    }
}

/// Everything known about one delivered message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRecord {
    pub id: MessageId,
    /// Request whose invocation sent the message.
    pub origin: RequestId,
    /// Request it was queued behind.
    pub pred: Option<RequestId>,
    pub source_leaf: usize,
    pub dest_leaf: Option<usize>,
    pub hops: Vec<usize>,
    pub hop_latencies: Vec<Rational>,
    pub latency: Rational,
    pub send_time: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub scenario: Scenario,
    pub events: Vec<Event>,
    pub forest: ScheduleForest,
}

impl Trace {
    pub fn messages(&self) -> BTreeMap<MessageId, MessageRecord> {
        let mut out: BTreeMap<MessageId, MessageRecord> = BTreeMap::new();
        for ev in &self.events {
            match ev {
                Event::Send { time, msg, from, to, latency, .. } => {
                    let rec = out.entry(*msg).or_insert_with(|| MessageRecord {
                        id: *msg,
                        origin: *msg,
                        pred: None,
                        source_leaf: *from,
                        dest_leaf: None,
                        hops: vec![*from],
                        hop_latencies: Vec::new(),
                        latency: rational::zero(),
                        send_time: *time,
                    });
                    rec.hops.push(*to);
                    rec.hop_latencies.push(*latency);
                    rec.latency += *latency;
                }
                Event::Schedule { pred, msg: Some(m), .. } => {
                    if let Some(rec) = out.get_mut(m) {
                        rec.pred = Some(*pred);
                        rec.dest_leaf = rec.hops.last().copied();
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Sum of the latencies of all messages that produced a schedule edge.
    pub fn total_cost(&self) -> Rational {
        let msgs = self.messages();
        self.forest
            .edges
            .iter()
            .filter_map(|e| e.msg)
            .map(|m| msgs.get(&m).map_or_else(rational::zero, |r| r.latency))
            .sum()
    }

    /// Latency paid for each schedule edge (0 for local queueing).
    pub fn edge_latency(&self) -> BTreeMap<(RequestId, RequestId), Rational> {
        let msgs = self.messages();
        self.forest
            .edges
            .iter()
            .map(|e| {
                let l = e.msg.and_then(|m| msgs.get(&m)).map_or_else(rational::zero, |r| r.latency);
                ((e.pred, e.succ), l)
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({"scenario": self.scenario.to_json()}).to_string();
        out.push('\n');
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses a stored trace. Errors carry the 1-based line number.
    pub fn from_jsonl(text: &str) -> Result<Trace, TraceIoError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(TraceIoError { line: 1, reason: "empty trace".into() })?;
        let header: Value =
            serde_json::from_str(header).map_err(|e| TraceIoError { line: 1, reason: e.to_string() })?;
        let scenario = header
            .get("scenario")
            .ok_or_else(|| TraceIoError { line: 1, reason: "missing scenario header".into() })
            .and_then(|s| Scenario::from_json(s).map_err(|e| TraceIoError { line: 1, reason: e.to_string() }))?;
        let mut events = Vec::new();
        for (i, line) in lines {
            let ev: Event =
                serde_json::from_str(line).map_err(|e| TraceIoError { line: i + 1, reason: e.to_string() })?;
            events.push(ev);
        }
        let forest = forest_from_events(&scenario, &events);
        Ok(Trace { scenario, events, forest })
    }

    /// One row per schedule edge.
    pub fn summary_csv(&self) -> String {
        let msgs = self.messages();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pred", "succ", "msg", "source_leaf", "dest_leaf", "hops", "latency", "tree_distance"])
            .expect("in-memory csv");
        let node_of: BTreeMap<RequestId, usize> = self.scenario.requests.iter().map(|r| (r.id, r.node)).collect();
        for e in &self.forest.edges {
            let rec = e.msg.and_then(|m| msgs.get(&m));
            let d = self.scenario.hst.leaf_distance(node_of[&e.pred], node_of[&e.succ]);
            w.write_record([
                e.pred.to_string(),
                e.succ.to_string(),
                e.msg.map_or_else(String::new, |m| m.to_string()),
                node_of[&e.succ].to_string(),
                node_of[&e.pred].to_string(),
                rec.map_or(0, |r| r.hops.len().saturating_sub(1)).to_string(),
                rational::display(&rec.map_or_else(rational::zero, |r| r.latency)),
                rational::display(&d),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("trace line {line}: {reason}")]
pub struct TraceIoError {
    pub line: usize,
    pub reason: String,
}

pub fn forest_from_events(scenario: &Scenario, events: &[Event]) -> ScheduleForest {
    let edges = events
        .iter()
        .filter_map(|e| match e {
            Event::Schedule { pred, succ, msg, .. } => Some(ScheduleEdge { pred: *pred, succ: *succ, msg: *msg }),
            _ => None,
        })
        .collect();
    ScheduleForest { edges, heads: scenario.dummies().iter().map(|r| r.id).collect() }
}

fn script_table(scenario: &Scenario) -> Result<BTreeMap<(MessageId, usize, usize), Rational>, SimError> {
    let mut table = BTreeMap::new();
    if let LatencyModel::Scripted { script } = &scenario.latency {
        for (index, e) in script.iter().enumerate() {
            let [u, v] = e.edge;
            if u.max(v) >= scenario.hst.node_count() {
                return Err(SimError::Script { index, reason: format!("edge {u}-{v} has an unknown node") });
            }
            let Some(w) = scenario.hst.edge_weight(u, v) else {
                return Err(SimError::Script { index, reason: format!("{u}-{v} is not a tree edge") });
            };
            if !rational::is_positive(&e.latency) || e.latency > w {
                return Err(SimError::Script {
                    index,
                    reason: format!(
                        "latency {} outside (0, {}]",
                        rational::display(&e.latency),
                        rational::display(&w)
                    ),
                });
            }
            if table.insert((e.msg, u.min(v), u.max(v)), e.latency).is_some() {
                return Err(SimError::Script { index, reason: "duplicate entry".into() });
            }
        }
    }
    Ok(table)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    run_checked(scenario, CheckMode::Off)
}

pub fn run_checked(scenario: &Scenario, mode: CheckMode) -> Result<Trace, SimError> {
    scenario.validate()?;
    let script = script_table(scenario)?;
    let hst = scenario.hst.clone();
    let servers: Vec<(usize, RequestId)> = scenario.dummies().iter().map(|r| (r.node, r.id)).collect();
    let mut state = init_overlay(hst.clone(), &servers)
        .map_err(|source| SimError::Protocol { event_index: 0, source })?;

    let mut latency_rng = rng_for(scenario.seed, 1);
    let mut tie_rng = rng_for(scenario.seed, 2);
    let mut pick_cursor = 0usize;
    let model = scenario.latency.clone();
    let mut latency = |msg: MessageId, a: usize, b: usize| -> Rational {
        let w = hst.edge_weight(a, b).expect("hops follow tree edges");
        match &model {
            LatencyModel::Synchronous => w,
            LatencyModel::RandomFraction { denominator } => {
                let d = (*denominator).max(1) as i128;
                w * rational::frac(latency_rng.gen_range(1..=d), d)
            }
            LatencyModel::Scripted { .. } => script.get(&(msg, a.min(b), a.max(b))).copied().unwrap_or(w),
        }
    };
    let policy = scenario.tie_policy.clone();
    let mut pick = move |m: usize| -> usize {
        match &policy {
            TiePolicy::LowestId => 0,
            TiePolicy::SeededRandom => tie_rng.gen_range(0..m),
            TiePolicy::Scripted { picks } => {
                let p = picks.get(pick_cursor).map_or(0, |&p| p as usize % m);
                pick_cursor += 1;
                p
            }
        }
    };

    let mut invocations: Vec<&Request> = scenario.invoked().iter().collect();
    invocations.sort_by(|a, b| (a.time, a.node, a.id).cmp(&(b.time, b.node, b.id)));
    let mut inv_cursor = 0;
    let mut arrivals: BTreeSet<(Rational, usize, MessageId)> = BTreeSet::new();
    let mut events: Vec<Event> = Vec::new();
    let mut step: u64 = 0;

    let after_step = |state: &OverlayState, events: &[Event], step: u64| -> Result<(), SimError> {
        let due = match mode {
            CheckMode::Off => false,
            CheckMode::Inline => true,
            CheckMode::Sampled(n) => n > 0 && step % n == 0,
        };
        if due {
            let report = check_state(state);
            if !report.passed() {
                return Err(SimError::Invariant { event_index: events.len().saturating_sub(1), report });
            }
        }
        Ok(())
    };

    loop {
        let next_inv = invocations.get(inv_cursor).map(|r| (r.time, r.node));
        let next_arr = arrivals.first().map(|&(t, v, _)| (t, v));
        let key = match (next_inv, next_arr) {
            (None, None) => break,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (Some(a), Some(b)) => a.min(b),
        };
        let (now, node) = key;
        while let Some(r) = invocations.get(inv_cursor).filter(|r| (r.time, r.node) == key) {
            inv_cursor += 1;
            let (outcome, delta) = state
                .on_invoke(r, now, &mut latency)
                .map_err(|source| SimError::Protocol { event_index: events.len(), source })?;
            events.push(Event::Invoke { step, time: now, request: r.id, node, delta });
            match outcome {
                InvokeOutcome::ScheduledLocally { pred } => {
                    events.push(Event::Schedule { step, time: now, pred, succ: r.id, msg: None });
                }
                InvokeOutcome::Emitted { msg, to, latency } => {
                    events.push(Event::Send { step, time: now, msg, from: node, to, latency });
                    arrivals.insert((now + latency, to, msg));
                }
            }
            after_step(&state, &events, step)?;
            step += 1;
        }
        let mut batch: Vec<MessageId> = Vec::new();
        while let Some(&(t, v, m)) = arrivals.first() {
            if (t, v) != key {
                break;
            }
            arrivals.pop_first();
            batch.push(m);
        }
        while !batch.is_empty() {
            let i = if batch.len() > 1 { pick(batch.len()) } else { 0 };
            let msg = batch.remove(i);
            let from = state.in_flight().get(&msg).map(|m| m.from).unwrap_or(usize::MAX);
            events.push(Event::Receive { step, time: now, msg, node, from });
            let mut choose = |c: &[usize]| pick(c.len());
            let (outcome, delta) = state
                .on_receive(node, msg, now, &mut choose, &mut latency)
                .map_err(|source| SimError::Protocol { event_index: events.len(), source })?;
            match outcome {
                ReceiveOutcome::Forwarded { next, latency } => {
                    events.push(Event::Process { step, time: now, msg, node, from, delta, forwarded_to: Some(next) });
                    events.push(Event::Send { step, time: now, msg, from: node, to: next, latency });
                    arrivals.insert((now + latency, next, msg));
                }
                ReceiveOutcome::Scheduled { pred, message } => {
                    events.push(Event::Process { step, time: now, msg, node, from, delta, forwarded_to: None });
                    events.push(Event::Schedule { step, time: now, pred, succ: message.origin, msg: Some(msg) });
                }
            }
            after_step(&state, &events, step)?;
            step += 1;
        }
    }

    let forest = forest_from_events(scenario, &events);
    let missing = scenario.invoked().len().saturating_sub(forest.edges.len());
    if missing > 0 {
        return Err(SimError::Incomplete(missing));
    }
    Ok(Trace { scenario: scenario.clone(), events, forest })
}

/// Builds a script that gives every (message, tree edge) pair a latency.
/// Each hop is, with equal odds, as fast as allowed (`w / denominator`),
/// as slow as allowed (`w`), or a uniform fraction in between.
pub fn adversarial_script(hst: &Hst, messages: &[MessageId], denominator: u32, seed: u64) -> LatencyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = denominator.max(1) as i128;
    let mut script = Vec::new();
    for &msg in messages {
        for v in 1..hst.node_count() {
            let p = hst.parent(v).unwrap();
            let w = hst.parent_edge_weight(v);
            let j = match rng.gen_range(0..3) {
                0 => 1,
                1 => d,
                _ => rng.gen_range(1..=d),
            };
            script.push(ScriptEntry { msg, edge: [p, v], latency: w * rational::frac(j, d) });
        }
    }
    LatencyModel::Scripted { script }
}

/// Scales every hop of a finished trace's messages by `factor` into an
/// explicit script, e.g. to halve all latencies of a synchronous run.
pub fn scaled_script(trace: &Trace, factor: Rational) -> LatencyModel {
    let mut script = Vec::new();
    for rec in trace.messages().values() {
        for (i, pair) in rec.hops.windows(2).enumerate() {
            script.push(ScriptEntry { msg: rec.id, edge: [pair[0], pair[1]], latency: rec.hop_latencies[i] * factor });
        }
    }
    LatencyModel::Scripted { script }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_pair_scenario;
    use crate::hst::build_explicit_hst;
    use crate::rational::{frac, int};

    #[test]
    fn two_pair_synchronous() {
        let s = two_pair_scenario();
        let t = run_checked(&s, CheckMode::Inline).unwrap();
        // ids: dummy 0 at a, 1 at b, 2 at c
        let edges: Vec<(RequestId, RequestId)> = t.forest.edges.iter().map(|e| (e.pred, e.succ)).collect();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
        let msgs = t.messages();
        assert_eq!(msgs[&1].latency, int(2));
        assert_eq!(msgs[&2].latency, int(6));
        assert_eq!(t.total_cost(), int(8));
    }

    #[test]
    fn halved_latencies_halve_the_cost() {
        let s = two_pair_scenario();
        let t = run(&s).unwrap();
        let halved = s.clone().with_latency(scaled_script(&t, frac(1, 2)));
        let t2 = run(&halved).unwrap();
        assert_eq!(t2.total_cost(), int(4));
        assert_eq!(t2.forest, t.forest);
    }

    #[test]
    fn single_leaf_no_requests() {
        let hst = Arc::new(build_explicit_hst(int(2), 0, &[]).unwrap());
        let s = Scenario::new(hst, vec![0], &[]).unwrap();
        let t = run(&s).unwrap();
        assert!(t.forest.edges.is_empty());
        assert_eq!(t.total_cost(), int(0));
    }

    #[test]
    fn script_above_weight_is_rejected() {
        let s = two_pair_scenario().with_latency(LatencyModel::Scripted {
            script: vec![ScriptEntry { msg: 1, edge: [1, 3], latency: int(2) }],
        });
        assert!(matches!(run(&s), Err(SimError::Script { index: 0, .. })));
        let s = two_pair_scenario().with_latency(LatencyModel::Scripted {
            script: vec![ScriptEntry { msg: 1, edge: [2, 3], latency: int(1) }],
        });
        assert!(matches!(run(&s), Err(SimError::Script { index: 0, .. })));
    }

    #[test]
    fn determinism_and_round_trip() {
        let s = two_pair_scenario().with_latency(LatencyModel::RandomFraction { denominator: 16 }).with_seed(42);
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let back = Trace::from_jsonl(&a.to_jsonl()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn corrupted_line_is_reported() {
        let t = run(&two_pair_scenario()).unwrap();
        let mut lines: Vec<String> = t.to_jsonl().lines().map(String::from).collect();
        lines[3] = "{\"event\": \"send\", \"bogus\": 1}".into();
        let err = Trace::from_jsonl(&lines.join("\n")).unwrap_err();
        assert_eq!(err.line, 4);
    }

    #[test]
    fn requests_over_time() {
        let hst = Arc::new(build_explicit_hst(int(2), 2, &[2, 2]).unwrap());
        let s = Scenario::new(hst, vec![2], &[(5, int(0)), (3, int(1)), (6, frac(7, 2)), (5, int(20))]).unwrap();
        assert!(!s.is_one_shot());
        let t = run_checked(&s, CheckMode::Inline).unwrap();
        assert_eq!(t.forest.edges.len(), 4);
        assert_eq!(t.forest.paths().unwrap().len(), 1);
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = two_pair_scenario().with_tie_policy(TiePolicy::Scripted { picks: vec![1, 0, 3] }).with_seed(5);
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn graph_scenario_embeds() {
        let json = serde_json::json!({
            "graph": {"n": 3, "edges": [[0, 1, 1, 1], [1, 2, 2, 1]]},
            "embed": {"alpha": [2, 1], "seed": 3},
            "servers": [0],
            "requests": [{"node": 2}, {"node": 1}],
        });
        let s = Scenario::from_json(&json).unwrap();
        let t = run_checked(&s, CheckMode::Inline).unwrap();
        assert_eq!(t.forest.edges.len(), 2);
    }
}

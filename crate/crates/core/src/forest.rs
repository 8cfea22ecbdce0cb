//! Offline forests over requests: weights, the exact minimum spanning
//! forest with one dummy per tree, the bottom-up locality forest on an HST,
//! the single-edge exchange check, and the structural locality checks.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::graph::Metric;
use crate::hst::Hst;
use crate::protocol::{Request, RequestId};
use crate::rational::{self, Rational};

/// Largest number of non-dummy requests the exhaustive search accepts.
pub const BRUTE_FORCE_LIMIT: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ForestError {
    #[error("instance has {0} non-dummy requests; the exhaustive search takes at most {BRUTE_FORCE_LIMIT}")]
    TooLarge(usize),
    #[error("no dummy request given")]
    NoDummy,
    #[error("edge references unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("edges close a cycle at ({0}, {1})")]
    Cycle(RequestId, RequestId),
    #[error("component containing request {0} holds {1} dummies")]
    DummyCount(RequestId, usize),
    #[error("instance is not one-shot")]
    NotOneShot,
    #[error("request {0} is not at a leaf")]
    NotALeaf(RequestId),
}

/// Distances between request locations.
pub trait Distance {
    fn distance(&self, a: usize, b: usize) -> Rational;
}

impl Distance for Metric {
    fn distance(&self, a: usize, b: usize) -> Rational {
        self.dist(a, b)
    }
}

impl Distance for Hst {
    fn distance(&self, a: usize, b: usize) -> Rational {
        self.leaf_distance(a, b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestForest {
    pub requests: Vec<Request>,
    /// `(pred, succ)` pairs; orientation matters only for the schedule.
    pub edges: Vec<(RequestId, RequestId)>,
    pub heads: Vec<RequestId>,
}

impl RequestForest {
    pub fn new(requests: Vec<Request>, edges: Vec<(RequestId, RequestId)>) -> Self {
        let heads = requests.iter().filter(|r| r.is_dummy).map(|r| r.id).collect();
        RequestForest { requests, edges, heads }
    }

    fn index(&self) -> BTreeMap<RequestId, usize> {
        self.requests.iter().enumerate().map(|(i, r)| (r.id, i)).collect()
    }

    fn union_find(&self, skip: Option<usize>) -> Result<UnionFind<usize>, ForestError> {
        let idx = self.index();
        let mut uf = UnionFind::new(self.requests.len());
        for (i, &(a, b)) in self.edges.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            let ia = *idx.get(&a).ok_or(ForestError::UnknownRequest(a))?;
            let ib = *idx.get(&b).ok_or(ForestError::UnknownRequest(b))?;
            if !uf.union(ia, ib) {
                return Err(ForestError::Cycle(a, b));
            }
        }
        Ok(uf)
    }

    /// Checks the forest spans all requests with exactly one dummy per tree.
    pub fn validate(&self) -> Result<(), ForestError> {
        let uf = self.union_find(None)?;
        let mut dummies: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, r) in self.requests.iter().enumerate() {
            *dummies.entry(uf.find(i)).or_default() += r.is_dummy as usize;
        }
        for (i, r) in self.requests.iter().enumerate() {
            let c = dummies[&uf.find(i)];
            if c != 1 {
                return Err(ForestError::DummyCount(r.id, c));
            }
        }
        Ok(())
    }

    /// Component label (the lowest request index in it) for every request id.
    pub fn components(&self) -> Result<BTreeMap<RequestId, usize>, ForestError> {
        let uf = self.union_find(None)?;
        let mut label: BTreeMap<usize, usize> = BTreeMap::new();
        Ok(self
            .requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let root = uf.find(i);
                let l = *label.entry(root).or_insert(i);
                (r.id, l)
            })
            .collect())
    }

    pub fn to_json(&self, weight: Rational) -> serde_json::Value {
        serde_json::json!({ "edges": self.edges, "weight": rational::to_pair(&weight) })
    }
}

fn location(requests: &[Request]) -> BTreeMap<RequestId, usize> {
    requests.iter().map(|r| (r.id, r.node)).collect()
}

pub fn edge_weight<D: Distance + ?Sized>(requests: &[Request], dist: &D, a: RequestId, b: RequestId) -> Rational {
    let loc = location(requests);
    dist.distance(loc[&a], loc[&b])
}

pub fn forest_weight<D: Distance + ?Sized>(f: &RequestForest, dist: &D) -> Rational {
    let loc = location(&f.requests);
    f.edges.iter().map(|(a, b)| dist.distance(loc[a], loc[b])).sum()
}

/// Exact minimum-weight spanning forest in which every tree holds exactly one
/// dummy, by branch and bound over predecessor assignments. Non-dummies are
/// assigned in id order and candidate predecessors tried in id order, so
/// among equal-weight optima the lexicographically smallest predecessor
/// vector is returned.
pub fn min_k_forest_bruteforce<D: Distance + ?Sized>(
    requests: &[Request],
    dist: &D,
) -> Result<RequestForest, ForestError> {
    let mut all: Vec<Request> = requests.to_vec();
    all.sort_by_key(|r| r.id);
    let m = all.len();
    let dummies: Vec<usize> = (0..m).filter(|&i| all[i].is_dummy).collect();
    let free: Vec<usize> = (0..m).filter(|&i| !all[i].is_dummy).collect();
    if dummies.is_empty() {
        return Err(ForestError::NoDummy);
    }
    if free.len() > BRUTE_FORCE_LIMIT {
        return Err(ForestError::TooLarge(free.len()));
    }
    let d: Vec<Vec<Rational>> =
        (0..m).map(|i| (0..m).map(|j| dist.distance(all[i].node, all[j].node)).collect()).collect();
    let min_in: Vec<Rational> = free
        .iter()
        .map(|&s| (0..m).filter(|&j| j != s).map(|j| d[s][j]).min().unwrap())
        .collect();
    let mut suffix = vec![rational::zero(); free.len() + 1];
    for i in (0..free.len()).rev() {
        suffix[i] = suffix[i + 1] + min_in[i];
    }
    let star: Rational = free.iter().map(|&s| dummies.iter().map(|&z| d[s][z]).min().unwrap()).sum();

    struct Search<'a> {
        d: &'a [Vec<Rational>],
        free: &'a [usize],
        suffix: &'a [Rational],
        is_dummy: Vec<bool>,
        pred: Vec<Option<usize>>,
        upper: Rational,
        best: Option<(Rational, Vec<Option<usize>>)>,
    }
    impl Search<'_> {
        fn closes_cycle(&self, s: usize, p: usize) -> bool {
            let mut x = p;
            loop {
                if x == s {
                    return true;
                }
                if self.is_dummy[x] {
                    return false;
                }
                match self.pred[x] {
                    Some(y) => x = y,
                    None => return false,
                }
            }
        }

        fn go(&mut self, pos: usize, partial: Rational) {
            let lb = partial + self.suffix[pos];
            match &self.best {
                Some((w, _)) if lb >= *w => return,
                None if lb > self.upper => return,
                _ => {}
            }
            if pos == self.free.len() {
                self.best = Some((partial, self.pred.clone()));
                return;
            }
            let s = self.free[pos];
            for p in 0..self.d.len() {
                if p == s || self.closes_cycle(s, p) {
                    continue;
                }
                self.pred[s] = Some(p);
                let w = self.d[s][p];
                self.go(pos + 1, partial + w);
                self.pred[s] = None;
            }
        }
    }

    let mut search = Search {
        d: &d,
        free: &free,
        suffix: &suffix,
        is_dummy: all.iter().map(|r| r.is_dummy).collect(),
        pred: vec![None; m],
        upper: star,
        best: None,
    };
    search.go(0, rational::zero());
    let (_, pred) = search.best.expect("the star forest is always feasible");
    let edges = free.iter().map(|&s| (all[pred[s].unwrap()].id, all[s].id)).collect();
    Ok(RequestForest::new(all, edges))
}

/// Bottom-up forest on an HST. At a leaf the requests form a chain starting
/// at the dummy (if any). At an inner node, trees holding a dummy stay apart;
/// every dummy-free tree from a child is hung on one of them (picked with
/// `tie_seed`), and if the node has none they are chained together. Every
/// new edge joins two different child subtrees, so it weighs the node's
/// diameter.
pub fn build_locality_forest(hst: &Hst, requests: &[Request], tie_seed: u64) -> Result<RequestForest, ForestError> {
    let mut at_leaf: BTreeMap<usize, Vec<&Request>> = BTreeMap::new();
    for r in requests {
        if !hst.is_leaf(r.node) {
            return Err(ForestError::NotALeaf(r.id));
        }
        at_leaf.entry(r.node).or_default().push(r);
    }
    if !requests.iter().any(|r| r.is_dummy) {
        return Err(ForestError::NoDummy);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
    let mut edges = Vec::new();

    struct Tree {
        members: Vec<RequestId>,
        dummy: bool,
    }

    // process nodes in reverse preorder so children precede parents
    let mut parts: Vec<Vec<Tree>> = (0..hst.node_count()).map(|_| Vec::new()).collect();
    for v in (0..hst.node_count()).rev() {
        if hst.is_leaf(v) {
            let Some(list) = at_leaf.get_mut(&v) else { continue };
            list.sort_by_key(|r| (!r.is_dummy, r.id));
            for w in list.windows(2) {
                edges.push((w[0].id, w[1].id));
            }
            parts[v].push(Tree { members: list.iter().map(|r| r.id).collect(), dummy: list[0].is_dummy });
            continue;
        }
        let mut with_dummy = Vec::new();
        let mut without = Vec::new();
        for &c in hst.children(v) {
            for t in std::mem::take(&mut parts[c]) {
                if t.dummy {
                    with_dummy.push(t);
                } else {
                    without.push(t);
                }
            }
        }
        if with_dummy.is_empty() {
            let mut merged: Option<Tree> = None;
            for t in without {
                merged = Some(match merged {
                    None => t,
                    Some(mut acc) => {
                        let a = *acc.members.choose(&mut rng).unwrap();
                        let b = *t.members.choose(&mut rng).unwrap();
                        edges.push((a, b));
                        acc.members.extend(t.members);
                        acc
                    }
                });
            }
            parts[v].extend(merged);
        } else {
            for t in without {
                let host = rng.gen_range(0..with_dummy.len());
                let a = *with_dummy[host].members.choose(&mut rng).unwrap();
                let b = *t.members.choose(&mut rng).unwrap();
                edges.push((a, b));
                with_dummy[host].members.extend(t.members);
            }
            parts[v] = with_dummy;
        }
    }
    Ok(RequestForest::new(requests.to_vec(), edges))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ExchangeVerdict {
    Holds,
    /// Removing `edge` admits the lighter replacement `replacement` with
    /// `lambda * w(replacement) < w(edge)`.
    Counterexample {
        edge: (RequestId, RequestId),
        replacement: (RequestId, RequestId),
        edge_weight: Rational,
        replacement_weight: Rational,
    },
}

/// For every edge, finds the lightest edge that reconnects the dummy-free side
/// after its removal and checks `lambda * w(e*) >= w(e)`.
pub fn verify_exchange_property<D: Distance + ?Sized>(
    f: &RequestForest,
    dist: &D,
    lambda: Rational,
) -> Result<ExchangeVerdict, ForestError> {
    f.validate()?;
    let loc = location(&f.requests);
    for (i, &(a, b)) in f.edges.iter().enumerate() {
        let uf = f.union_find(Some(i))?;
        let idx = f.index();
        let (ia, ib) = (idx[&a], idx[&b]);
        let side_has_dummy =
            |root: usize| f.requests.iter().enumerate().any(|(j, r)| r.is_dummy && uf.find(j) == root);
        let orphan = if side_has_dummy(uf.find(ia)) { uf.find(ib) } else { uf.find(ia) };
        let mut best: Option<(Rational, (RequestId, RequestId))> = None;
        for (x, rx) in f.requests.iter().enumerate() {
            if uf.find(x) != orphan {
                continue;
            }
            for (y, ry) in f.requests.iter().enumerate() {
                if uf.find(y) == orphan {
                    continue;
                }
                let w = dist.distance(loc[&rx.id], loc[&ry.id]);
                let cand = (w, (ry.id, rx.id));
                if best.as_ref().is_none_or(|b| cand < *b) {
                    best = Some(cand);
                }
            }
        }
        let w_e = dist.distance(loc[&a], loc[&b]);
        let (w_star, e_star) = best.expect("the other side always holds a dummy");
        if lambda * w_star < w_e {
            return Ok(ExchangeVerdict::Counterexample {
                edge: (a, b),
                replacement: e_star,
                edge_weight: w_e,
                replacement_weight: w_star,
            });
        }
    }
    Ok(ExchangeVerdict::Holds)
}

/// Weight of the minimum forest; a lower bound on the optimal cost of a
/// one-shot instance.
pub fn opt_lower_bound<D: Distance + ?Sized>(requests: &[Request], dist: &D) -> Result<Rational, ForestError> {
    if requests.iter().any(|r| !r.is_dummy && r.time != rational::zero()) {
        return Err(ForestError::NotOneShot);
    }
    Ok(forest_weight(&min_k_forest_bruteforce(requests, dist)?, dist))
}

/// Violations of the two locality properties, one message per offending
/// subtree: every tree restricted to a subtree must stay connected, and a
/// subtree meeting two or more trees must hold a dummy of each of them.
pub fn locality_violations(hst: &Hst, f: &RequestForest) -> Vec<String> {
    let comp = match f.components() {
        Ok(c) => c,
        Err(e) => return vec![e.to_string()],
    };
    let loc = location(&f.requests);
    let mut out = Vec::new();
    for x in 0..hst.node_count() {
        let inside: BTreeSet<RequestId> =
            f.requests.iter().filter(|r| hst.is_ancestor_or_self(x, r.node)).map(|r| r.id).collect();
        if inside.is_empty() {
            continue;
        }
        let ids: Vec<RequestId> = inside.iter().copied().collect();
        let pos: BTreeMap<RequestId, usize> = ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let mut uf = UnionFind::new(ids.len());
        for (a, b) in &f.edges {
            if let (Some(&i), Some(&j)) = (pos.get(a), pos.get(b)) {
                uf.union(i, j);
            }
        }
        let mut pieces: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (i, r) in ids.iter().enumerate() {
            pieces.entry(comp[r]).or_default().insert(uf.find(i));
        }
        if let Some((c, _)) = pieces.iter().find(|(_, p)| p.len() > 1) {
            out.push(format!("tree {c} splits inside subtree {x}"));
        }
        if pieces.len() >= 2 {
            for &c in pieces.keys() {
                let has = f.requests.iter().any(|r| r.is_dummy && comp[&r.id] == c && inside.contains(&r.id));
                if !has {
                    out.push(format!("subtree {x} meets tree {c} without its dummy"));
                }
            }
        }
        let _ = &loc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_pair_scenario;
    use crate::hst::build_explicit_hst;
    use crate::rational::int;
    use proptest::prelude::*;

    fn req(id: RequestId, node: usize, dummy: bool) -> Request {
        Request { id, node, time: int(0), is_dummy: dummy }
    }

    /// Kruskal on the request graph with all dummies merged into one root.
    fn kruskal_weight<D: Distance>(requests: &[Request], dist: &D) -> Rational {
        let m = requests.len();
        let mut pairs = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                pairs.push((dist.distance(requests[i].node, requests[j].node), i, j));
            }
        }
        pairs.sort();
        let mut uf = UnionFind::new(m);
        let first = requests.iter().position(|r| r.is_dummy).unwrap();
        for i in 0..m {
            if requests[i].is_dummy {
                uf.union(first, i);
            }
        }
        pairs.into_iter().filter(|&(_, i, j)| uf.union(i, j)).map(|(w, _, _)| w).sum()
    }

    #[test]
    fn weight_examples() {
        let s = two_pair_scenario();
        let f = RequestForest::new(s.requests.clone(), vec![]);
        assert_eq!(forest_weight(&f, s.hst.as_ref()), int(0));
        let f = RequestForest::new(s.requests.clone(), vec![(0, 1), (1, 2)]);
        assert_eq!(forest_weight(&f, s.hst.as_ref()), int(8));
        let uniform = Metric::uniform(7);
        assert_eq!(forest_weight(&f, &uniform), int(2));
    }

    #[test]
    fn brute_force_examples() {
        let t = build_explicit_hst(int(2), 1, &[2]).unwrap();
        let reqs = vec![req(0, 1, true), req(1, 2, false)];
        assert_eq!(forest_weight(&min_k_forest_bruteforce(&reqs, &t).unwrap(), &t), int(2));

        let s = two_pair_scenario();
        let f = min_k_forest_bruteforce(&s.requests, s.hst.as_ref()).unwrap();
        // (0, 2) and (1, 2) both weigh 6; the lower predecessor wins
        assert_eq!(f.edges, vec![(0, 1), (0, 2)]);
        assert_eq!(forest_weight(&f, s.hst.as_ref()), int(8));
        assert_eq!(kruskal_weight(&s.requests, s.hst.as_ref()), int(8));
    }

    #[test]
    fn brute_force_limits() {
        let t = build_explicit_hst(int(2), 1, &[2]).unwrap();
        let mut reqs = vec![req(0, 1, true)];
        reqs.extend((1..=13).map(|i| req(i, 2, false)));
        assert_eq!(min_k_forest_bruteforce(&reqs, &t).unwrap_err(), ForestError::TooLarge(13));
        assert_eq!(min_k_forest_bruteforce(&[req(1, 2, false)], &t).unwrap_err(), ForestError::NoDummy);
    }

    #[test]
    fn lower_bound_examples() {
        let s = two_pair_scenario();
        assert_eq!(opt_lower_bound(&s.requests, s.hst.as_ref()).unwrap(), int(8));
        let t = build_explicit_hst(int(2), 1, &[3]).unwrap();
        assert_eq!(opt_lower_bound(&[req(0, 1, true), req(1, 1, false)], &t).unwrap(), int(0));
        let one_each = [req(0, 1, true), req(1, 2, true), req(2, 1, false), req(3, 2, false)];
        assert_eq!(opt_lower_bound(&one_each, &t).unwrap(), int(0));
        let mut late = req(1, 2, false);
        late.time = int(3);
        assert_eq!(opt_lower_bound(&[req(0, 1, true), late], &t).unwrap_err(), ForestError::NotOneShot);
    }

    #[test]
    fn locality_examples() {
        let t = build_explicit_hst(int(2), 1, &[3]).unwrap();
        let reqs = vec![req(0, 1, true), req(1, 1, false), req(2, 1, false)];
        let f = build_locality_forest(&t, &reqs, 0).unwrap();
        assert_eq!(forest_weight(&f, &t), int(0));
        assert_eq!(f.edges, vec![(0, 1), (1, 2)]);

        let s = two_pair_scenario();
        let f = build_locality_forest(&s.hst, &s.requests, 3).unwrap();
        assert_eq!(forest_weight(&f, s.hst.as_ref()), int(8));
        assert!(locality_violations(&s.hst, &f).is_empty());

        // dummies under two root children, one request under the third
        let t = build_explicit_hst(int(2), 2, &[3, 1]).unwrap();
        let reqs = vec![req(0, 2, true), req(1, 4, true), req(2, 6, false)];
        for seed in 0..8 {
            let f = build_locality_forest(&t, &reqs, seed).unwrap();
            assert_eq!(f.edges.len(), 1);
            assert_eq!(forest_weight(&f, &t), int(6));
        }
    }

    #[test]
    fn exchange_examples() {
        let s = two_pair_scenario();
        let min = min_k_forest_bruteforce(&s.requests, s.hst.as_ref()).unwrap();
        assert_eq!(verify_exchange_property(&min, s.hst.as_ref(), int(1)).unwrap(), ExchangeVerdict::Holds);

        let detour = RequestForest::new(s.requests.clone(), vec![(0, 2), (2, 1)]);
        match verify_exchange_property(&detour, s.hst.as_ref(), int(1)).unwrap() {
            ExchangeVerdict::Counterexample { edge, replacement_weight, edge_weight, .. } => {
                assert_eq!(edge, (0, 2));
                assert_eq!(edge_weight, int(6));
                assert_eq!(replacement_weight, int(2));
            }
            v => panic!("expected a counterexample, got {v:?}"),
        }
        assert_eq!(verify_exchange_property(&detour, s.hst.as_ref(), int(3)).unwrap(), ExchangeVerdict::Holds);

        let single = RequestForest::new(s.requests[..2].to_vec(), vec![(0, 1)]);
        assert_eq!(verify_exchange_property(&single, s.hst.as_ref(), int(1)).unwrap(), ExchangeVerdict::Holds);
    }

    #[test]
    fn validation_errors() {
        let reqs = vec![req(0, 1, true), req(1, 2, true), req(2, 3, false)];
        let f = RequestForest::new(reqs.clone(), vec![(0, 2), (2, 1)]);
        assert_eq!(f.validate().unwrap_err(), ForestError::DummyCount(0, 2));
        let f = RequestForest::new(reqs.clone(), vec![(0, 2), (2, 0)]);
        assert_eq!(f.validate().unwrap_err(), ForestError::Cycle(2, 0));
        let f = RequestForest::new(reqs, vec![(0, 9)]);
        assert_eq!(f.validate().unwrap_err(), ForestError::UnknownRequest(9));
    }

    fn arb_instance() -> impl Strategy<Value = (Hst, Vec<Request>)> {
        (1u32..4, prop::collection::vec(1usize..4, 3), any::<u64>()).prop_flat_map(|(depth, b, seed)| {
            let t = build_explicit_hst(int(2), depth, &b[..depth as usize]).unwrap();
            let leaves: Vec<usize> = t.leaves().collect();
            let k_max = leaves.len().min(3);
            (Just(t), Just(leaves), 1..=k_max, prop::collection::vec(any::<prop::sample::Index>(), 0..8), Just(seed))
        })
        .prop_map(|(t, leaves, k, picks, seed)| {
            let mut shuffled = leaves.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut reqs: Vec<Request> = (0..k).map(|i| req(i as RequestId, shuffled[i], true)).collect();
            for (j, p) in picks.iter().enumerate() {
                reqs.push(req((k + j) as RequestId, leaves[p.index(leaves.len())], false));
            }
            (t, reqs)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn brute_force_matches_kruskal((t, reqs) in arb_instance()) {
            let f = min_k_forest_bruteforce(&reqs, &t).unwrap();
            prop_assert!(f.validate().is_ok());
            prop_assert_eq!(forest_weight(&f, &t), kruskal_weight(&reqs, &t));
            prop_assert_eq!(verify_exchange_property(&f, &t, int(1)).unwrap(), ExchangeVerdict::Holds);
        }

        #[test]
        fn locality_forest_is_minimum((t, reqs) in arb_instance(), seed in any::<u64>()) {
            let g = build_locality_forest(&t, &reqs, seed).unwrap();
            prop_assert!(g.validate().is_ok());
            prop_assert!(locality_violations(&t, &g).is_empty());
            let min = min_k_forest_bruteforce(&reqs, &t).unwrap();
            prop_assert_eq!(forest_weight(&g, &t), forest_weight(&min, &t));
        }
    }
}

//! Hierarchically well-separated trees.
//!
//! Nodes are numbered in preorder with the root at 0 and children in
//! ascending id order. Every leaf sits at depth `h`, and an edge from a
//! depth-`j` node to its child weighs `alpha^(h-1-j)`, so the root's edges are
//! the heaviest and leaf edges weigh 1.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use crate::rational::{self, Rational};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HstError {
    #[error("alpha must exceed 1, got {0}")]
    BadAlpha(String),
    #[error("branching list has {got} levels but depth is {depth}")]
    BranchingLength { got: usize, depth: u32 },
    #[error("branching factor at level {0} is zero")]
    ZeroBranching(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("node {0} does not exist")]
    NoSuchNode(usize),
    #[error("leaf {leaf} sits at depth {got}, expected {depth}")]
    RaggedLeaf { leaf: usize, got: u32, depth: u32 },
    #[error("leaf map is not a bijection onto 0..{0}")]
    LeafMap(usize),
    #[error("malformed hst json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hst {
    alpha: Rational,
    depth: u32,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    level: Vec<u32>,
    /// leaf node id -> graph node id
    leaf_map: BTreeMap<usize, usize>,
    /// graph node id -> leaf node id
    point_leaf: Vec<usize>,
    /// weight of the edge leaving a depth-`j` node downward
    down_weight: Vec<Rational>,
    leaf_count: Vec<usize>,
}

impl Hst {
    /// Builds from a children list indexed by node id. Node ids must already be
    /// in preorder with children ascending; `leaf_map` maps leaves to points.
    pub fn from_parts(
        alpha: Rational,
        depth: u32,
        children: Vec<Vec<usize>>,
        leaf_map: BTreeMap<usize, usize>,
    ) -> Result<Self, HstError> {
        if alpha <= rational::one() {
            return Err(HstError::BadAlpha(rational::display(&alpha)));
        }
        let n = children.len();
        if n == 0 {
            return Err(HstError::NoSuchNode(0));
        }
        let mut parent = vec![None; n];
        let mut level = vec![0u32; n];
        // preorder check: walking the tree from the root must visit 0, 1, 2, ...
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![0usize];
        while let Some(v) = stack.pop() {
            order.push(v);
            for &c in children[v].iter().rev() {
                if c >= n || parent[c].is_some() || c == 0 {
                    return Err(HstError::Json(format!("node {c} is not a valid child of {v}")));
                }
                parent[c] = Some(v);
                level[c] = level[v] + 1;
                stack.push(c);
            }
        }
        if order != (0..n).collect::<Vec<_>>() {
            return Err(HstError::Json("node ids are not in preorder".into()));
        }
        for v in 0..n {
            if children[v].is_empty() && level[v] != depth {
                return Err(HstError::RaggedLeaf { leaf: v, got: level[v], depth });
            }
        }
        let leaves: Vec<usize> = (0..n).filter(|&v| children[v].is_empty()).collect();
        let points = leaves.len();
        let mut point_leaf = vec![usize::MAX; points];
        if leaf_map.len() != points {
            return Err(HstError::LeafMap(points));
        }
        for (&leaf, &point) in &leaf_map {
            if leaf >= n || !children[leaf].is_empty() || point >= points || point_leaf[point] != usize::MAX {
                return Err(HstError::LeafMap(points));
            }
            point_leaf[point] = leaf;
        }
        let down_weight = (0..depth).map(|j| rational::pow(alpha, depth - 1 - j)).collect();
        let mut leaf_count = vec![0usize; n];
        for v in (0..n).rev() {
            leaf_count[v] = if children[v].is_empty() {
                1
            } else {
                children[v].iter().map(|&c| leaf_count[c]).sum()
            };
        }
        Ok(Hst { alpha, depth, parent, children, level, leaf_map, point_leaf, down_weight, leaf_count })
    }

    pub fn alpha(&self) -> Rational {
        self.alpha
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn level(&self, v: usize) -> u32 {
        self.level[v]
    }

    /// Distance in hops from `v` down to the leaves.
    pub fn height(&self, v: usize) -> u32 {
        self.depth - self.level[v]
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        v < self.node_count() && self.children[v].is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.leaf_map.keys().copied()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_map.len()
    }

    pub fn leaf_map(&self) -> &BTreeMap<usize, usize> {
        &self.leaf_map
    }

    pub fn leaf_of_point(&self, point: usize) -> usize {
        self.point_leaf[point]
    }

    pub fn point_of_leaf(&self, leaf: usize) -> usize {
        self.leaf_map[&leaf]
    }

    /// Weight of the edge between `v` and its parent.
    pub fn parent_edge_weight(&self, v: usize) -> Rational {
        let lvl = self.level[v];
        assert!(lvl > 0, "the root has no parent edge");
        self.down_weight[(lvl - 1) as usize]
    }

    /// Weight of the tree edge `{u, v}`; `None` if the two are not adjacent.
    pub fn edge_weight(&self, u: usize, v: usize) -> Option<Rational> {
        if self.parent.get(u).copied().flatten() == Some(v) {
            Some(self.parent_edge_weight(u))
        } else if self.parent.get(v).copied().flatten() == Some(u) {
            Some(self.parent_edge_weight(v))
        } else {
            None
        }
    }

    pub fn is_ancestor_or_self(&self, anc: usize, mut v: usize) -> bool {
        while self.level[v] > self.level[anc] {
            v = self.parent[v].expect("non-root has a parent");
        }
        v == anc
    }

    pub fn lca(&self, mut u: usize, mut v: usize) -> usize {
        while self.level[u] > self.level[v] {
            u = self.parent[u].unwrap();
        }
        while self.level[v] > self.level[u] {
            v = self.parent[v].unwrap();
        }
        while u != v {
            u = self.parent[u].unwrap();
            v = self.parent[v].unwrap();
        }
        u
    }

    /// Node sequence of the unique tree path from `u` to `v`, both included.
    pub fn path(&self, u: usize, v: usize) -> Vec<usize> {
        let top = self.lca(u, v);
        let mut up = vec![u];
        let mut x = u;
        while x != top {
            x = self.parent[x].unwrap();
            up.push(x);
        }
        let mut down = Vec::new();
        let mut y = v;
        while y != top {
            down.push(y);
            y = self.parent[y].unwrap();
        }
        up.extend(down.into_iter().rev());
        up
    }

    /// `2 * (1 + alpha + ... + alpha^(height-1))`: the leaf distance through a
    /// common ancestor at the given height.
    pub fn distance_through_height(&self, height: u32) -> Rational {
        let s: Rational = (0..height).map(|i| rational::pow(self.alpha, i)).sum();
        s * rational::int(2)
    }

    /// Tree distance between two leaves.
    pub fn hst_distance(&self, u: usize, v: usize) -> Result<Rational, HstError> {
        for x in [u, v] {
            if x >= self.node_count() {
                return Err(HstError::NoSuchNode(x));
            }
            if !self.is_leaf(x) {
                return Err(HstError::NotALeaf(x));
            }
        }
        Ok(self.leaf_distance(u, v))
    }

    /// Tree distance between two leaves without argument checks.
    pub fn leaf_distance(&self, u: usize, v: usize) -> Rational {
        if u == v {
            return rational::zero();
        }
        self.distance_through_height(self.height(self.lca(u, v)))
    }

    /// Longest leaf-to-leaf distance inside the subtree rooted at `v`.
    pub fn subtree_diameter(&self, v: usize) -> Result<Rational, HstError> {
        if v >= self.node_count() {
            return Err(HstError::NoSuchNode(v));
        }
        // the highest branching node below v determines the diameter
        let mut x = v;
        while self.children[x].len() == 1 {
            x = self.children[x][0];
        }
        if self.children[x].is_empty() {
            return Ok(rational::zero());
        }
        Ok(self.distance_through_height(self.height(x)))
    }

    pub fn subtree_leaf_count(&self, v: usize) -> usize {
        self.leaf_count[v]
    }

    /// Nested-array form of the shape: a leaf is `[]`, an inner node is the
    /// array of its children.
    fn shape_json(&self, v: usize) -> Value {
        Value::Array(self.children[v].iter().map(|&c| self.shape_json(c)).collect())
    }

    pub fn to_json(&self) -> Value {
        let leaf_map: serde_json::Map<String, Value> =
            self.leaf_map.iter().map(|(l, p)| (l.to_string(), Value::from(*p))).collect();
        serde_json::json!({
            "alpha": rational::to_pair(&self.alpha),
            "depth": self.depth,
            "children": self.shape_json(0),
            "leaf_map": leaf_map,
        })
    }

    pub fn from_json(value: &Value) -> Result<Self, HstError> {
        let obj = value.as_object().ok_or_else(|| HstError::Json("expected an object".into()))?;
        let alpha: [i128; 2] = serde_json::from_value(obj.get("alpha").cloned().unwrap_or(Value::Null))
            .map_err(|e| HstError::Json(format!("alpha: {e}")))?;
        let alpha = rational::from_pair(alpha[0], alpha[1]).map_err(HstError::Json)?;
        let depth = obj
            .get("depth")
            .and_then(Value::as_u64)
            .ok_or_else(|| HstError::Json("depth must be a non-negative integer".into()))?
            as u32;
        let shape = obj.get("children").ok_or_else(|| HstError::Json("missing children".into()))?;
        let mut children = Vec::new();
        flatten_shape(shape, &mut children)?;
        let raw_map = obj
            .get("leaf_map")
            .and_then(Value::as_object)
            .ok_or_else(|| HstError::Json("missing leaf_map".into()))?;
        let mut leaf_map = BTreeMap::new();
        for (k, v) in raw_map {
            let leaf: usize = k.parse().map_err(|_| HstError::Json(format!("bad leaf id {k:?}")))?;
            let point = v.as_u64().ok_or_else(|| HstError::Json(format!("bad point for leaf {k}")))?;
            leaf_map.insert(leaf, point as usize);
        }
        Hst::from_parts(alpha, depth, children, leaf_map)
    }
}

fn flatten_shape(shape: &Value, children: &mut Vec<Vec<usize>>) -> Result<usize, HstError> {
    let arr = shape.as_array().ok_or_else(|| HstError::Json("children must be nested arrays".into()))?;
    let id = children.len();
    children.push(Vec::new());
    for sub in arr {
        let c = flatten_shape(sub, children)?;
        children[id].push(c);
    }
    Ok(id)
}

/// Builds a complete HST where every node at level `j` has `branching[j]`
/// children. Leaves map to points `0, 1, ...` in preorder.
pub fn build_explicit_hst(alpha: Rational, depth: u32, branching: &[usize]) -> Result<Hst, HstError> {
    if alpha <= rational::one() {
        return Err(HstError::BadAlpha(rational::display(&alpha)));
    }
    if branching.len() != depth as usize {
        return Err(HstError::BranchingLength { got: branching.len(), depth });
    }
    if let Some(j) = branching.iter().position(|&b| b == 0) {
        return Err(HstError::ZeroBranching(j));
    }
    let mut children = Vec::new();
    build_complete(branching, &mut children);
    Ok(from_shape(alpha, depth, children))
}

fn build_complete(branching: &[usize], children: &mut Vec<Vec<usize>>) -> usize {
    let id = children.len();
    children.push(Vec::new());
    if let Some((&b, rest)) = branching.split_first() {
        for _ in 0..b {
            let c = build_complete(rest, children);
            children[id].push(c);
        }
    }
    id
}

/// Wraps a preorder children list, mapping leaves to points in preorder.
pub fn from_shape(alpha: Rational, depth: u32, children: Vec<Vec<usize>>) -> Hst {
    let leaf_map = (0..children.len())
        .filter(|&v| children[v].is_empty())
        .enumerate()
        .map(|(p, l)| (l, p))
        .collect();
    Hst::from_parts(alpha, depth, children, leaf_map).expect("shape built with uniform leaf depth")
}

/// Builds an HST from nested arrays given as a JSON-like shape, mapping
/// leaves to points in preorder.
pub fn hst_from_shape(alpha: Rational, depth: u32, shape: &Value) -> Result<Hst, HstError> {
    let mut children = Vec::new();
    flatten_shape(shape, &mut children)?;
    let leaf_map = (0..children.len())
        .filter(|&v| children[v].is_empty())
        .enumerate()
        .map(|(p, l)| (l, p))
        .collect();
    Hst::from_parts(alpha, depth, children, leaf_map)
}

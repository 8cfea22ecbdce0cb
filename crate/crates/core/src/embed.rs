//! Randomized tree embedding of a finite metric into an HST.
//!
//! Points are clustered top-down. At height `L` every point joins the ball of
//! the first point (in a random permutation) lying within radius
//! `beta * S_L / alpha`, where `S_L = 1 + alpha + ... + alpha^(L-1)` and `beta`
//! is a random scale in `[1, alpha)`. Two points separated below height `L`
//! sit in a common ball of radius below `S_L`, so their tree distance
//! `2 * S_L` dominates their metric distance. The root height is the least
//! `h` with `S_h >= alpha * diameter`, which puts every point in one ball.
//!
//! Because the metric is normalized (distances at least 1) the balls at
//! height 1 are singletons, so each leaf hangs below a unary node.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Metric;
use crate::hst::{Hst, HstError};
use crate::rational::{self, Rational};

/// Resolution of the random radius scale.
const BETA_STEPS: i128 = 64;

pub fn embed_frt(metric: &Metric, alpha: Rational, seed: u64) -> Result<Hst, HstError> {
    if alpha <= rational::one() {
        return Err(HstError::BadAlpha(rational::display(&alpha)));
    }
    let n = metric.size();
    if n == 1 {
        return Hst::from_parts(alpha, 0, vec![vec![]], BTreeMap::from([(0, 0)]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let beta = rational::one() + (alpha - rational::one()) * rational::frac(rng.gen_range(0..BETA_STEPS), BETA_STEPS);

    let target = alpha * metric.diameter();
    let mut scales = vec![rational::zero()];
    while *scales.last().unwrap() < target {
        let l = scales.len() as u32;
        scales.push(*scales.last().unwrap() + rational::pow(alpha, l - 1));
    }
    let depth = (scales.len() - 1) as u32;

    // center of each point at each height, listed from the root down
    let keys: Vec<Vec<usize>> = (0..n)
        .map(|p| {
            (0..=depth)
                .rev()
                .map(|l| {
                    let radius = beta * scales[l as usize] / alpha;
                    *perm.iter().find(|&&c| metric.dist(p, c) <= radius).expect("a point is within 0 of itself")
                })
                .collect()
        })
        .collect();

    // trie over the center tuples; BTreeMap ordering fixes the preorder
    #[derive(Default)]
    struct Trie {
        next: BTreeMap<usize, Trie>,
        point: Option<usize>,
    }
    let mut trie = Trie::default();
    for (p, key) in keys.iter().enumerate() {
        // the root level shares one center, so skip it
        let mut node = &mut trie;
        for &c in &key[1..] {
            node = node.next.entry(c).or_default();
        }
        node.point = Some(p);
    }
    let mut children = Vec::new();
    let mut leaf_map = BTreeMap::new();
    fn walk(t: &Trie, children: &mut Vec<Vec<usize>>, leaf_map: &mut BTreeMap<usize, usize>) -> usize {
        let id = children.len();
        children.push(Vec::new());
        if let Some(p) = t.point {
            leaf_map.insert(id, p);
        }
        for sub in t.next.values() {
            let c = walk(sub, children, leaf_map);
            children[id].push(c);
        }
        id
    }
    walk(&trie, &mut children, &mut leaf_map);
    Hst::from_parts(alpha, depth, children, leaf_map)
}

/// Smallest and largest ratio `d_T(f(u), f(v)) / d(u, v)` over all distinct
/// pairs.
pub fn stretch_extremes(metric: &Metric, hst: &Hst) -> (Rational, Rational) {
    let n = metric.size();
    let mut lo: Option<Rational> = None;
    let mut hi: Option<Rational> = None;
    for u in 0..n {
        for v in u + 1..n {
            let r = hst.leaf_distance(hst.leaf_of_point(u), hst.leaf_of_point(v)) / metric.dist(u, v);
            lo = Some(lo.map_or(r, |x| x.min(r)));
            hi = Some(hi.map_or(r, |x| x.max(r)));
        }
    }
    (lo.unwrap_or_else(rational::one), hi.unwrap_or_else(rational::one))
}

/// Average of `d_T(f(u), f(v)) / d(u, v)` over all distinct pairs; 1 for a
/// single point.
pub fn mean_stretch(metric: &Metric, hst: &Hst) -> f64 {
    let n = metric.size();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for u in 0..n {
        for v in u + 1..n {
            let r = hst.leaf_distance(hst.leaf_of_point(u), hst.leaf_of_point(v)) / metric.dist(u, v);
            sum += rational::to_f64(&r);
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        sum / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{metric_closure, random_graph, GraphModel};
    use crate::rational::{frac, int};
    use proptest::prelude::*;

    #[test]
    fn single_point() {
        let t = embed_frt(&Metric::uniform(1), int(2), 3).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(t.leaf_count(), 1);
    }

    #[test]
    fn two_points_dominate() {
        for seed in 0..20 {
            let t = embed_frt(&Metric::uniform(2), int(2), seed).unwrap();
            let d = t.hst_distance(t.leaf_of_point(0), t.leaf_of_point(1)).unwrap();
            assert!(d >= int(1));
        }
    }

    #[test]
    fn uniform_metric_gives_constant_distance() {
        // diameter 1: S_h >= 2 needs h = 2; height-1 balls are singletons and
        // the root ball holds everything, so every pair meets at the root
        for seed in 0..10 {
            let m = Metric::uniform(8);
            let t = embed_frt(&m, int(2), seed).unwrap();
            assert_eq!(t.depth(), 2);
            assert_eq!(stretch_extremes(&m, &t), (int(6), int(6)));
            assert_eq!(mean_stretch(&m, &t), 6.0);
        }
    }

    #[test]
    fn rejects_small_alpha() {
        assert!(embed_frt(&Metric::uniform(3), int(1), 0).is_err());
    }

    #[test]
    fn deterministic() {
        let g = random_graph(12, &GraphModel::ErdosRenyi { p: frac(1, 3), max_weight: 10 }, 4);
        let m = metric_closure(&g);
        let a = embed_frt(&m, int(2), 77).unwrap().to_json().to_string();
        let b = embed_frt(&m, int(2), 77).unwrap().to_json().to_string();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn dominates(n in 1usize..16, gseed in any::<u64>(), seed in any::<u64>(), a in 2i128..5) {
            let g = random_graph(n, &GraphModel::ErdosRenyi { p: frac(1, 3), max_weight: 10 }, gseed);
            let m = metric_closure(&g);
            let t = embed_frt(&m, int(a), seed).unwrap();
            prop_assert_eq!(t.leaf_count(), n);
            for u in 0..n {
                for v in 0..n {
                    let d = t.leaf_distance(t.leaf_of_point(u), t.leaf_of_point(v));
                    prop_assert!(d >= m.dist(u, v));
                }
            }
        }
    }
}

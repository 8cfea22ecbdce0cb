//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dsms_core::checker::{check_trace, replay_states, serving_order};
use dsms_core::embed::{embed_frt, mean_stretch, stretch_extremes};
use dsms_core::experiment::{random_hst_instance, run_experiment, ExperimentConfig, HstParams, InputSpec, LatencySpec, OutputSpec};
use dsms_core::fixtures::{deflection_scenario, detour, detour_scenario};
use dsms_core::forest::{build_locality_forest, forest_weight, locality_violations, min_k_forest_bruteforce, RequestForest};
use dsms_core::gaps::analyze;
use dsms_core::graph::{metric_closure, random_graph, GraphModel, Metric};
use dsms_core::protocol::MessageId;
use dsms_core::rational::{self, frac, int, Rational};
use dsms_core::sim::{adversarial_script, run, run_checked, CheckMode, LatencyModel, Scenario, SimError, TiePolicy, Trace};

const INSTANCES: u64 = 500;
const SCRIPTS: u64 = 20;
const OVER_TIME_INSTANCES: u64 = 200;
const OVER_TIME_SCRIPTS: u64 = 5;
const LOCALITY_SEEDS: u64 = 4;
const EMBED_SEEDS: u64 = 200;

fn tie_policies(seed: u64) -> Vec<TiePolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = (0..64).map(|_| rng.gen_range(0..16)).collect();
    vec![TiePolicy::LowestId, TiePolicy::SeededRandom, TiePolicy::Scripted { picks }]
}

/// Violation counter that keeps the first witness.
#[derive(Default, Clone)]
struct Tally {
    checked: u64,
    violations: u64,
    first: Option<String>,
}

impl Tally {
    fn check(&mut self, ok: bool, witness: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.violations += 1;
            if self.first.is_none() {
                self.first = Some(witness());
            }
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        self.checked += other.checked;
        self.violations += other.violations;
        self.first = self.first.or(other.first);
        self
    }

    fn line(&self, what: &str) -> (bool, String) {
        let ok = self.violations == 0 && self.checked > 0;
        let mut s = format!("{what}: {} checks, {} violations", self.checked, self.violations);
        if let Some(w) = &self.first {
            s.push_str(&format!(" (first: {w})"));
        }
        (ok, s)
    }
}

#[derive(Default)]
struct Sweep {
    runs: u64,
    optimality: Tally,
    locality_forest: Tally,
    invariants: Tally,
    analysis: Tally,
    synchronous: Tally,
    max_ratio: Option<Rational>,
    ratio_sum: f64,
}

impl Sweep {
    fn merge(self, o: Sweep) -> Sweep {
        Sweep {
            runs: self.runs + o.runs,
            optimality: self.optimality.merge(o.optimality),
            locality_forest: self.locality_forest.merge(o.locality_forest),
            invariants: self.invariants.merge(o.invariants),
            analysis: self.analysis.merge(o.analysis),
            synchronous: self.synchronous.merge(o.synchronous),
            max_ratio: match (self.max_ratio, o.max_ratio) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
            ratio_sum: self.ratio_sum + o.ratio_sum,
        }
    }
}

/// Runs with inline state checks, then the trace-level checks.
fn checked_run(s: &Scenario, tally: &mut Tally, tag: &str) -> Option<Trace> {
    match run_checked(s, CheckMode::Inline) {
        Ok(t) => {
            let report = check_trace(&t);
            tally.check(report.passed(), || format!("{tag}: {report}"));
            let replay = replay_states(&t, CheckMode::Inline);
            tally.check(replay.passed(), || format!("{tag}: replay {replay}"));
            Some(t)
        }
        Err(e @ SimError::Invariant { .. }) => {
            tally.check(false, || format!("{tag}: {e}"));
            None
        }
        Err(e) => {
            tally.check(false, || format!("{tag}: run failed: {e}"));
            None
        }
    }
}

fn one_shot_instance(seed: u64) -> Sweep {
    let mut sw = Sweep::default();
    let base = random_hst_instance(&HstParams::standard(), seed);
    let hst = base.hst.clone();
    let min = min_k_forest_bruteforce(&base.requests, hst.as_ref()).expect("instance within brute-force limit");
    let w_min = forest_weight(&min, hst.as_ref());

    for tie in 0..LOCALITY_SEEDS {
        let g = build_locality_forest(&hst, &base.requests, seed * 31 + tie).expect("locality forest");
        let w = forest_weight(&g, hst.as_ref());
        sw.locality_forest.check(w == w_min && locality_violations(&hst, &g).is_empty(), || {
            format!("instance {seed}: locality forest {} vs minimum {}", rational::display(&w), rational::display(&w_min))
        });
    }

    let ids: Vec<MessageId> = base.invoked().iter().map(|r| r.id).collect();
    for (p, policy) in tie_policies(seed).into_iter().enumerate() {
        let mut latencies: Vec<LatencyModel> = (0..SCRIPTS)
            .map(|j| adversarial_script(&hst, &ids, [2, 4, 16][j as usize % 3], seed * 1_000 + j))
            .collect();
        latencies.push(LatencyModel::Synchronous);
        for (j, latency) in latencies.into_iter().enumerate() {
            let synchronous = latency == LatencyModel::Synchronous;
            let s = base.clone().with_latency(latency).with_tie_policy(policy.clone());
            let tag = format!("instance {seed} policy {p} script {j}");
            sw.runs += 1;
            let Some(t) = checked_run(&s, &mut sw.invariants, &tag) else { continue };

            let cost = t.total_cost();
            sw.optimality.check(cost <= w_min, || {
                format!("{tag}: cost {} > minimum {}", rational::display(&cost), rational::display(&w_min))
            });
            let r = if w_min == rational::zero() { rational::one() } else { cost / w_min };
            sw.max_ratio = Some(sw.max_ratio.map_or(r, |m| m.max(r)));
            sw.ratio_sum += rational::to_f64(&r);

            match analyze(&t) {
                Ok(a) => {
                    sw.analysis.check(a.report.passed(), || format!("{tag}: {}", a.report));
                    let w_mdf = forest_weight(&a.ledger.result, hst.as_ref());
                    sw.analysis.check(w_mdf == w_min, || {
                        format!("{tag}: modified forest {} vs minimum {}", rational::display(&w_mdf), rational::display(&w_min))
                    });
                }
                Err(e) => sw.analysis.check(false, || format!("{tag}: {e}")),
            }

            if synchronous {
                let exact = t.messages().values().all(|m| {
                    m.dest_leaf.is_some_and(|d| m.latency == hst.leaf_distance(m.source_leaf, d))
                });
                sw.synchronous.check(exact, || format!("{tag}: a message latency differs from its tree distance"));
                let gnn = RequestForest::new(t.scenario.requests.clone(), t.forest.edges.iter().map(|e| (e.pred, e.succ)).collect());
                let w_gnn = forest_weight(&gnn, hst.as_ref());
                sw.synchronous.check(cost == w_gnn, || {
                    format!("{tag}: cost {} vs forest weight {}", rational::display(&cost), rational::display(&w_gnn))
                });
            }
        }
    }
    sw
}

fn over_time_instance(seed: u64) -> Tally {
    let mut tally = Tally::default();
    let params = HstParams { one_shot: false, ..HstParams::standard() };
    let base = random_hst_instance(&params, 90_000 + seed);
    let ids: Vec<MessageId> = base.invoked().iter().map(|r| r.id).collect();
    for (p, policy) in tie_policies(seed).into_iter().enumerate() {
        for j in 0..OVER_TIME_SCRIPTS {
            let latency = adversarial_script(&base.hst, &ids, 8, seed * 100 + j);
            let s = base.clone().with_latency(latency).with_tie_policy(policy.clone());
            checked_run(&s, &mut tally, &format!("over-time instance {seed} policy {p} script {j}"));
        }
    }
    tally
}

fn criterion_5() -> (bool, String) {
    let mut notes = Vec::new();
    let t = run(&deflection_scenario()).expect("deflection scenario runs");
    let order = serving_order(&t);
    let deflection_ok = order == Some(vec![vec![0, 2, 4, 5], vec![1, 3]]);
    notes.push(format!("two-server schedules {:?}", order.unwrap_or_default()));

    let t = run(&detour_scenario()).expect("detour scenario runs");
    let gnn: BTreeSet<(u32, u32)> = t.forest.edges.iter().map(|e| (e.pred, e.succ)).collect();
    use detour::*;
    let expected_gnn = BTreeSet::from([(D1, A), (A, B), (B, D), (D2, C)]);
    let a = analyze(&t).expect("detour trace is one-shot");
    let removed_ok = a.ledger.removed == BTreeSet::from([(A, B), (D2, C)]);
    let added_ok = a.ledger.added == BTreeSet::from([(D1, B), (B, C)]);
    notes.push(format!("detour removed {:?} added {:?}", a.ledger.removed, a.ledger.added));
    let ok = deflection_ok && gnn == expected_gnn && removed_ok && added_ok && a.report.passed();
    (ok, notes.join("; "))
}

fn log2(n: usize) -> f64 {
    (n as f64).log2()
}

/// Least-squares slope of `y` against `x`.
fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn criterion_6() -> (bool, String) {
    let sizes = [8usize, 16, 32];
    let mut dominated = true;
    let mut means = Vec::new();
    for &n in &sizes {
        let metric = Metric::uniform(n);
        let (sum, dom) = (0..EMBED_SEEDS)
            .into_par_iter()
            .map(|seed| {
                let t = embed_frt(&metric, int(2), seed).expect("embedding");
                (mean_stretch(&metric, &t), stretch_extremes(&metric, &t).0 >= rational::one())
            })
            .reduce(|| (0.0, true), |a, b| (a.0 + b.0, a.1 && b.1));
        dominated &= dom;
        means.push(sum / EMBED_SEEDS as f64);
    }
    // domination on non-uniform metrics too
    let model = GraphModel::ErdosRenyi { p: frac(1, 3), max_weight: 9 };
    let graph_dom = (0..EMBED_SEEDS).into_par_iter().all(|seed| {
        let metric = metric_closure(&random_graph(16, &model, seed));
        let t = embed_frt(&metric, int(2), seed).expect("embedding");
        stretch_extremes(&metric, &t).0 >= rational::one()
    });
    let xs: Vec<f64> = sizes.iter().map(|&n| log2(n)).collect();
    let fit = slope(&xs, &means);
    let monotone = means.windows(2).all(|w| w[0] <= w[1] + 1e-9);
    let sublinear = means[2] / means[0] < 32.0 / 8.0;
    let ok = dominated && graph_dom && monotone && sublinear;
    let detail = format!(
        "domination uniform={dominated} random={graph_dom}; mean stretch n=8/16/32: {:.3}/{:.3}/{:.3}; slope per log2 n {:.4}",
        means[0], means[1], means[2], fit
    );
    (ok, detail)
}

fn criterion_7(sweep: &Sweep) -> (bool, String) {
    let max = sweep.max_ratio.unwrap_or_else(rational::one);
    let mean = sweep.ratio_sum / sweep.runs.max(1) as f64;
    let tree_ok = max <= rational::one();
    let mut trend = Vec::new();
    let mut graph_ok = true;
    for n in [8usize, 16, 32] {
        let cfg = ExperimentConfig {
            name: format!("trend-{n}"),
            input: InputSpec::Graph {
                n,
                model: GraphModel::ErdosRenyi { p: frac(1, 4), max_weight: 8 },
                alpha: int(2),
                servers: 2,
                requests: 8,
                one_shot: true,
            },
            latency: LatencySpec::Adversarial { denominator: 4 },
            tie_policy: TiePolicy::SeededRandom,
            repetitions: 50,
            seed: 7,
            check_every: 1,
            output: OutputSpec::default(),
        };
        let r = run_experiment(&cfg).expect("graph experiment");
        graph_ok &= r.summary.violations == 0 && r.summary.mean_graph_ratio.is_some();
        let m = r.summary.mean_graph_ratio.unwrap_or(f64::NAN);
        trend.push(format!("n={n}: mean {:.3} (= {:.3} log2 n), max {:.3}", m, m / log2(n), r.summary.max_graph_ratio.unwrap_or(f64::NAN)));
    }
    let detail = format!(
        "tree-oracle ratio mean {:.4} max {}; graph-level ratio {}",
        mean,
        rational::display(&max),
        trend.join(", ")
    );
    (tree_ok && graph_ok, detail)
}

fn main() -> ExitCode {
    let sweep = (0..INSTANCES).into_par_iter().map(one_shot_instance).reduce(Sweep::default, Sweep::merge);
    let over_time = (0..OVER_TIME_INSTANCES).into_par_iter().map(over_time_instance).reduce(Tally::default, Tally::merge);
    let scale = format!("{INSTANCES} instances, {} runs", sweep.runs);

    let invariants = sweep.invariants.clone().merge(over_time);
    let results: Vec<(u32, (bool, String))> = vec![
        (1, sweep.optimality.line(&format!("cost within minimum forest over {scale}"))),
        (2, sweep.locality_forest.line("locality forest equals minimum forest")),
        (3, invariants.line("state and trace invariants, one-shot and over-time runs")),
        (4, sweep.analysis.line("gap analysis properties on one-shot traces")),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7(&sweep)),
        (8, sweep.synchronous.line("synchronous latency equals tree distance and cost equals forest weight")),
    ];
    let mut all = true;
    for (n, (ok, detail)) in &results {
        all &= ok;
        println!("criterion {n}: {} - {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

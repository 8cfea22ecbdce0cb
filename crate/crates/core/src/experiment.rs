//! Batch experiments: random instances on HSTs or embedded graphs, simulated
//! under a chosen latency and tie regime, compared against forest oracles and
//! aggregated into CSV rows and a JSON summary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checker::check_trace;
use crate::embed::embed_frt;
use crate::forest::{build_locality_forest, forest_weight, min_k_forest_bruteforce, ForestError, BRUTE_FORCE_LIMIT};
use crate::gaps::analyze;
use crate::graph::{metric_closure, random_graph, GraphModel, Metric};
use crate::hst::{from_shape, Hst, HstError};
use crate::protocol::{MessageId, Request};
use crate::rational::{self, Rational};
use crate::sim::{adversarial_script, run_checked, CheckMode, LatencyModel, Scenario, SimError, TiePolicy};

/// Environment variable holding the worker count for parallel sweeps.
pub const WORKERS_ENV: &str = "DSMS_WORKERS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad config: {0}")]
    Config(String),
    #[error("repetition {rep}: {source}")]
    Sim { rep: u64, source: SimError },
    #[error("repetition {rep}: {source}")]
    Forest { rep: u64, source: ForestError },
    #[error(transparent)]
    Hst(#[from] HstError),
    #[error("cannot write {path}: {reason}")]
    Output { path: PathBuf, reason: String },
}

fn default_alpha() -> Rational {
    rational::int(2)
}

fn yes() -> bool {
    true
}

/// Bounds for random HST instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HstParams {
    #[serde(with = "rational::pair", default = "default_alpha")]
    pub alpha: Rational,
    pub max_depth: u32,
    pub max_branching: usize,
    pub max_servers: usize,
    pub max_requests: usize,
    #[serde(default = "yes")]
    pub one_shot: bool,
}

impl HstParams {
    /// α = 2, depth ≤ 4, branching ≤ 3, k ≤ 4, ≤ 12 requests, one-shot.
    pub fn standard() -> Self {
        HstParams {
            alpha: rational::int(2),
            max_depth: 4,
            max_branching: 3,
            max_servers: 4,
            max_requests: 12,
            one_shot: true,
        }
    }
}

/// Random preorder tree of the given depth with `1..=max_branching` children
/// per inner node.
pub fn random_hst(alpha: Rational, depth: u32, max_branching: usize, rng: &mut impl Rng) -> Hst {
    fn grow(level: u32, depth: u32, b: usize, rng: &mut impl Rng, children: &mut Vec<Vec<usize>>) -> usize {
        let id = children.len();
        children.push(Vec::new());
        if level < depth {
            for _ in 0..rng.gen_range(1..=b.max(1)) {
                let c = grow(level + 1, depth, b, rng, children);
                children[id].push(c);
            }
        }
        id
    }
    let mut children = Vec::new();
    grow(0, depth, max_branching, rng, &mut children);
    from_shape(alpha, depth, children)
}

fn request_time(one_shot: bool, rng: &mut impl Rng) -> Rational {
    if one_shot {
        rational::zero()
    } else {
        rational::frac(rng.gen_range(0..=8), 2)
    }
}

/// A random scenario within `params`, deterministic in `seed`. Latency and
/// tie policy are left at their defaults; the scenario seed is `seed`.
pub fn random_hst_instance(params: &HstParams, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=params.max_depth.max(1));
    let hst = random_hst(params.alpha, depth, params.max_branching, &mut rng);
    let mut leaves: Vec<usize> = hst.leaves().collect();
    let k = rng.gen_range(1..=params.max_servers.max(1).min(leaves.len()));
    leaves.shuffle(&mut rng);
    let servers = leaves[..k].to_vec();
    leaves.sort_unstable();
    let m = rng.gen_range(1..=params.max_requests.max(1));
    let reqs: Vec<(usize, Rational)> = (0..m)
        .map(|_| (*leaves.choose(&mut rng).unwrap(), request_time(params.one_shot, &mut rng)))
        .collect();
    Scenario::new(Arc::new(hst), servers, &reqs).expect("generated scenario is valid").with_seed(seed)
}

/// A random graph, its embedding and a scenario on it. Servers sit on
/// distinct points (at most `n`); requests sit on uniform points.
pub fn random_graph_instance(
    n: usize,
    model: &GraphModel,
    alpha: Rational,
    servers: usize,
    requests: usize,
    one_shot: bool,
    seed: u64,
) -> Result<(Metric, Scenario), HstError> {
    let metric = metric_closure(&random_graph(n, model, seed));
    let hst = embed_frt(&metric, alpha, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut points: Vec<usize> = (0..n).collect();
    points.shuffle(&mut rng);
    let k = servers.clamp(1, n);
    let server_leaves = points[..k].iter().map(|&p| hst.leaf_of_point(p)).collect();
    let reqs: Vec<(usize, Rational)> = (0..requests)
        .map(|_| (hst.leaf_of_point(rng.gen_range(0..n)), request_time(one_shot, &mut rng)))
        .collect();
    let scenario = Scenario::new(Arc::new(hst), server_leaves, &reqs)
        .expect("generated scenario is valid")
        .with_seed(seed);
    Ok((metric, scenario))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Fresh random HST instance per repetition.
    Hst(HstParams),
    /// Fresh random graph, embedding and placement per repetition.
    Graph {
        n: usize,
        model: GraphModel,
        #[serde(with = "rational::pair", default = "default_alpha")]
        alpha: Rational,
        servers: usize,
        requests: usize,
        #[serde(default = "yes")]
        one_shot: bool,
    },
    /// One stored scenario, rerun with a fresh seed per repetition.
    ScenarioFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencySpec {
    #[default]
    Synchronous,
    RandomFraction {
        denominator: u32,
    },
    /// A fresh [`adversarial_script`] per repetition.
    Adversarial {
        denominator: u32,
    },
    /// Keep whatever latency model the scenario carries.
    FromScenario,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutputSpec {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

fn default_tie() -> TiePolicy {
    TiePolicy::LowestId
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub input: InputSpec,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default = "default_tie")]
    pub tie_policy: TiePolicy,
    pub repetitions: u64,
    /// Repetition `r` uses seed `seed + r`.
    pub seed: u64,
    /// Overlay invariants are checked every this many steps (0 disables).
    #[serde(default = "one")]
    pub check_every: u64,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    /// Parses a config; relative paths inside it resolve against `base`.
    pub fn from_json(value: &Value, base: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value.clone()).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let InputSpec::ScenarioFile { path } = &mut cfg.input {
            resolve(path);
        }
        if let Some(p) = &mut cfg.output.csv {
            resolve(p);
        }
        if let Some(p) = &mut cfg.output.json {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
        let value: Value = serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Self::from_json(&value, path.parent().unwrap_or(Path::new(".")))
    }
}

/// One repetition's measurements. Rationals are written as `p/q` strings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub rep: u64,
    pub seed: u64,
    pub points: usize,
    pub servers: usize,
    pub requests: usize,
    pub one_shot: bool,
    pub cost: String,
    pub tree_oracle: String,
    pub tree_oracle_kind: &'static str,
    pub tree_ratio: String,
    pub tree_ratio_f64: f64,
    pub graph_oracle: Option<String>,
    pub graph_ratio_f64: Option<f64>,
    pub gaps: Option<usize>,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub rep: u64,
    pub check: String,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub repetitions: u64,
    pub mean_tree_ratio: f64,
    pub max_tree_ratio: String,
    pub mean_graph_ratio: Option<f64>,
    pub max_graph_ratio: Option<f64>,
    pub violations: usize,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub summary: Summary,
    pub rows: Vec<Row>,
}

/// Cost over oracle, with `0 / 0 = 1`.
pub fn ratio(cost: Rational, oracle: Rational) -> Option<Rational> {
    if oracle == rational::zero() {
        (cost == rational::zero()).then(rational::one)
    } else {
        Some(cost / oracle)
    }
}

struct RepOutcome {
    row: Row,
    failures: Vec<Failure>,
    tree_ratio: Rational,
}

fn latency_for(spec: &LatencySpec, scenario: &Scenario, seed: u64) -> LatencyModel {
    match spec {
        LatencySpec::Synchronous => LatencyModel::Synchronous,
        LatencySpec::RandomFraction { denominator } => LatencyModel::RandomFraction { denominator: *denominator },
        LatencySpec::Adversarial { denominator } => {
            let ids: Vec<MessageId> = scenario.invoked().iter().map(|r| r.id).collect();
            adversarial_script(&scenario.hst, &ids, *denominator, seed)
        }
        LatencySpec::FromScenario => scenario.latency.clone(),
    }
}

fn run_rep(cfg: &ExperimentConfig, stored: Option<&Scenario>, rep: u64) -> Result<RepOutcome, ExperimentError> {
    let seed = cfg.seed.wrapping_add(rep);
    let (metric, base) = match (&cfg.input, stored) {
        (InputSpec::Hst(p), _) => (None, random_hst_instance(p, seed)),
        (InputSpec::Graph { n, model, alpha, servers, requests, one_shot }, _) => {
            if *n == 0 {
                return Err(ExperimentError::Config("graph needs at least one node".into()));
            }
            let (m, s) = random_graph_instance(*n, model, *alpha, *servers, *requests, *one_shot, seed)?;
            (Some(m), s)
        }
        (InputSpec::ScenarioFile { .. }, Some(s)) => (None, s.clone().with_seed(seed)),
        (InputSpec::ScenarioFile { path }, None) => {
            return Err(ExperimentError::Config(format!("scenario {} not loaded", path.display())))
        }
    };
    let latency = latency_for(&cfg.latency, &base, seed);
    let scenario = base.with_latency(latency).with_tie_policy(cfg.tie_policy.clone());
    let mode = if cfg.check_every == 0 { CheckMode::Off } else { CheckMode::Sampled(cfg.check_every) };

    let mut failures = Vec::new();
    let trace = match run_checked(&scenario, mode) {
        Ok(t) => t,
        Err(SimError::Invariant { event_index, report }) => {
            for v in report.failures() {
                failures.push(Failure {
                    rep,
                    check: v.check.clone(),
                    witness: Some(format!("after event {event_index}: {}", v.witness.as_deref().unwrap_or(""))),
                });
            }
            // rerun unchecked to still report the cost
            run_checked(&scenario, CheckMode::Off).map_err(|source| ExperimentError::Sim { rep, source })?
        }
        Err(source) => return Err(ExperimentError::Sim { rep, source }),
    };
    let mut push = |report: &crate::checker::CheckReport| {
        failures.extend(report.failures().map(|v| Failure { rep, check: v.check.clone(), witness: v.witness.clone() }))
    };
    push(&check_trace(&trace));

    let one_shot = scenario.is_one_shot();
    let mut gaps = None;
    if one_shot {
        let a = analyze(&trace).map_err(|e| ExperimentError::Config(e.to_string()))?;
        gaps = Some(a.ledger.gaps.len());
        push(&a.report);
    }

    let requests: &[Request] = &scenario.requests;
    let small = scenario.invoked().len() <= BRUTE_FORCE_LIMIT;
    let forest_err = |source| ExperimentError::Forest { rep, source };
    let (tree_forest, tree_kind) = if small {
        (min_k_forest_bruteforce(requests, scenario.hst.as_ref()).map_err(forest_err)?, "min_forest")
    } else {
        (build_locality_forest(&scenario.hst, requests, seed).map_err(forest_err)?, "locality_forest")
    };
    let tree_oracle = forest_weight(&tree_forest, scenario.hst.as_ref());
    let cost = trace.total_cost();
    if one_shot && cost > tree_oracle {
        failures.push(Failure {
            rep,
            check: "cost_within_tree_oracle".into(),
            witness: Some(format!("{} > {}", rational::display(&cost), rational::display(&tree_oracle))),
        });
    }
    let tree_ratio = ratio(cost, tree_oracle).unwrap_or_else(rational::one);

    let graph_oracle = match &metric {
        Some(m) if one_shot && small => {
            let points: Vec<Request> = requests
                .iter()
                .map(|r| Request { node: scenario.hst.point_of_leaf(r.node), ..r.clone() })
                .collect();
            Some(forest_weight(&min_k_forest_bruteforce(&points, m).map_err(forest_err)?, m))
        }
        _ => None,
    };
    let graph_ratio = graph_oracle.and_then(|o| ratio(cost, o));

    let row = Row {
        rep,
        seed,
        points: scenario.hst.leaf_count(),
        servers: scenario.k(),
        requests: scenario.invoked().len(),
        one_shot,
        cost: rational::display(&cost),
        tree_oracle: rational::display(&tree_oracle),
        tree_oracle_kind: tree_kind,
        tree_ratio: rational::display(&tree_ratio),
        tree_ratio_f64: rational::to_f64(&tree_ratio),
        graph_oracle: graph_oracle.map(|o| rational::display(&o)),
        graph_ratio_f64: graph_ratio.map(|r| rational::to_f64(&r)),
        gaps,
        violations: failures.len(),
    };
    Ok(RepOutcome { row, failures, tree_ratio })
}

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn load_stored(cfg: &ExperimentConfig) -> Result<Option<Scenario>, ExperimentError> {
    let InputSpec::ScenarioFile { path } = &cfg.input else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
    Scenario::from_json(&value).map(Some).map_err(|source| ExperimentError::Sim { rep: 0, source })
}

/// Runs every repetition (in parallel) and aggregates. Rows come back in
/// repetition order regardless of the worker count.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let stored = load_stored(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| ExperimentError::Config(e.to_string()))?;
    let outcomes: Vec<RepOutcome> = pool.install(|| {
        (0..cfg.repetitions).into_par_iter().map(|rep| run_rep(cfg, stored.as_ref(), rep)).collect::<Result<_, _>>()
    })?;

    let n = outcomes.len().max(1) as f64;
    let mean_tree_ratio = outcomes.iter().map(|o| o.row.tree_ratio_f64).sum::<f64>() / n;
    let max_tree_ratio = outcomes.iter().map(|o| o.tree_ratio).max().unwrap_or_else(rational::one);
    let graph: Vec<f64> = outcomes.iter().filter_map(|o| o.row.graph_ratio_f64).collect();
    let mean_graph_ratio = (!graph.is_empty()).then(|| graph.iter().sum::<f64>() / graph.len() as f64);
    let max_graph_ratio = graph.iter().copied().reduce(f64::max);
    let failures: Vec<Failure> = outcomes.iter().flat_map(|o| o.failures.iter().cloned()).collect();
    let summary = Summary {
        name: cfg.name.clone(),
        repetitions: cfg.repetitions,
        mean_tree_ratio,
        max_tree_ratio: rational::display(&max_tree_ratio),
        mean_graph_ratio,
        max_graph_ratio,
        violations: failures.len(),
        failures,
    };
    Ok(ExperimentReport { summary, rows: outcomes.into_iter().map(|o| o.row).collect() })
}

impl ExperimentReport {
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| ExperimentError::Output { path: PathBuf::from("<csv>"), reason: e.to_string() })?;
        }
        let bytes =
            w.into_inner().map_err(|e| ExperimentError::Output { path: PathBuf::from("<csv>"), reason: e.to_string() })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(&self.summary).expect("summary serializes")
    }

    /// Writes whichever outputs the config names.
    pub fn write(&self, out: &OutputSpec) -> Result<(), ExperimentError> {
        let write = |path: &Path, body: String| {
            std::fs::write(path, body).map_err(|e| ExperimentError::Output { path: path.to_path_buf(), reason: e.to_string() })
        };
        if let Some(p) = &out.csv {
            write(p, self.to_csv()?)?;
        }
        if let Some(p) = &out.json {
            write(p, serde_json::to_string_pretty(&self.to_json()).expect("json serializes") + "\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::int;
    use serde_json::json;

    fn cfg(input: InputSpec, latency: LatencySpec, reps: u64) -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            input,
            latency,
            tie_policy: TiePolicy::LowestId,
            repetitions: reps,
            seed: 11,
            check_every: 1,
            output: OutputSpec::default(),
        }
    }

    #[test]
    fn random_instances_respect_bounds() {
        let p = HstParams::standard();
        for seed in 0..200 {
            let s = random_hst_instance(&p, seed);
            assert!(s.hst.depth() >= 1 && s.hst.depth() <= 4);
            assert!(s.k() >= 1 && s.k() <= 4);
            assert!(!s.invoked().is_empty() && s.invoked().len() <= 12);
            assert!(s.is_one_shot());
            assert_eq!(s, random_hst_instance(&p, seed));
        }
        let over_time = HstParams { one_shot: false, ..p };
        assert!((0..50).any(|seed| !random_hst_instance(&over_time, seed).is_one_shot()));
    }

    #[test]
    fn hst_sweep_ratio_at_most_one() {
        let c = cfg(InputSpec::Hst(HstParams::standard()), LatencySpec::Adversarial { denominator: 4 }, 30);
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.summary.violations, 0, "{:?}", r.summary.failures);
        assert!(r.rows.iter().all(|row| row.tree_ratio_f64 <= 1.0));
        assert_eq!(r.rows.len(), 30);
        assert!(r.rows.iter().enumerate().all(|(i, row)| row.rep == i as u64));
    }

    #[test]
    fn synchronous_sweep_is_exact() {
        let c = cfg(InputSpec::Hst(HstParams::standard()), LatencySpec::Synchronous, 20);
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.summary.violations, 0);
    }

    #[test]
    fn single_point_graph_has_unit_ratio() {
        let input =
            InputSpec::Graph { n: 1, model: GraphModel::CompleteUniform, alpha: int(2), servers: 1, requests: 3, one_shot: true };
        let r = run_experiment(&cfg(input, LatencySpec::Synchronous, 3)).unwrap();
        for row in &r.rows {
            assert_eq!(row.cost, "0");
            assert_eq!(row.tree_ratio, "1");
            assert_eq!(row.graph_ratio_f64, Some(1.0));
        }
    }

    #[test]
    fn graph_sweep_reports_both_ratios() {
        let input =
            InputSpec::Graph { n: 16, model: GraphModel::CompleteUniform, alpha: int(2), servers: 2, requests: 8, one_shot: true };
        let r = run_experiment(&cfg(input, LatencySpec::Synchronous, 10)).unwrap();
        assert_eq!(r.summary.violations, 0);
        assert!(r.summary.mean_graph_ratio.unwrap() >= 1.0);
        assert!(r.summary.mean_tree_ratio <= 1.0);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("rep,seed,points,"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn config_parsing_and_missing_file() {
        let value = json!({
            "name": "x",
            "input": {"kind": "scenario_file", "path": "nope.json"},
            "repetitions": 2,
            "seed": 1,
            "output": {"csv": "out.csv"}
        });
        let c = ExperimentConfig::from_json(&value, Path::new("/tmp/base")).unwrap();
        assert_eq!(c.output.csv, Some(PathBuf::from("/tmp/base/out.csv")));
        assert_eq!(c.latency, LatencySpec::Synchronous);
        assert!(matches!(run_experiment(&c), Err(ExperimentError::Io { .. })));
        assert!(ExperimentConfig::from_json(&json!({"name": "x"}), Path::new(".")).is_err());
    }

    #[test]
    fn repeated_runs_are_identical() {
        let c = cfg(InputSpec::Hst(HstParams::standard()), LatencySpec::RandomFraction { denominator: 3 }, 12);
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.to_json(), b.to_json());
    }
}

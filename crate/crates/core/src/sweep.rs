//! Trade-off sweeps: train one policy per lambda, evaluate everything on a
//! held-out split next to the baselines, extract the Pareto frontier, and
//! pick operating points under a time budget or an error tolerance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::learner::TrainConfig;
use crate::policy::OverheadSpec;
use crate::runtime::{compare_terminal_only, evaluate_dataset, SystemMetrics, TraceEvaluator};
use crate::topology::Topology;
use crate::trace::{LossSpec, TraceDataset};
use crate::trainer::train_bottom_up;

/// Reference time scale the default lambda range is expressed against:
/// pricing one unit of excess error at `MAX_LAMBDA_PER_TERMINAL` terminal
/// evaluations is far past the point where every example runs the full
/// cascade, so the default grid spans cheap-greedy to fully conservative.
const MAX_LAMBDA_PER_TERMINAL: f64 = 0.1 / 0.00286;

/// Default grid: zero plus 29 log-spaced values up to the collapse scale.
pub fn default_lambda_grid(topo: &Topology) -> Vec<f64> {
    let max = MAX_LAMBDA_PER_TERMINAL * topo.stage_cost(topo.terminal());
    let min = max / 1000.0;
    let mut grid = vec![0.0];
    let steps = 29;
    for j in 0..steps {
        let t = j as f64 / (steps - 1) as f64;
        grid.push(min * (max / min).powf(t));
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Explicit lambda grid; omitted means the default grid for the
    /// topology's cost scale.
    #[serde(default)]
    pub lambda_values: Option<Vec<f64>>,
    /// Mean-time budget for operating-point selection.
    #[serde(default)]
    pub budget: Option<f64>,
    /// Excess-error tolerance for operating-point selection.
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fraction of examples used for training; the rest evaluate.
    #[serde(default = "default_split")]
    pub split: f64,
}

fn default_seed() -> u64 {
    17
}

fn default_split() -> f64 {
    0.5
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambda_values: None,
            budget: None,
            tolerance: None,
            seed: default_seed(),
            split: default_split(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(grid) = &self.lambda_values {
            if grid.is_empty() {
                return Err(Error::EmptyLambdaGrid);
            }
            for &l in grid {
                if !(l.is_finite() && l >= 0.0) {
                    return Err(Error::InvalidConfig(format!("lambda {l} out of range")));
                }
            }
        }
        if let Some(b) = self.budget {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidConfig(format!("budget {b} must be positive")));
            }
        }
        if let Some(e) = self.tolerance {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "tolerance {e} must be nonnegative"
                )));
            }
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::FractionOutOfRange(self.split));
        }
        Ok(())
    }

    pub fn grid_for(&self, topo: &Topology) -> Vec<f64> {
        match &self.lambda_values {
            Some(g) => g.clone(),
            None => default_lambda_grid(topo),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| Error::InvalidConfig(format!("bad sweep config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SweepConfig::from_json(&json)
    }
}

/// One trained trade-off point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub policy_digest: String,
    pub train: SystemMetrics,
    pub test: SystemMetrics,
}

/// One baseline row: `tag` names the system ("oracle", "terminal_only",
/// "myopic:<threshold>", "uniform:<p>", "stage:<name>").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tag: String,
    pub metrics: SystemMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub lambda_points: Vec<LambdaPoint>,
    /// Baselines evaluated on the held-out split.
    pub baselines: Vec<CurvePoint>,
    pub terminal_train: SystemMetrics,
    pub terminal_test: SystemMetrics,
    /// Indices into [`SweepResult::pareto_candidates`]: the non-dominated
    /// subset of the trained points plus the terminal-only point.
    pub pareto: Vec<usize>,
}

/// A candidate for frontier extraction and operating-point selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub label: String,
    pub lambda: Option<f64>,
    pub policy_digest: Option<String>,
    pub mean_time: f64,
    pub topk_error: f64,
    pub excess_error: f64,
}

impl SweepResult {
    /// Trained test points in grid order, then the terminal-only system.
    pub fn pareto_candidates(&self) -> Vec<ParetoPoint> {
        let mut points: Vec<ParetoPoint> = self
            .lambda_points
            .iter()
            .map(|p| ParetoPoint {
                label: format!("lambda:{}", p.lambda),
                lambda: Some(p.lambda),
                policy_digest: Some(p.policy_digest.clone()),
                mean_time: p.test.mean_time,
                topk_error: p.test.topk_error,
                excess_error: p.test.excess_error,
            })
            .collect();
        points.push(ParetoPoint {
            label: "terminal_only".into(),
            lambda: None,
            policy_digest: None,
            mean_time: self.terminal_test.mean_time,
            topk_error: self.terminal_test.topk_error,
            excess_error: self.terminal_test.excess_error,
        });
        points
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep result serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| Error::InvalidConfig(format!("bad sweep result: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SweepResult::from_json(&json)
    }
}

/// Splits the data, trains one pruned policy per lambda on the training
/// half, and evaluates each on both halves next to the baselines.
pub fn run_sweep(
    topo: &Topology,
    data: &TraceDataset,
    config: &SweepConfig,
    loss: &LossSpec,
    overheads: &OverheadSpec,
    train_config: &TrainConfig,
) -> Result<SweepResult> {
    config.validate()?;
    overheads.validate(topo)?;
    let (train_half, test_half) = data.split(config.split, config.seed)?;
    let train_eval = TraceEvaluator::new(topo, &train_half);
    let test_eval = TraceEvaluator::new(topo, &test_half);
    let terminal_train = compare_terminal_only(topo, &train_eval, loss)?;
    let terminal_test = compare_terminal_only(topo, &test_eval, loss)?;

    let mut lambda_points = Vec::new();
    for lambda in config.grid_for(topo) {
        let mut policy = train_bottom_up(topo, &train_half, loss, lambda, overheads, train_config)?;
        policy.prune(topo);
        let train = evaluate_dataset(&policy, topo, &train_eval, loss)?;
        let test = evaluate_dataset(&policy, topo, &test_eval, loss)?;
        lambda_points.push(LambdaPoint {
            lambda,
            policy_digest: policy_digest(&policy, topo),
            train,
            test,
        });
    }

    let mut baselines_rows = Vec::new();
    baselines_rows.push(CurvePoint {
        tag: "oracle".into(),
        metrics: baselines::soft_oracle(topo, &test_half, loss, overheads),
    });
    baselines_rows.push(CurvePoint {
        tag: "terminal_only".into(),
        metrics: terminal_test.clone(),
    });
    let quantiles: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut thresholds =
        baselines::entropy_quantiles(&train_half, topo.root(), &quantiles);
    thresholds.dedup();
    for t in thresholds {
        baselines_rows.push(CurvePoint {
            tag: format!("myopic:{t}"),
            metrics: baselines::myopic_threshold(topo, &test_half, loss, t, overheads),
        });
    }
    for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
        baselines_rows.push(CurvePoint {
            tag: format!("uniform:{p}"),
            metrics: baselines::uniform_mix(topo, &test_half, loss, p, config.seed)?,
        });
    }
    for s in topo.stage_ids() {
        baselines_rows.push(CurvePoint {
            tag: format!("stage:{}", topo.name(s)),
            metrics: baselines::single_stage_metrics(topo, &test_half, loss, s),
        });
    }

    let mut result = SweepResult {
        lambda_points,
        baselines: baselines_rows,
        terminal_train,
        terminal_test,
        pareto: Vec::new(),
    };
    let candidates = result.pareto_candidates();
    let pairs: Vec<(f64, f64)> = candidates
        .iter()
        .map(|p| (p.mean_time, p.topk_error))
        .collect();
    result.pareto = pareto_filter(&pairs);
    Ok(result)
}

fn policy_digest(policy: &crate::policy::Policy, topo: &Topology) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(policy.to_json(topo).as_bytes());
    let out = hasher.finalize();
    out[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Indices of the non-dominated (time, error) points, sorted by time.
/// Duplicates keep one representative; a point enters only when it
/// strictly improves the best error seen so far.
pub fn pareto_filter(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .partial_cmp(&points[b])
            .expect("finite coordinates")
    });
    let mut kept = Vec::new();
    let mut best_error = f64::INFINITY;
    for i in order {
        if points[i].1 < best_error {
            best_error = points[i].1;
            kept.push(i);
        }
    }
    kept
}

/// What to optimize for when picking one point off the curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatingTarget {
    /// Lowest error among points with mean_time within the budget.
    Budget(f64),
    /// Lowest mean_time among points with excess_error within tolerance.
    Tolerance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPoint {
    pub label: String,
    pub lambda: Option<f64>,
    pub policy_digest: Option<String>,
    pub mean_time: f64,
    pub topk_error: f64,
    pub excess_error: f64,
    pub speedup: f64,
}

/// Picks the best feasible candidate (trained points plus terminal-only).
pub fn select_operating_point(
    result: &SweepResult,
    target: OperatingTarget,
) -> Result<SelectedPoint> {
    let candidates = result.pareto_candidates();
    let feasible = |p: &ParetoPoint| match target {
        OperatingTarget::Budget(b) => p.mean_time <= b,
        OperatingTarget::Tolerance(e) => p.excess_error <= e,
    };
    let better = |a: &ParetoPoint, b: &ParetoPoint| match target {
        OperatingTarget::Budget(_) => (a.topk_error, a.mean_time) < (b.topk_error, b.mean_time),
        OperatingTarget::Tolerance(_) => (a.mean_time, a.topk_error) < (b.mean_time, b.topk_error),
    };
    if let OperatingTarget::Budget(b) = target {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidConfig(format!("budget {b} must be positive")));
        }
    }
    let mut best: Option<&ParetoPoint> = None;
    for p in &candidates {
        if !feasible(p) {
            continue;
        }
        if best.is_none_or(|cur| better(p, cur)) {
            best = Some(p);
        }
    }
    let chosen = best.ok_or(Error::NoFeasiblePoint)?;
    Ok(SelectedPoint {
        label: chosen.label.clone(),
        lambda: chosen.lambda,
        policy_digest: chosen.policy_digest.clone(),
        mean_time: chosen.mean_time,
        topk_error: chosen.topk_error,
        excess_error: chosen.excess_error,
        speedup: result.terminal_test.mean_time / chosen.mean_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn small_sweep() -> (Topology, SweepResult) {
        let mut cfg = SynthConfig::reference();
        cfg.n = 600;
        let (topo, data) = crate::synth::generate(&cfg).unwrap();
        let loss = LossSpec::topk(cfg.list_len).unwrap();
        let sweep_cfg = SweepConfig {
            lambda_values: Some(vec![0.0, 1.0, 10.0, 100.0]),
            ..SweepConfig::default()
        };
        let result = run_sweep(
            &topo,
            &data,
            &sweep_cfg,
            &loss,
            &OverheadSpec::default_for(&topo),
            &TrainConfig::default(),
        )
        .unwrap();
        (topo, result)
    }

    #[test]
    fn default_grid_starts_at_zero_and_spans_past_collapse() {
        let topo = Topology::complete_dag(
            vec!["a".into(), "g".into(), "r".into()],
            vec![0.25, 0.70, 2.86],
        )
        .unwrap();
        let grid = default_lambda_grid(&topo);
        assert_eq!(grid.len(), 30);
        assert_eq!(grid[0], 0.0);
        assert!((grid[29] - 100.0).abs() < 1e-9);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pareto_filter_drops_dominated_and_duplicate_points() {
        let pts = vec![(1.0, 0.5), (2.0, 0.4), (3.0, 0.45)];
        assert_eq!(pareto_filter(&pts), vec![0, 1]);
        assert_eq!(pareto_filter(&[(1.0, 0.1)]), vec![0]);
        let dup = vec![(1.0, 0.5), (1.0, 0.5)];
        assert_eq!(pareto_filter(&dup), vec![0]);
        // Same time, better error: only the better one survives.
        let tied = vec![(1.0, 0.5), (1.0, 0.4)];
        assert_eq!(pareto_filter(&tied), vec![1]);
    }

    #[test]
    fn pareto_output_is_mutually_non_dominated() {
        let (_, result) = small_sweep();
        let candidates = result.pareto_candidates();
        for &i in &result.pareto {
            for &j in &result.pareto {
                if i == j {
                    continue;
                }
                let (a, b) = (&candidates[i], &candidates[j]);
                let dominates = a.mean_time <= b.mean_time
                    && a.topk_error <= b.topk_error
                    && (a.mean_time < b.mean_time || a.topk_error < b.topk_error);
                assert!(!dominates, "{i} dominates {j}");
            }
        }
    }

    #[test]
    fn sweep_points_respect_no_harm() {
        let (_, result) = small_sweep();
        for p in &result.lambda_points {
            assert!(p.train.mean_time <= result.terminal_train.mean_time);
            assert!(p.test.mean_time <= result.terminal_test.mean_time);
        }
    }

    #[test]
    fn lambda_zero_point_sits_at_the_cheap_extreme() {
        let (topo, result) = small_sweep();
        let p0 = &result.lambda_points[0];
        assert_eq!(p0.lambda, 0.0);
        assert_eq!(p0.test.mean_time, topo.stage_cost(topo.root()));
        assert_eq!(p0.test.exit_fractions["a"], 1.0);
    }

    #[test]
    fn budget_above_terminal_time_always_feasible() {
        let (_, result) = small_sweep();
        let sel = select_operating_point(
            &result,
            OperatingTarget::Budget(result.terminal_test.mean_time + 1.0),
        )
        .unwrap();
        assert!(sel.excess_error <= 1e-12 || sel.topk_error <= result.terminal_test.topk_error);
    }

    #[test]
    fn budget_below_cheapest_stage_is_infeasible() {
        let (_, result) = small_sweep();
        assert!(matches!(
            select_operating_point(&result, OperatingTarget::Budget(0.01)),
            Err(Error::NoFeasiblePoint)
        ));
    }

    #[test]
    fn tolerance_mode_returns_cheapest_feasible() {
        let (_, result) = small_sweep();
        let sel =
            select_operating_point(&result, OperatingTarget::Tolerance(0.015)).unwrap();
        assert!(sel.excess_error <= 0.015);
        for p in result.pareto_candidates() {
            if p.excess_error <= 0.015 {
                assert!(sel.mean_time <= p.mean_time);
            }
        }
    }

    #[test]
    fn sweep_result_round_trips_through_json() {
        let (_, result) = small_sweep();
        let back = SweepResult::from_json(&result.to_json()).unwrap();
        assert_eq!(result, back);
    }

    #[test]
    fn sweep_is_deterministic() {
        let mut cfg = SynthConfig::reference();
        cfg.n = 300;
        let (topo, data) = crate::synth::generate(&cfg).unwrap();
        let loss = LossSpec::topk(cfg.list_len).unwrap();
        let sweep_cfg = SweepConfig {
            lambda_values: Some(vec![0.0, 5.0]),
            ..SweepConfig::default()
        };
        let overheads = OverheadSpec::default_for(&topo);
        let a = run_sweep(&topo, &data, &sweep_cfg, &loss, &overheads, &TrainConfig::default())
            .unwrap();
        let b = run_sweep(&topo, &data, &sweep_cfg, &loss, &overheads, &TrainConfig::default())
            .unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn empty_lambda_grid_is_rejected() {
        let cfg = SweepConfig {
            lambda_values: Some(vec![]),
            ..SweepConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::EmptyLambdaGrid)));
    }
}

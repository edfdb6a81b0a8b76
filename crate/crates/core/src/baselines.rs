//! Reference systems the trained policy is compared against: a clairvoyant
//! per-example router, a single-threshold confidence heuristic, a random
//! mix of the two trivial systems, per-stage standalone points, and an
//! exhaustive threshold search used as a test oracle for node training.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::OverheadSpec;
use crate::runtime::{MetricsBuilder, SystemMetrics};
use crate::topology::{Action, StageId, Topology};
use crate::trace::{LossSpec, TraceDataset};
use crate::trainer::NodeCosts;

/// All root-to-terminal stage sequences the topology admits. Small graphs
/// only; decision DAGs here have a handful of stages.
fn terminal_paths(topo: &Topology) -> Vec<Vec<StageId>> {
    let mut paths = Vec::new();
    let mut current = vec![topo.root()];
    fn walk(topo: &Topology, current: &mut Vec<StageId>, out: &mut Vec<Vec<StageId>>) {
        let s = *current.last().expect("nonempty");
        if topo.is_terminal(s) {
            out.push(current.clone());
            return;
        }
        for a in topo.actions(s) {
            if let Action::ForwardTo(c) = a {
                current.push(*c);
                walk(topo, current, out);
                current.pop();
            }
        }
    }
    walk(topo, &mut current, &mut paths);
    paths
}

/// Per-example best case under the cascade's own rules: the example may
/// exit early on a route only where its prediction is correct and every
/// later stage on that route is correct too, and it pays the same stage
/// costs and gate overheads the adaptive system would pay getting there.
/// Examples with no such exit run to the terminal.
pub fn soft_oracle(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    overheads: &OverheadSpec,
) -> SystemMetrics {
    let paths = terminal_paths(topo);
    // (exit stage, stages paid for, total paid time), cheapest first.
    let mut options: Vec<(StageId, Vec<StageId>, f64, Vec<StageId>)> = Vec::new();
    for path in &paths {
        for (j, &exit) in path.iter().enumerate() {
            let prefix: Vec<StageId> = path[..=j].to_vec();
            let suffix: Vec<StageId> = path[j..].to_vec();
            let mut paid = 0.0;
            for &s in &prefix {
                paid += topo.stage_cost(s);
                if !topo.is_terminal(s) {
                    paid += overheads.linear_overhead(topo, s);
                }
            }
            options.push((exit, prefix, paid, suffix));
        }
    }
    options.sort_by(|a, b| a.2.partial_cmp(&b.2).expect("finite times").then(a.0.cmp(&b.0)));

    let mut builder = MetricsBuilder::new(topo, *loss);
    let terminal = topo.terminal();
    for ex in data.examples() {
        let correct =
            |s: StageId| loss.loss(&ex.record(s).topk, ex.y) == 0.0;
        let chosen = options
            .iter()
            .find(|(exit, _, _, suffix)| {
                if topo.is_terminal(*exit) {
                    return true;
                }
                suffix.iter().all(|&s| correct(s))
            })
            .expect("terminal exit is always an option");
        let (exit, prefix, _, _) = chosen;
        let stage_times: Vec<(StageId, f64)> = prefix
            .iter()
            .map(|&s| {
                let overhead = if topo.is_terminal(s) {
                    0.0
                } else {
                    overheads.linear_overhead(topo, s)
                };
                (s, topo.stage_cost(s) + overhead)
            })
            .collect();
        builder.observe(
            *exit,
            &stage_times,
            &ex.record(*exit).topk,
            &ex.record(terminal).topk,
            ex.y,
        );
    }
    builder.finish()
}

/// Forward whenever the current stage's prediction entropy exceeds the
/// threshold, always to the first listed forward action; exit otherwise.
/// Pays the linear gate overhead at every decision, like a learned system
/// with one hardcoded feature would.
pub fn myopic_threshold(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    threshold: f64,
    overheads: &OverheadSpec,
) -> SystemMetrics {
    let mut builder = MetricsBuilder::new(topo, *loss);
    let terminal = topo.terminal();
    for ex in data.examples() {
        let mut s = topo.root();
        let mut stage_times = Vec::new();
        let exit = loop {
            if topo.is_terminal(s) {
                stage_times.push((s, topo.stage_cost(s)));
                break s;
            }
            let here = topo.stage_cost(s) + overheads.linear_overhead(topo, s);
            stage_times.push((s, here));
            let forward = ex.record(s).entropy > threshold;
            if !forward {
                break s;
            }
            let next = topo
                .actions(s)
                .iter()
                .find_map(Action::forward_target)
                .expect("non-terminal stages forward somewhere");
            s = next;
        };
        builder.observe(
            exit,
            &stage_times,
            &ex.record(exit).topk,
            &ex.record(terminal).topk,
            ex.y,
        );
    }
    builder.finish()
}

/// Routes each example to the full terminal run with probability `p` and
/// to an immediate root exit otherwise. Both legs are constant policies,
/// so no gate overhead is paid.
pub fn uniform_mix(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    p: f64,
    seed: u64,
) -> Result<SystemMetrics> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::POutOfRange(p));
    }
    // Materialize the terminal route once.
    let mut terminal_route = vec![topo.root()];
    while !topo.is_terminal(*terminal_route.last().expect("nonempty")) {
        let s = *terminal_route.last().expect("nonempty");
        terminal_route.push(topo.cheapest_next_hop(s).expect("validated"));
    }
    let root = topo.root();
    if !topo.actions(root).contains(&Action::ExitHere) && !topo.is_terminal(root) {
        return Err(Error::InvalidConfig(format!(
            "stage `{}` has no exit action",
            topo.name(root)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut builder = MetricsBuilder::new(topo, *loss);
    let terminal = topo.terminal();
    for ex in data.examples() {
        let full: bool = rng.gen::<f64>() < p;
        let (exit, stage_times): (StageId, Vec<(StageId, f64)>) = if full {
            (
                terminal,
                terminal_route
                    .iter()
                    .map(|&s| (s, topo.stage_cost(s)))
                    .collect(),
            )
        } else {
            (root, vec![(root, topo.stage_cost(root))])
        };
        builder.observe(
            exit,
            &stage_times,
            &ex.record(exit).topk,
            &ex.record(terminal).topk,
            ex.y,
        );
    }
    Ok(builder.finish())
}

/// Metrics of one stage taken standalone: its cost as the time, its
/// recorded predictions as the output. No routing, no overheads; this is
/// the point a plot marks for "stage X alone".
pub fn single_stage_metrics(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    stage: StageId,
) -> SystemMetrics {
    let mut builder = MetricsBuilder::new(topo, *loss);
    let terminal = topo.terminal();
    for ex in data.examples() {
        builder.observe(
            stage,
            &[(stage, topo.stage_cost(stage))],
            &ex.record(stage).topk,
            &ex.record(terminal).topk,
            ex.y,
        );
    }
    builder.finish()
}

/// Nearest-rank quantiles of one stage's recorded entropies. Quantiles
/// outside [0, 1] are clamped.
pub fn entropy_quantiles(data: &TraceDataset, stage: StageId, qs: &[f64]) -> Vec<f64> {
    let mut values: Vec<f64> = data
        .examples()
        .iter()
        .map(|ex| ex.record(stage).entropy)
        .collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
    qs.iter()
        .map(|&q| {
            let q = q.clamp(0.0, 1.0);
            let idx = ((values.len() as f64 - 1.0) * q).round() as usize;
            values[idx]
        })
        .collect()
}

/// Exhaustive search over threshold rules `forward iff feature > t` at one
/// two-action node, downstream fixed. Returns the grid threshold with the
/// lowest exact routed risk `mean[time + lambda * excess]` and that risk;
/// ties go to the earliest grid entry. The node's own gate overhead is a
/// constant shift and is left out.
pub fn brute_force_threshold(
    costs: &NodeCosts,
    features: &[f64],
    grid: &[f64],
    lambda: f64,
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if features.len() != costs.times.len() {
        return Err(Error::DimensionMismatch {
            expected: costs.times.len(),
            found: features.len(),
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let risk = threshold_risk(costs, features, t, lambda);
        if best.is_none_or(|(_, br)| risk < br) {
            best = Some((t, risk));
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// Routed risk of one threshold rule at a two-action node.
pub fn threshold_risk(costs: &NodeCosts, features: &[f64], threshold: f64, lambda: f64) -> f64 {
    let n = features.len() as f64;
    features
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let action = if f > threshold { 1 } else { 0 };
            costs.cost(i, action, lambda)
        })
        .sum::<f64>()
        / n
}

/// The reduction side of the same search: pick the grid threshold with the
/// lowest importance-weighted disagreement against the pseudo-labels.
/// Ties go to the earliest grid entry.
pub fn weighted_threshold(
    features: &[f64],
    pseudo_labels: &[usize],
    importances: &[f64],
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if features.len() != pseudo_labels.len() || features.len() != importances.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            found: pseudo_labels.len().min(importances.len()),
        });
    }
    let n = features.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let risk = features
            .iter()
            .zip(pseudo_labels)
            .zip(importances)
            .map(|((&f, &b), &c)| {
                let action = usize::from(f > t);
                if action == b {
                    0.0
                } else {
                    c
                }
            })
            .sum::<f64>()
            / n;
        if best.is_none_or(|(_, br)| risk < br) {
            best = Some((t, risk));
        }
    }
    Ok(best.expect("nonempty grid").0)
}

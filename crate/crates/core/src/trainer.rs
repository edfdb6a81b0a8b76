//! Bottom-up policy training. Each decision node is trained after every
//! stage it can forward to, so the cost of any action is fully determined
//! by already-fixed downstream routing. Per-node training reduces the
//! global time/accuracy objective to a weighted classification problem
//! over the node's actions, then keeps whichever function family (fixed
//! action, binary gate, multi-action gate) routes cheapest on average.

use crate::error::{Error, Result};
use crate::learner::{CostProblem, Standardizer, TrainConfig};
use crate::policy::{DecisionModel, NodePolicy, OverheadSpec, Policy};
use crate::topology::{Action, StageId, Topology};
use crate::trace::{LossSpec, TraceDataset};

/// Where one example ends up when entering a stage whose policy is fixed,
/// and how much extra time that takes (the stage's own cost excluded,
/// downstream stage costs and every gate overhead from here on included).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route {
    pub extra_time: f64,
    pub exit_stage: StageId,
}

///// Per-example, per-action decomposition of the routing cost at one node:
/// `cost = time + lambda * excess`.
#[derive(Debug, Clone)]
pub struct NodeCosts {
    /// Future time under each action, excluding this node's own gate.
    pub times: Vec<Vec<f64>>,
    /// Clipped excess loss of the label the example would end up with.
    pub excesses: Vec<Vec<f64>>,
}

impl NodeCosts {
    pub fn cost(&self, example: usize, action: usize, lambda: f64) -> f64 {
        self.times[example][action] + lambda * self.excesses[example][action]
    }

    pub fn cost_row(&self, example: usize, lambda: f64) -> Vec<f64> {
        (0..self.times[example].len())
            .map(|a| self.cost(example, a, lambda))
            .collect()
    }

    /// Risk-optimal action for one example: minimal cost, ties going to
    /// the action with less future time, then to the lower index.
    pub fn best_action(&self, example: usize, lambda: f64) -> usize {
        let row = self.cost_row(example, lambda);
        let times = &self.times[example];
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] < row[best] || (row[a] == row[best] && times[a] < times[best]) {
                best = a;
            }
        }
        best
    }

    /// Binary reduction of a two-action node: pseudo-label is the optimal
    /// action index, importance the cost gap between the two actions.
    pub fn binary_reduction(&self, lambda: f64) -> (Vec<usize>, Vec<f64>) {
        let labels = (0..self.times.len())
            .map(|i| self.best_action(i, lambda))
            .collect();
        let importances = (0..self.times.len())
            .map(|i| (self.cost(i, 0, lambda) - self.cost(i, 1, lambda)).abs())
            .collect();
        (labels, importances)
    }
}

/// Routes every example from every stage whose decision is already fixed.
/// Indexed `[stage][example]`; `None` for stages without a decision yet.
pub fn route_table(
    topo: &Topology,
    data: &TraceDataset,
    policy: &Policy,
) -> Result<Vec<Option<Vec<Route>>>> {
    let mut table: Vec<Option<Vec<Route>>> = vec![None; topo.len()];
    let terminal = topo.terminal();
    table[terminal.0] = Some(vec![
        Route {
            extra_time: 0.0,
            exit_stage: terminal,
        };
        data.len()
    ]);
    // Deepest-first order guarantees children are resolved before parents.
    for s in topo.decision_nodes_bottom_up() {
        let Some(node) = policy.node(s) else { continue };
        let mut routes = Vec::with_capacity(data.len());
        let mut ok = true;
        for i in 0..data.len() {
            let mf = &data.example(i).record(s).mf;
            let idx = node.decide_index(mf);
            let action = topo.actions(s)[idx];
            let route = match action {
                Action::ExitHere => Route {
                    extra_time: node.overhead,
                    exit_stage: s,
                },
                Action::ForwardTo(c) => match &table[c.0] {
                    Some(child) => Route {
                        extra_time: node.overhead + topo.stage_cost(c) + child[i].extra_time,
                        exit_stage: child[i].exit_stage,
                    },
                    None => {
                        ok = false;
                        break;
                    }
                },
            };
            routes.push(route);
        }
        if ok {
            table[s.0] = Some(routes);
        }
    }
    Ok(table)
}

/// Future time and future excess loss for every action at `node`, given a
/// policy that already covers every stage `node` can forward to.
pub fn action_costs(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    policy: &Policy,
    node: StageId,
) -> Result<NodeCosts> {
    let table = route_table(topo, data, policy)?;
    node_costs_from_table(topo, data, loss, node, &table)
}

fn node_costs_from_table(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    node: StageId,
    table: &[Option<Vec<Route>>],
) -> Result<NodeCosts> {
    let actions = topo.actions(node);
    let terminal = topo.terminal();
    for a in actions {
        if let Action::ForwardTo(c) = a {
            if table[c.0].is_none() {
                return Err(Error::UntrainedDownstream(topo.name(*c).to_string()));
            }
        }
    }
    let n = data.len();
    let mut times = Vec::with_capacity(n);
    let mut excesses = Vec::with_capacity(n);
    for i in 0..n {
        let ex = data.example(i);
        let terminal_loss = loss.loss(&ex.record(terminal).topk, ex.y);
        let mut time_row = Vec::with_capacity(actions.len());
        let mut excess_row = Vec::with_capacity(actions.len());
        for a in actions {
            let (t, exit_stage) = match a {
                Action::ExitHere => (0.0, node),
                Action::ForwardTo(c) => {
                    let child = table[c.0].as_ref().expect("checked above");
                    (topo.stage_cost(*c) + child[i].extra_time, child[i].exit_stage)
                }
            };
            let exit_loss = loss.loss(&ex.record(exit_stage).topk, ex.y);
            time_row.push(t);
            excess_row.push((exit_loss - terminal_loss).max(0.0));
        }
        times.push(time_row);
        excesses.push(excess_row);
    }
    Ok(NodeCosts { times, excesses })
}

/// Mean routed cost of a fixed decision rule, before family overhead.
fn mean_routed_cost(costs: &NodeCosts, lambda: f64, choose: impl Fn(usize) -> usize) -> f64 {
    let n = costs.times.len();
    let total: f64 = (0..n).map(|i| costs.cost(i, choose(i), lambda)).sum();
    total / n as f64
}

/// Trains one node and picks the cheapest family. Candidates are every
/// constant action (free to evaluate) and one learned gate (binary for two
/// actions, multi-action otherwise) charged its per-decision overhead.
/// Keeping constants in the pool is what guarantees the trained system
/// never routes worse than the best fixed action.
#[allow(clippy::too_many_arguments)]
pub fn train_node(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    policy: &Policy,
    node: StageId,
    lambda: f64,
    overheads: &OverheadSpec,
    config: &TrainConfig,
) -> Result<NodePolicy> {
    let costs = action_costs(topo, data, loss, policy, node)?;
    train_node_on_costs(topo, data, &costs, node, lambda, overheads, config)
}

fn train_node_on_costs(
    topo: &Topology,
    data: &TraceDataset,
    costs: &NodeCosts,
    node: StageId,
    lambda: f64,
    overheads: &OverheadSpec,
    config: &TrainConfig,
) -> Result<NodePolicy> {
    let n_actions = topo.actions(node).len();
    let mut best: Option<(f64, f64, NodePolicy)> = None;
    let mut consider = |routed: f64, overhead: f64, candidate: NodePolicy| {
        let total = routed + overhead;
        let replaces = match &best {
            None => true,
            Some((bt, bo, _)) => total < *bt || (total == *bt && overhead < *bo),
        };
        if replaces {
            best = Some((total, overhead, candidate));
        }
    };

    for a in 0..n_actions {
        let routed = mean_routed_cost(costs, lambda, |_| a);
        consider(routed, 0.0, NodePolicy::constant(a));
    }

    if n_actions == 1 {
        return Ok(best.expect("at least one constant candidate").2);
    }

    let tau = overheads.linear_overhead(topo, node);
    let features: Vec<Vec<f64>> = (0..data.len())
        .map(|i| data.example(i).record(node).mf.clone())
        .collect();

    if n_actions == 2 {
        let (pseudo, importances) = costs.binary_reduction(lambda);
        let labels: Vec<f64> = pseudo.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect();
        match crate::learner::train_binary(&features, &labels, &importances, config) {
            Ok(model) => {
                let chosen: Vec<usize> = features
                    .iter()
                    .map(|x| if model.score(x) > 0.0 { 1 } else { 0 })
                    .collect();
                let routed = mean_routed_cost(costs, lambda, |i| chosen[i]);
                consider(
                    routed,
                    tau,
                    NodePolicy {
                        model: DecisionModel::LinearBinary(model),
                        overhead: tau,
                    },
                );
            }
            // Both actions cost the same on every example; the constant
            // candidates already cover that case.
            Err(Error::AllZeroImportance) => {}
            Err(e) => return Err(e),
        }
    } else {
        let cost_rows: Vec<Vec<f64>> = (0..data.len())
            .map(|i| costs.cost_row(i, lambda))
            .collect();
        let standardizer = Standardizer::fit(&features)?;
        let problem = CostProblem::new(&features, &cost_rows, &standardizer, config.l2)?;
        let model = problem.solve(config, standardizer);
        let chosen: Vec<usize> = features.iter().map(|x| model.predict(x)).collect();
        let routed = mean_routed_cost(costs, lambda, |i| chosen[i]);
        consider(
            routed,
            tau,
            NodePolicy {
                model: DecisionModel::LinearMulti(model),
                overhead: tau,
            },
        );
    }
    Ok(best.expect("constant candidates always present").2)
}

/// Trains every decision node, deepest first, and returns the full policy.
/// Stages the finished policy can never route to are left in place; call
/// [`Policy::prune`] to drop them.
pub fn train_bottom_up(
    topo: &Topology,
    data: &TraceDataset,
    loss: &LossSpec,
    lambda: f64,
    overheads: &OverheadSpec,
    config: &TrainConfig,
) -> Result<Policy> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} out of range")));
    }
    overheads.validate(topo)?;
    let mut policy = Policy::new(topo, lambda);
    let mut table: Vec<Option<Vec<Route>>> = vec![None; topo.len()];
    let terminal = topo.terminal();
    table[terminal.0] = Some(vec![
        Route {
            extra_time: 0.0,
            exit_stage: terminal,
        };
        data.len()
    ]);
    for s in topo.decision_nodes_bottom_up() {
        let costs = node_costs_from_table(topo, data, loss, s, &table)?;
        let node = train_node_on_costs(topo, data, &costs, s, lambda, overheads, config)?;
        let mut routes = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let mf = &data.example(i).record(s).mf;
            let idx = node.decide_index(mf);
            let route = match topo.actions(s)[idx] {
                Action::ExitHere => Route {
                    extra_time: node.overhead,
                    exit_stage: s,
                },
                Action::ForwardTo(c) => {
                    let child = table[c.0].as_ref().expect("bottom-up order");
                    Route {
                        extra_time: node.overhead + topo.stage_cost(c) + child[i].extra_time,
                        exit_stage: child[i].exit_stage,
                    }
                }
            };
            routes.push(route);
        }
        table[s.0] = Some(routes);
        policy.set_node(s, node);
    }
    Ok(policy)
}

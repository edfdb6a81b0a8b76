//! Executes a trained policy example by example, either over recorded
//! traces or over any other stage backend, and aggregates system metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::Policy;
use crate::topology::{Action, StageId, Topology};
use crate::trace::{LossSpec, TraceDataset};

/// One stage's output for one example, as seen by the router.
pub struct StageObservation<'a> {
    pub topk: &'a [u32],
    pub mf: &'a [f64],
    pub cost: f64,
}

/// Backend the router pulls stage outputs from. The trace-backed
/// implementation below replays recorded runs; a live implementation can
/// wrap real models as long as repeated evaluation of the same
/// (stage, example) pair stays deterministic within a run.
pub trait StageEvaluator {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn id(&self, example: usize) -> &str;
    fn label(&self, example: usize) -> u32;
    fn evaluate(&self, stage: StageId, example: usize) -> Result<StageObservation<'_>>;
}

/// Replays a recorded trace; stage costs come from the topology.
pub struct TraceEvaluator<'a> {
    topo: &'a Topology,
    data: &'a TraceDataset,
}

impl<'a> TraceEvaluator<'a> {
    pub fn new(topo: &'a Topology, data: &'a TraceDataset) -> Self {
        TraceEvaluator { topo, data }
    }
}

impl StageEvaluator for TraceEvaluator<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn id(&self, example: usize) -> &str {
        &self.data.example(example).id
    }

    fn label(&self, example: usize) -> u32 {
        self.data.example(example).y
    }

    fn evaluate(&self, stage: StageId, example: usize) -> Result<StageObservation<'_>> {
        let rec = self.data.example(example).record(stage);
        Ok(StageObservation {
            topk: &rec.topk,
            mf: &rec.mf,
            cost: self.topo.stage_cost(stage),
        })
    }
}

/// Where one example went and what that cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutcome {
    pub example_id: String,
    pub path: Vec<StageId>,
    pub exit_stage: StageId,
    pub predicted_topk: Vec<u32>,
    pub total_time: f64,
    pub loss: f64,
}

/// Aggregate behavior of a routing system over a dataset. Errors use the
/// configured top-k loss except `top1_error`; `excess_error` is the mean
/// per-example hinge against the terminal stage's prediction, while
/// `signed_excess` is the plain error difference and may be negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub n: usize,
    pub mean_time: f64,
    pub top1_error: f64,
    pub topk_error: f64,
    pub excess_error: f64,
    pub signed_excess: f64,
    pub exit_fractions: BTreeMap<String, f64>,
    pub time_shares: BTreeMap<String, f64>,
}

/// Incremental metrics aggregation shared by the policy runtime and the
/// baseline systems.
pub(crate) struct MetricsBuilder<'a> {
    topo: &'a Topology,
    loss: LossSpec,
    stage_time: Vec<f64>,
    exit_count: Vec<f64>,
    n: usize,
    total_time: f64,
    top1_wrong: f64,
    topk_wrong: f64,
    terminal_wrong: f64,
    excess: f64,
}

impl<'a> MetricsBuilder<'a> {
    pub(crate) fn new(topo: &'a Topology, loss: LossSpec) -> Self {
        MetricsBuilder {
            topo,
            loss,
            stage_time: vec![0.0; topo.len()],
            exit_count: vec![0.0; topo.len()],
            n: 0,
            total_time: 0.0,
            top1_wrong: 0.0,
            topk_wrong: 0.0,
            terminal_wrong: 0.0,
            excess: 0.0,
        }
    }

    /// `stage_times` lists every visited stage with the time attributed to
    /// it (its evaluation cost plus any decision overhead charged there).
    pub(crate) fn observe(
        &mut self,
        exit_stage: StageId,
        stage_times: &[(StageId, f64)],
        exit_topk: &[u32],
        terminal_topk: &[u32],
        y: u32,
    ) {
        self.n += 1;
        self.exit_count[exit_stage.0] += 1.0;
        for &(s, t) in stage_times {
            self.stage_time[s.0] += t;
            self.total_time += t;
        }
        let topk_loss = self.loss.loss(exit_topk, y);
        let terminal_loss = self.loss.loss(terminal_topk, y);
        self.top1_wrong += LossSpec::top1().loss(exit_topk, y);
        self.topk_wrong += topk_loss;
        self.terminal_wrong += terminal_loss;
        self.excess += (topk_loss - terminal_loss).max(0.0);
    }

    pub(crate) fn finish(self) -> SystemMetrics {
        let n = self.n as f64;
        let exit_fractions = self
            .topo
            .stage_ids()
            .map(|s| (self.topo.name(s).to_string(), self.exit_count[s.0] / n))
            .collect();
        let time_shares = self
            .topo
            .stage_ids()
            .map(|s| {
                let share = if self.total_time > 0.0 {
                    self.stage_time[s.0] / self.total_time
                } else {
                    0.0
                };
                (self.topo.name(s).to_string(), share)
            })
            .collect();
        SystemMetrics {
            n: self.n,
            mean_time: self.total_time / n,
            top1_error: self.top1_wrong / n,
            topk_error: self.topk_wrong / n,
            excess_error: self.excess / n,
            signed_excess: (self.topk_wrong - self.terminal_wrong) / n,
            exit_fractions,
            time_shares,
        }
    }
}

/// Routes one example from the root: pays each visited stage's cost, pays
/// the decision overhead at each decision node, follows the policy's
/// action, and stops on an exit decision or at the terminal stage.
pub fn route_example<E: StageEvaluator>(
    policy: &Policy,
    topo: &Topology,
    evaluator: &E,
    example: usize,
    loss: &LossSpec,
) -> Result<RoutingOutcome> {
    let (outcome, _) = route_with_attribution(policy, topo, evaluator, example, loss)?;
    Ok(outcome)
}

fn route_with_attribution<E: StageEvaluator>(
    policy: &Policy,
    topo: &Topology,
    evaluator: &E,
    example: usize,
    loss: &LossSpec,
) -> Result<(RoutingOutcome, Vec<(StageId, f64)>)> {
    let mut path = Vec::new();
    let mut stage_times = Vec::new();
    let mut total_time = 0.0;
    let mut s = topo.root();
    loop {
        let obs = evaluator.evaluate(s, example)?;
        path.push(s);
        let mut here = obs.cost;
        if topo.is_terminal(s) {
            total_time += here;
            stage_times.push((s, here));
            let outcome = RoutingOutcome {
                example_id: evaluator.id(example).to_string(),
                path,
                exit_stage: s,
                predicted_topk: obs.topk.to_vec(),
                total_time,
                loss: loss.loss(obs.topk, evaluator.label(example)),
            };
            return Ok((outcome, stage_times));
        }
        let (action, overhead) = policy.decide(topo, s, obs.mf)?;
        here += overhead;
        total_time += here;
        stage_times.push((s, here));
        match action {
            Action::ExitHere => {
                let outcome = RoutingOutcome {
                    example_id: evaluator.id(example).to_string(),
                    path,
                    exit_stage: s,
                    predicted_topk: obs.topk.to_vec(),
                    total_time,
                    loss: loss.loss(obs.topk, evaluator.label(example)),
                };
                return Ok((outcome, stage_times));
            }
            Action::ForwardTo(c) => s = c,
        }
    }
}

/// Routes every example and aggregates. Terminal-stage predictions are
/// looked up in the same pass to price the excess against the terminal.
pub fn evaluate_dataset<E: StageEvaluator>(
    policy: &Policy,
    topo: &Topology,
    evaluator: &E,
    loss: &LossSpec,
) -> Result<SystemMetrics> {
    let mut builder = MetricsBuilder::new(topo, *loss);
    let terminal = topo.terminal();
    for i in 0..evaluator.len() {
        let (outcome, stage_times) = route_with_attribution(policy, topo, evaluator, i, loss)?;
        let terminal_topk = evaluator.evaluate(terminal, i)?.topk.to_vec();
        builder.observe(
            outcome.exit_stage,
            &stage_times,
            &outcome.predicted_topk,
            &terminal_topk,
            evaluator.label(i),
        );
    }
    Ok(builder.finish())
}

/// Metrics of the system that always forwards along the cheapest route to
/// the terminal stage; the speedup denominator everywhere.
pub fn compare_terminal_only<E: StageEvaluator>(
    topo: &Topology,
    evaluator: &E,
    loss: &LossSpec,
) -> Result<SystemMetrics> {
    let policy = Policy::terminal_only(topo);
    evaluate_dataset(&policy, topo, evaluator, loss)
}

//! Trained routing policies: one decision model per non-terminal stage,
//! plus the bookkeeping to persist them and prune unreachable stages.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{argmax_lowest, LinearBinaryModel, LinearMultiModel};
use crate::topology::{Action, StageId, Topology};

/// Decision overheads: evaluating a learned gate costs time, picking a
/// hardwired action does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadSpec {
    /// Overhead charged per decision by linear gates.
    pub linear: f64,
    /// Per-stage overrides of `linear`, keyed by stage name.
    #[serde(default)]
    pub per_node: BTreeMap<String, f64>,
}

impl OverheadSpec {
    pub fn uniform(linear: f64) -> Self {
        OverheadSpec {
            linear,
            per_node: BTreeMap::new(),
        }
    }

    /// Default: a small fraction of the cheapest stage, so gating is never
    /// free but also never rivals an actual stage evaluation.
    pub fn default_for(topo: &Topology) -> Self {
        OverheadSpec::uniform(0.08 * topo.min_stage_cost())
    }

    pub fn linear_overhead(&self, topo: &Topology, s: StageId) -> f64 {
        self.per_node
            .get(topo.name(s))
            .copied()
            .unwrap_or(self.linear)
    }

    pub fn validate(&self, topo: &Topology) -> Result<()> {
        if !(self.linear.is_finite() && self.linear >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "linear gate overhead {} out of range",
                self.linear
            )));
        }
        for (name, &v) in &self.per_node {
            topo.id(name)?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "gate overhead {v} for stage `{name}` out of range"
                )));
            }
        }
        Ok(())
    }
}

/// The function family a node's decision is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum DecisionModel {
    /// Always take the same action; costs nothing to evaluate.
    Constant { action: usize },
    /// Score the meta-features; positive routes to the second action.
    LinearBinary(LinearBinaryModel),
    /// One score per action; highest wins, ties to the lowest index.
    LinearMulti(LinearMultiModel),
}

/// A stage's trained decision plus the per-decision time it charges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePolicy {
    #[serde(flatten)]
    pub model: DecisionModel,
    pub overhead: f64,
}

impl NodePolicy {
    pub fn constant(action: usize) -> Self {
        NodePolicy {
            model: DecisionModel::Constant { action },
            overhead: 0.0,
        }
    }

    /// Index into the node's action list for the given meta-features.
    pub fn decide_index(&self, mf: &[f64]) -> usize {
        match &self.model {
            DecisionModel::Constant { action } => *action,
            DecisionModel::LinearBinary(m) => {
                if m.score(mf) > 0.0 {
                    1
                } else {
                    0
                }
            }
            DecisionModel::LinearMulti(m) => argmax_lowest(&m.scores(mf)),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match &self.model {
            DecisionModel::Constant { .. } => "constant",
            DecisionModel::LinearBinary(_) => "linear_binary",
            DecisionModel::LinearMulti(_) => "linear_multi",
        }
    }

    fn validate(&self, actions: usize, feature_dim: Option<usize>) -> Result<()> {
        if !(self.overhead.is_finite() && self.overhead >= 0.0) {
            return Err(Error::MalformedPolicy(format!(
                "gate overhead {} out of range",
                self.overhead
            )));
        }
        match &self.model {
            DecisionModel::Constant { action } => {
                if *action >= actions {
                    return Err(Error::MalformedPolicy(format!(
                        "constant action {action} out of range for {actions} actions"
                    )));
                }
            }
            DecisionModel::LinearBinary(m) => {
                if actions != 2 {
                    return Err(Error::MalformedPolicy(format!(
                        "binary gate on a node with {actions} actions"
                    )));
                }
                if m.weights.len() != m.standardizer.dim() {
                    return Err(Error::MalformedPolicy(
                        "binary gate weight/standardizer size mismatch".into(),
                    ));
                }
                if let Some(dim) = feature_dim {
                    if m.weights.len() != dim {
                        return Err(Error::MalformedPolicy(format!(
                            "binary gate expects {} features, stage provides {dim}",
                            m.weights.len()
                        )));
                    }
                }
            }
            DecisionModel::LinearMulti(m) => {
                if m.weights.len() != actions || m.biases.len() != actions {
                    return Err(Error::MalformedPolicy(format!(
                        "multi gate scores {} actions, node has {actions}",
                        m.weights.len()
                    )));
                }
                for w in &m.weights {
                    if w.len() != m.standardizer.dim() {
                        return Err(Error::MalformedPolicy(
                            "multi gate weight/standardizer size mismatch".into(),
                        ));
                    }
                    if let Some(dim) = feature_dim {
                        if w.len() != dim {
                            return Err(Error::MalformedPolicy(format!(
                                "multi gate expects {} features, stage provides {dim}",
                                w.len()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Full routing policy for one topology at one trade-off setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub lambda: f64,
    nodes: Vec<Option<NodePolicy>>,
    topology_digest: String,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    lambda: f64,
    topology_digest: String,
    nodes: BTreeMap<String, NodePolicy>,
}

impl Policy {
    pub fn new(topo: &Topology, lambda: f64) -> Self {
        Policy {
            lambda,
            nodes: vec![None; topo.len()],
            topology_digest: topo.digest(),
        }
    }

    /// Always forward along the cheapest route to the terminal stage.
    /// Constant decisions everywhere, so no gate overhead is ever paid.
    pub fn terminal_only(topo: &Topology) -> Self {
        let mut policy = Policy::new(topo, 0.0);
        for s in topo.stage_ids() {
            if topo.is_terminal(s) {
                continue;
            }
            let hop = topo.cheapest_next_hop(s).expect("non-terminal forwards");
            let idx = topo
                .actions(s)
                .iter()
                .position(|a| *a == Action::ForwardTo(hop))
                .expect("cheapest hop is a listed action");
            policy.set_node(s, NodePolicy::constant(idx));
        }
        policy
    }

    /// Exit at the root unconditionally. Errors when the root stage has no
    /// exit action.
    pub fn root_exit(topo: &Topology) -> Result<Self> {
        let root = topo.root();
        let idx = topo
            .actions(root)
            .iter()
            .position(|a| *a == Action::ExitHere)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "stage `{}` has no exit action",
                    topo.name(root)
                ))
            })?;
        let mut policy = Policy::new(topo, 0.0);
        policy.set_node(root, NodePolicy::constant(idx));
        Ok(policy)
    }

    pub fn set_node(&mut self, s: StageId, node: NodePolicy) {
        self.nodes[s.0] = Some(node);
    }

    pub fn node(&self, s: StageId) -> Option<&NodePolicy> {
        self.nodes[s.0].as_ref()
    }

    /// Route one decision: returns the chosen action and the decision
    /// overhead charged for making it.
    pub fn decide(&self, topo: &Topology, s: StageId, mf: &[f64]) -> Result<(Action, f64)> {
        let node = self.nodes[s.0]
            .as_ref()
            .ok_or_else(|| Error::MissingPolicyNode(topo.name(s).to_string()))?;
        let idx = node.decide_index(mf);
        let actions = topo.actions(s);
        if idx >= actions.len() {
            return Err(Error::MalformedPolicy(format!(
                "decision index {idx} out of range at stage `{}`",
                topo.name(s)
            )));
        }
        Ok((actions[idx], node.overhead))
    }

    /// Stages that routing can possibly visit: follows every action a
    /// node's model could choose, treating constants as single edges.
    pub fn reachable_stages(&self, topo: &Topology) -> BTreeSet<StageId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![topo.root()];
        while let Some(s) = stack.pop() {
            if !seen.insert(s) {
                continue;
            }
            if topo.is_terminal(s) {
                continue;
            }
            let actions = topo.actions(s);
            let candidates: Vec<Action> = match self.nodes[s.0].as_ref().map(|n| &n.model) {
                Some(DecisionModel::Constant { action }) => {
                    actions.get(*action).into_iter().copied().collect()
                }
                // A learned gate may pick any listed action depending on
                // the features, so every edge stays live.
                Some(_) | None => actions.to_vec(),
            };
            for a in candidates {
                if let Action::ForwardTo(t) = a {
                    stack.push(t);
                }
            }
        }
        seen
    }

    /// Drop node policies for stages routing can never reach. Returns the
    /// stages whose policies were removed, in stage order.
    pub fn prune(&mut self, topo: &Topology) -> Vec<StageId> {
        let reachable = self.reachable_stages(topo);
        let mut removed = Vec::new();
        for s in topo.stage_ids() {
            if !reachable.contains(&s) && self.nodes[s.0].is_some() {
                self.nodes[s.0] = None;
                removed.push(s);
            }
        }
        removed
    }

    /// Checks the policy is usable on `topo`: digests match, every
    /// reachable decision node has a valid model for its action count.
    pub fn validate(&self, topo: &Topology, feature_dims: Option<&[usize]>) -> Result<()> {
        if self.topology_digest != topo.digest() {
            return Err(Error::TopologyDigestMismatch {
                policy: self.topology_digest.clone(),
                topology: topo.digest(),
            });
        }
        if self.nodes.len() != topo.len() {
            return Err(Error::MalformedPolicy(format!(
                "policy covers {} stages, topology has {}",
                self.nodes.len(),
                topo.len()
            )));
        }
        for s in self.reachable_stages(topo) {
            if topo.is_terminal(s) {
                continue;
            }
            let node = self.nodes[s.0]
                .as_ref()
                .ok_or_else(|| Error::MissingPolicyNode(topo.name(s).to_string()))?;
            let dim = feature_dims.map(|d| d[s.0]);
            node.validate(topo.actions(s).len(), dim)?;
        }
        Ok(())
    }

    pub fn to_json(&self, topo: &Topology) -> String {
        let nodes = topo
            .stage_ids()
            .filter_map(|s| {
                self.nodes[s.0]
                    .as_ref()
                    .map(|n| (topo.name(s).to_string(), n.clone()))
            })
            .collect();
        let file = PolicyFile {
            lambda: self.lambda,
            topology_digest: self.topology_digest.clone(),
            nodes,
        };
        serde_json::to_string_pretty(&file).expect("policy serializes")
    }

    pub fn from_json(json: &str, topo: &Topology) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(json)
            .map_err(|e| Error::MalformedPolicy(format!("bad policy json: {e}")))?;
        let mut nodes = vec![None; topo.len()];
        for (name, node) in file.nodes {
            let s = topo.id(&name)?;
            if topo.is_terminal(s) {
                return Err(Error::MalformedPolicy(format!(
                    "terminal stage `{name}` cannot carry a decision"
                )));
            }
            nodes[s.0] = Some(node);
        }
        let policy = Policy {
            lambda: file.lambda,
            nodes,
            topology_digest: file.topology_digest,
        };
        policy.validate(topo, None)?;
        Ok(policy)
    }

    pub fn save(&self, path: &Path, topo: &Topology) -> Result<()> {
        std::fs::write(path, self.to_json(topo)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, topo: &Topology) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Policy::from_json(&json, topo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::Standardizer;

    fn three_stage() -> Topology {
        Topology::complete_dag(
            vec!["a".into(), "g".into(), "r".into()],
            vec![0.25, 0.70, 2.86],
        )
        .unwrap()
    }

    fn gate(toward_second: f64) -> NodePolicy {
        NodePolicy {
            model: DecisionModel::LinearBinary(LinearBinaryModel {
                weights: vec![toward_second],
                bias: 0.0,
                standardizer: Standardizer::identity(1),
            }),
            overhead: 0.02,
        }
    }

    #[test]
    fn constant_node_charges_no_overhead() {
        let topo = three_stage();
        let mut policy = Policy::new(&topo, 0.0);
        policy.set_node(StageId(0), NodePolicy::constant(0));
        let (action, overhead) = policy.decide(&topo, StageId(0), &[9.9]).unwrap();
        assert_eq!(action, Action::ExitHere);
        assert_eq!(overhead, 0.0);
    }

    #[test]
    fn binary_gate_routes_by_score_sign() {
        let topo = Topology::chain(vec!["a".into(), "t".into()], vec![1.0, 4.0]).unwrap();
        let mut policy = Policy::new(&topo, 0.0);
        policy.set_node(StageId(0), gate(1.0));
        let (fwd, oh) = policy.decide(&topo, StageId(0), &[2.0]).unwrap();
        assert_eq!(fwd, Action::ForwardTo(StageId(1)));
        assert_eq!(oh, 0.02);
        let (stay, _) = policy.decide(&topo, StageId(0), &[-2.0]).unwrap();
        assert_eq!(stay, Action::ExitHere);
        // score exactly zero falls to the first action
        let (tie, _) = policy.decide(&topo, StageId(0), &[0.0]).unwrap();
        assert_eq!(tie, Action::ExitHere);
    }

    #[test]
    fn missing_node_is_an_error() {
        let topo = three_stage();
        let policy = Policy::new(&topo, 0.0);
        assert!(matches!(
            policy.decide(&topo, StageId(0), &[0.0]),
            Err(Error::MissingPolicyNode(_))
        ));
    }

    #[test]
    fn prune_removes_skipped_stage() {
        let topo = three_stage();
        let mut policy = Policy::new(&topo, 0.0);
        // Root always forwards straight to the expensive stage, so the
        // middle stage and its policy are dead weight.
        policy.set_node(StageId(0), NodePolicy::constant(2));
        policy.set_node(StageId(1), NodePolicy::constant(0));
        let removed = policy.prune(&topo);
        assert_eq!(removed, vec![StageId(1)]);
        assert!(policy.node(StageId(1)).is_none());
        assert!(policy.node(StageId(0)).is_some());
    }

    #[test]
    fn gated_root_keeps_every_stage_live() {
        let topo = three_stage();
        let mut policy = Policy::new(&topo, 0.0);
        let m = LinearMultiModel {
            weights: vec![vec![0.0], vec![1.0], vec![-1.0]],
            biases: vec![0.0; 3],
            standardizer: Standardizer::identity(1),
        };
        policy.set_node(
            StageId(0),
            NodePolicy {
                model: DecisionModel::LinearMulti(m),
                overhead: 0.02,
            },
        );
        policy.set_node(StageId(1), NodePolicy::constant(0));
        assert!(policy.prune(&topo).is_empty());
    }

    #[test]
    fn round_trip_preserves_policy() {
        let topo = three_stage();
        let mut policy = Policy::new(&topo, 0.37);
        policy.set_node(StageId(0), NodePolicy::constant(1));
        policy.set_node(
            StageId(1),
            NodePolicy {
                model: DecisionModel::LinearBinary(LinearBinaryModel {
                    weights: vec![0.5, -1.0],
                    bias: 0.1,
                    standardizer: Standardizer::identity(2),
                }),
                overhead: 0.02,
            },
        );
        let back = Policy::from_json(&policy.to_json(&topo), &topo).unwrap();
        assert_eq!(policy, back);
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let topo = three_stage();
        let other = Topology::complete_dag(
            vec!["a".into(), "g".into(), "r".into()],
            vec![0.25, 0.70, 3.00],
        )
        .unwrap();
        let mut policy = Policy::new(&topo, 0.0);
        policy.set_node(StageId(0), NodePolicy::constant(0));
        policy.set_node(StageId(1), NodePolicy::constant(0));
        let json = policy.to_json(&topo);
        assert!(matches!(
            Policy::from_json(&json, &other),
            Err(Error::TopologyDigestMismatch { .. })
        ));
    }

    #[test]
    fn binary_gate_on_three_action_node_is_rejected() {
        let topo = three_stage();
        let mut policy = Policy::new(&topo, 0.0);
        policy.set_node(StageId(0), gate(1.0));
        policy.set_node(StageId(1), NodePolicy::constant(0));
        let json = policy.to_json(&topo);
        assert!(matches!(
            Policy::from_json(&json, &topo),
            Err(Error::MalformedPolicy(_))
        ));
    }

    #[test]
    fn overhead_overrides_apply_per_stage() {
        let topo = three_stage();
        let mut spec = OverheadSpec::default_for(&topo);
        assert!((spec.linear - 0.02).abs() < 1e-12);
        spec.per_node.insert("g".into(), 0.05);
        assert_eq!(spec.linear_overhead(&topo, StageId(0)), 0.02);
        assert_eq!(spec.linear_overhead(&topo, StageId(1)), 0.05);
    }
}

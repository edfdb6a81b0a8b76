//! Stage graph: which prediction stages exist, what each one costs, and
//! which routing actions are available after evaluating a stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Index of a stage inside its [`Topology`]. Stable across clones of the
/// same topology; meaningless across topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageId(pub usize);

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One routing option at a decision node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Return the current stage's prediction.
    ExitHere,
    /// Evaluate the given stage next.
    ForwardTo(StageId),
}

impl Action {
    pub fn forward_target(&self) -> Option<StageId> {
        match self {
            Action::ExitHere => None,
            Action::ForwardTo(s) => Some(*s),
        }
    }
}

/// DAG of prediction stages. The first stage in `stages` is the root every
/// example enters at; the terminal stage has no outgoing actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    names: Vec<String>,
    costs: Vec<f64>,
    actions: Vec<Vec<Action>>,
    terminal: StageId,
}

/// On-disk form: stage ids as strings, actions as `"exit"` or a stage name.
#[derive(Serialize, Deserialize)]
struct TopologyFile {
    stages: Vec<String>,
    costs: BTreeMap<String, f64>,
    edges: BTreeMap<String, Vec<String>>,
    terminal: String,
}

impl Topology {
    /// Build and validate a topology. `actions` must list, per stage and in
    /// decision order, the allowed routing actions (empty for the terminal).
    pub fn new(
        names: Vec<String>,
        costs: Vec<f64>,
        actions: Vec<Vec<Action>>,
        terminal: StageId,
    ) -> Result<Self> {
        let topo = Topology {
            names,
            costs,
            actions,
            terminal,
        };
        topo.validate()?;
        Ok(topo)
    }

    /// Linear chain `names[0] -> names[1] -> ... -> terminal` with an exit
    /// option at every non-terminal stage.
    pub fn chain(names: Vec<String>, costs: Vec<f64>) -> Result<Self> {
        let n = names.len();
        let actions = (0..n)
            .map(|i| {
                if i + 1 < n {
                    vec![Action::ExitHere, Action::ForwardTo(StageId(i + 1))]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Topology::new(names, costs, actions, StageId(n.saturating_sub(1)))
    }

    /// Complete DAG: every stage may exit or forward to any later stage.
    /// For three stages this is the full tree a -> {b, c}, b -> c.
    pub fn complete_dag(names: Vec<String>, costs: Vec<f64>) -> Result<Self> {
        let n = names.len();
        let actions = (0..n)
            .map(|i| {
                if i + 1 < n {
                    let mut acts = vec![Action::ExitHere];
                    acts.extend((i + 1..n).map(|j| Action::ForwardTo(StageId(j))));
                    acts
                } else {
                    Vec::new()
                }
            })
            .collect();
        Topology::new(names, costs, actions, StageId(n.saturating_sub(1)))
    }

    fn validate(&self) -> Result<()> {
        let n = self.names.len();
        if n == 0 {
            return Err(Error::InvalidTopology("no stages".into()));
        }
        if self.costs.len() != n || self.actions.len() != n {
            return Err(Error::InvalidTopology(
                "stages, costs and edges must cover the same stage set".into(),
            ));
        }
        {
            let mut seen = std::collections::BTreeSet::new();
            for name in &self.names {
                if name == "exit" {
                    return Err(Error::InvalidTopology(
                        "`exit` is reserved and cannot name a stage".into(),
                    ));
                }
                if !seen.insert(name) {
                    return Err(Error::InvalidTopology(format!("duplicate stage `{name}`")));
                }
            }
        }
        for (i, &c) in self.costs.iter().enumerate() {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidTopology(format!(
                    "stage `{}` has invalid cost {c}",
                    self.names[i]
                )));
            }
        }
        if self.terminal.0 >= n {
            return Err(Error::InvalidTopology("terminal stage out of range".into()));
        }
        if !self.actions[self.terminal.0].is_empty() {
            return Err(Error::InvalidTopology(
                "terminal stage must have no outgoing actions".into(),
            ));
        }
        if self.costs[self.terminal.0] <= 0.0 {
            return Err(Error::InvalidTopology(
                "terminal stage cost must be strictly positive".into(),
            ));
        }
        for (i, acts) in self.actions.iter().enumerate() {
            if StageId(i) == self.terminal {
                continue;
            }
            if acts.is_empty() {
                return Err(Error::InvalidTopology(format!(
                    "non-terminal stage `{}` has no actions",
                    self.names[i]
                )));
            }
            let mut exits = 0usize;
            let mut targets = std::collections::BTreeSet::new();
            for a in acts {
                match a {
                    Action::ExitHere => exits += 1,
                    Action::ForwardTo(t) => {
                        if t.0 >= n {
                            return Err(Error::InvalidTopology(format!(
                                "stage `{}` forwards to an unknown stage",
                                self.names[i]
                            )));
                        }
                        if !targets.insert(t.0) {
                            return Err(Error::InvalidTopology(format!(
                                "stage `{}` lists a forward target twice",
                                self.names[i]
                            )));
                        }
                    }
                }
            }
            if exits > 1 {
                return Err(Error::InvalidTopology(format!(
                    "stage `{}` lists ExitHere more than once",
                    self.names[i]
                )));
            }
        }
        self.check_acyclic()?;
        self.check_reachability()?;
        Ok(())
    }

    fn check_acyclic(&self) -> Result<()> {
        // DFS with colors; on a back edge we report the offending stage.
        #[derive(Clone, Copy, PartialEq)]
        enum Color {
            White,
            Gray,
            Black,
        }
        fn visit(topo: &Topology, s: usize, colors: &mut [Color]) -> Result<()> {
            colors[s] = Color::Gray;
            for a in &topo.actions[s] {
                if let Action::ForwardTo(t) = a {
                    match colors[t.0] {
                        Color::Gray => {
                            return Err(Error::CyclicTopology(topo.names[t.0].clone()))
                        }
                        Color::White => visit(topo, t.0, colors)?,
                        Color::Black => {}
                    }
                }
            }
            colors[s] = Color::Black;
            Ok(())
        }
        let mut colors = vec![Color::White; self.names.len()];
        for s in 0..self.names.len() {
            if colors[s] == Color::White {
                visit(self, s, &mut colors)?;
            }
        }
        Ok(())
    }

    fn check_reachability(&self) -> Result<()> {
        let n = self.names.len();
        // Terminal reachable from every node.
        let mut reaches_terminal = vec![false; n];
        reaches_terminal[self.terminal.0] = true;
        // Stages are not necessarily topologically sorted by index, so iterate
        // to a fixed point; the graph is tiny.
        let mut changed = true;
        while changed {
            changed = false;
            for s in 0..n {
                if reaches_terminal[s] {
                    continue;
                }
                let ok = self.actions[s].iter().any(|a| match a {
                    Action::ForwardTo(t) => reaches_terminal[t.0],
                    Action::ExitHere => false,
                });
                if ok {
                    reaches_terminal[s] = true;
                    changed = true;
                }
            }
        }
        if let Some(s) = reaches_terminal.iter().position(|r| !r) {
            return Err(Error::InvalidTopology(format!(
                "terminal is unreachable from stage `{}`",
                self.names[s]
            )));
        }
        // Every stage reachable from the root, and no second terminal-like node.
        let mut from_root = vec![false; n];
        let mut stack = vec![self.root().0];
        while let Some(s) = stack.pop() {
            if from_root[s] {
                continue;
            }
            from_root[s] = true;
            for a in &self.actions[s] {
                if let Action::ForwardTo(t) = a {
                    stack.push(t.0);
                }
            }
        }
        if let Some(s) = from_root.iter().position(|r| !r) {
            return Err(Error::InvalidTopology(format!(
                "stage `{}` is unreachable from the root",
                self.names[s]
            )));
        }
        for s in 0..n {
            if StageId(s) != self.terminal && self.actions[s].is_empty() {
                return Err(Error::InvalidTopology(format!(
                    "stage `{}` is a second dead end",
                    self.names[s]
                )));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> StageId {
        StageId(0)
    }

    pub fn terminal(&self) -> StageId {
        self.terminal
    }

    pub fn is_terminal(&self, s: StageId) -> bool {
        s == self.terminal
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn stage_ids(&self) -> impl Iterator<Item = StageId> {
        (0..self.names.len()).map(StageId)
    }

    pub fn name(&self, s: StageId) -> &str {
        &self.names[s.0]
    }

    pub fn id(&self, name: &str) -> Result<StageId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(StageId)
            .ok_or_else(|| Error::UnknownStageId(name.to_string()))
    }

    pub fn stage_cost(&self, s: StageId) -> f64 {
        self.costs[s.0]
    }

    pub fn min_stage_cost(&self) -> f64 {
        self.costs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Allowed actions at `s`, in decision order. Empty for the terminal.
    pub fn actions(&self, s: StageId) -> &[Action] {
        &self.actions[s.0]
    }

    /// Decision nodes (non-terminal stages) in reverse topological order:
    /// every node appears after all stages it can forward to. Ties resolve
    /// by stage index for determinism.
    pub fn decision_nodes_bottom_up(&self) -> Vec<StageId> {
        let order = self.topological_order();
        order
            .into_iter()
            .rev()
            .filter(|s| !self.is_terminal(*s))
            .collect()
    }

    fn topological_order(&self) -> Vec<StageId> {
        let n = self.names.len();
        let mut indegree = vec![0usize; n];
        for acts in &self.actions {
            for a in acts {
                if let Action::ForwardTo(t) = a {
                    indegree[t.0] += 1;
                }
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&s| indegree[s] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&s) = ready.iter().min() {
            ready.retain(|&x| x != s);
            order.push(StageId(s));
            for a in &self.actions[s] {
                if let Action::ForwardTo(t) = a {
                    indegree[t.0] -= 1;
                    if indegree[t.0] == 0 {
                        ready.push(t.0);
                    }
                }
            }
        }
        debug_assert_eq!(order.len(), n);
        order
    }

    /// Cost of the cheapest forward route from `s` to the terminal,
    /// excluding `s`'s own cost. Zero for the terminal itself.
    pub fn cheapest_time_to_terminal(&self, s: StageId) -> f64 {
        self.cheapest_route(s).1
    }

    /// Next hop on the cheapest route from `s` to the terminal, with ties
    /// broken toward the earlier stage. `None` for the terminal.
    pub fn cheapest_next_hop(&self, s: StageId) -> Option<StageId> {
        self.cheapest_route(s).0
    }

    fn cheapest_route(&self, s: StageId) -> (Option<StageId>, f64) {
        if self.is_terminal(s) {
            return (None, 0.0);
        }
        let mut best: Option<(StageId, f64)> = None;
        for a in self.actions(s) {
            if let Action::ForwardTo(t) = a {
                let total = self.stage_cost(*t) + self.cheapest_time_to_terminal(*t);
                let better = match best {
                    None => true,
                    Some((bt, bc)) => total < bc || (total == bc && t.0 < bt.0),
                };
                if better {
                    best = Some((*t, total));
                }
            }
        }
        let (t, c) = best.expect("validated: terminal reachable from every stage");
        (Some(t), c)
    }

    /// Hex digest of the canonical serialized form; stored in policy bundles
    /// so a policy cannot silently be applied to a different topology.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&self.to_file()).expect("topology serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for b in &out[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    fn to_file(&self) -> TopologyFile {
        let costs = self
            .names
            .iter()
            .cloned()
            .zip(self.costs.iter().cloned())
            .collect();
        let edges = self
            .names
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.actions[*i].is_empty())
            .map(|(i, name)| {
                let acts = self.actions[i]
                    .iter()
                    .map(|a| match a {
                        Action::ExitHere => "exit".to_string(),
                        Action::ForwardTo(t) => self.names[t.0].clone(),
                    })
                    .collect();
                (name.clone(), acts)
            })
            .collect();
        TopologyFile {
            stages: self.names.clone(),
            costs,
            edges,
            terminal: self.names[self.terminal.0].clone(),
        }
    }

    fn from_file(file: TopologyFile) -> Result<Self> {
        let names = file.stages;
        let lookup = |name: &str| -> Result<StageId> {
            names
                .iter()
                .position(|n| n == name)
                .map(StageId)
                .ok_or_else(|| Error::UnknownStageId(name.to_string()))
        };
        let mut costs = Vec::with_capacity(names.len());
        for name in &names {
            let c = file
                .costs
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidTopology(format!("no cost for stage `{name}`")))?;
            costs.push(c);
        }
        let mut actions = vec![Vec::new(); names.len()];
        for (name, acts) in &file.edges {
            let id = lookup(name)?;
            let mut parsed = Vec::with_capacity(acts.len());
            for a in acts {
                if a == "exit" {
                    parsed.push(Action::ExitHere);
                } else {
                    parsed.push(Action::ForwardTo(lookup(a)?));
                }
            }
            actions[id.0] = parsed;
        }
        let terminal = lookup(&file.terminal)?;
        Topology::new(names, costs, actions, terminal)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("topology serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TopologyFile = serde_json::from_str(json)
            .map_err(|e| Error::InvalidTopology(format!("bad topology json: {e}")))?;
        Topology::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Topology::from_json(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc_chain() -> Topology {
        Topology::chain(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 2.0, 10.0],
        )
        .unwrap()
    }

    #[test]
    fn chain_orders_decisions_bottom_up() {
        let t = abc_chain();
        assert_eq!(t.decision_nodes_bottom_up(), vec![StageId(1), StageId(0)]);
    }

    #[test]
    fn full_tree_trains_mid_stage_first() {
        let t = Topology::complete_dag(
            vec!["a".into(), "g".into(), "r".into()],
            vec![0.25, 0.70, 2.86],
        )
        .unwrap();
        assert_eq!(t.decision_nodes_bottom_up(), vec![StageId(1), StageId(0)]);
        assert_eq!(
            t.actions(StageId(0)),
            &[
                Action::ExitHere,
                Action::ForwardTo(StageId(1)),
                Action::ForwardTo(StageId(2))
            ]
        );
    }

    #[test]
    fn cycle_is_rejected() {
        let err = Topology::new(
            vec!["a".into(), "b".into(), "t".into()],
            vec![1.0, 1.0, 1.0],
            vec![
                vec![Action::ForwardTo(StageId(1))],
                vec![Action::ForwardTo(StageId(0)), Action::ForwardTo(StageId(2))],
                vec![],
            ],
            StageId(2),
        )
        .unwrap_err();
        assert!(matches!(err, Error::CyclicTopology(_)));
    }

    #[test]
    fn double_exit_is_rejected() {
        let err = Topology::new(
            vec!["a".into(), "t".into()],
            vec![1.0, 1.0],
            vec![
                vec![Action::ExitHere, Action::ExitHere, Action::ForwardTo(StageId(1))],
                vec![],
            ],
            StageId(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidTopology(_)));
    }

    #[test]
    fn zero_terminal_cost_is_rejected() {
        let err = Topology::chain(vec!["a".into(), "t".into()], vec![1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidTopology(_)));
    }

    #[test]
    fn cheapest_route_skips_middle_stage() {
        let t = Topology::complete_dag(
            vec!["a".into(), "g".into(), "r".into()],
            vec![0.25, 0.70, 2.86],
        )
        .unwrap();
        assert_eq!(t.cheapest_next_hop(StageId(0)), Some(StageId(2)));
        assert!((t.cheapest_time_to_terminal(StageId(0)) - 2.86).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        let t = abc_chain();
        let back = Topology::from_json(&t.to_json()).unwrap();
        assert_eq!(t, back);
        assert_eq!(t.digest(), back.digest());
    }

    #[test]
    fn digest_changes_with_costs() {
        let t = abc_chain();
        let other = Topology::chain(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 2.0, 11.0],
        )
        .unwrap();
        assert_ne!(t.digest(), other.digest());
    }
}

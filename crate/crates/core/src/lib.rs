//! Policy training and trace-driven simulation for adaptive model cascades.
//!
//! A cascade runs a cheap prediction stage first and forwards only the
//! examples it is unsure about to more expensive stages. Given a recorded
//! trace of what every stage would have predicted, this crate trains the
//! routing policies, replays them over the trace, sweeps the time/accuracy
//! trade-off knob, and reports the resulting operating points.

pub mod baselines;
pub mod error;
pub mod learner;
pub mod policy;
pub mod report;
pub mod runtime;
pub mod sweep;
pub mod synth;
pub mod topology;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
pub use learner::{LinearBinaryModel, LinearMultiModel, Standardizer, TrainConfig};
pub use policy::{DecisionModel, NodePolicy, OverheadSpec, Policy};
pub use report::{agreement_table, emit_report, AgreementRow, OperatingOutcome, Summary};
pub use runtime::{
    compare_terminal_only, evaluate_dataset, route_example, RoutingOutcome, StageEvaluator,
    SystemMetrics, TraceEvaluator,
};
pub use sweep::{
    default_lambda_grid, pareto_filter, run_sweep, select_operating_point, CurvePoint,
    LambdaPoint, OperatingTarget, ParetoPoint, SelectedPoint, SweepConfig, SweepResult,
};
pub use synth::{generate, SynthConfig};
pub use topology::{Action, StageId, Topology};
pub use trace::{Example, LossSpec, StageRecord, TraceDataset};
pub use trainer::{action_costs, train_bottom_up, train_node, NodeCosts};

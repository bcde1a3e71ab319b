//! Launch/execution frontiers, metric futures and recompile triggers.

pub mod metrics;
mod session;

pub use metrics::{BoardView, MetricBoard, MetricQueue, MetricRecord, MetricValue, METRIC_NAMES};
pub use session::{
    enforce_gap, execute, run, ExecOutputs, GapState, LaunchRecord, Phases, RecompileEvent, RunReport, RuntimeConfig,
    Session, SpecDelta, Trigger, TriggerAction, TriggerDecision, TriggerSnapshot,
};

//! Mixture-of-experts training on a recompilable dataflow runtime.
//!
//! A model is declared as a [`GraphSpec`], compiled into buffers plus a task
//! list, and trained by a [`Session`] that keeps a configurable number of
//! iterations in flight while recompile triggers adjust expert capacities and
//! assignment caching.

pub mod error;
pub mod executor;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod moe;
pub mod policies;
pub mod runtime;
pub mod tensor;

pub use error::{CompileError, Error, MoeError, Result, RuntimeError, TensorError};
pub use executor::{critical_path, forward_makespan, schedule, CostModel, ExecMode, TaskCost, TaskTrace, TraceEntry};
pub use graph::{
    compile, expert_capacity, recompile, Batch, CapacityConfig, CompiledPlan, GraphBuilder, GraphSpec, MoeOptions,
    Op, PortRef,
};
pub use losses::{BatchStats, LossConfig, LossMode};
pub use moe::{Assignment, AssignmentCache, GateDecision};
pub use runtime::{
    enforce_gap, execute, run, GapState, MetricBoard, MetricQueue, MetricRecord, Phases, RuntimeConfig, Session,
    Trigger, TriggerDecision,
};
pub use tensor::{ParamId, Tensor};

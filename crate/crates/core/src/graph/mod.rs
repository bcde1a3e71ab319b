//! Operator graphs, their compilation into buffer plans and task lists, and
//! the task bodies that execute them.

mod buffer;
mod deps;
mod exec;
mod plan;
mod spec;

pub use buffer::{BufKey, Buffer, Value};
pub use deps::DepTracker;
pub use exec::{run_load, run_task, Batch, IterCtx};
pub use plan::{
    changed_edges, compile, init_param, recompile, CompiledPlan, EdgeShape, Phase, PlanCore, RecompileReport,
    TaskAction, TaskDescriptor, TaskKind,
};
pub use spec::{
    expert_capacity, CapacityConfig, GateKind, GraphBuilder, GraphSpec, MoeBlock, MoeHandles, MoeOptions, Node,
    NodeId, Op, Placement, PortRef, Role,
};

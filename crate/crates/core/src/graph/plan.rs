//! Compilation of a [`GraphSpec`] into buffers plus an ordered task list, and
//! in-place recompilation.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::CompileError;
use crate::graph::buffer::{BufKey, Buffer, Value};
use crate::graph::deps::DepTracker;
use crate::graph::spec::{GraphSpec, NodeId, Op, Placement, PortRef, Role};
use crate::moe::{Assignment, AssignmentCache, CachedRoutes, GateDecision, SpecConcat};
use crate::tensor::{ParamId, Tensor};

/// Declared type and shape of an edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeShape {
    Tensor(Vec<usize>),
    Mlp { out: Vec<usize>, hidden: Vec<Vec<usize>> },
    Ids(usize),
    Labels { rows: usize, classes: usize },
    Decision { batch: usize, k: usize, n: usize },
    Routes { batch: usize, k: usize },
    Assignment { batch: usize, k: usize, n: usize },
    Spec { batch: usize, k: usize, cols: usize, n: usize },
}

impl EdgeShape {
    /// Shape of the tensor a consumer sees.
    pub fn main(&self) -> Option<&[usize]> {
        match self {
            EdgeShape::Tensor(s) | EdgeShape::Mlp { out: s, .. } => Some(s),
            _ => None,
        }
    }

    fn allocate(&self) -> Value {
        match self {
            EdgeShape::Tensor(s) => Value::Tensor(Tensor::zeros(s)),
            EdgeShape::Mlp { out, hidden } => Value::Mlp {
                out: Tensor::zeros(out),
                hidden: hidden.iter().map(|h| Tensor::zeros(h)).collect(),
            },
            EdgeShape::Ids(n) => Value::Ids(vec![0; *n]),
            EdgeShape::Labels { rows, .. } => Value::Labels(vec![0; *rows]),
            EdgeShape::Decision { batch, k, n } => Value::Decision(GateDecision {
                batch: *batch,
                k: *k,
                n: *n,
                indices: vec![0; batch * k],
                weights: vec![0.0; batch * k],
                raw_scores: vec![0.0; batch * n],
            }),
            EdgeShape::Routes { batch, k } => Value::Routes(CachedRoutes {
                k: *k,
                routes: vec![0; batch * k],
                known: vec![false; *batch],
            }),
            EdgeShape::Assignment { batch, k, n } => Value::Assignment(Assignment {
                batch: *batch,
                k: *k,
                capacities: vec![0; *n],
                routes: vec![0; batch * k],
                routed: vec![false; *batch],
                experts: vec![Vec::new(); *n],
                slot_of: vec![None; batch * k],
                dropped: Vec::new(),
                assigned_counts: vec![0; *n],
            }),
            EdgeShape::Spec { batch, k, cols, n } => Value::Spec {
                concat: SpecConcat {
                    preds: Tensor::zeros(&[batch * k, *cols]),
                    valid: vec![false; batch * k],
                },
                decision: GateDecision {
                    batch: *batch,
                    k: *k,
                    n: *n,
                    indices: vec![0; batch * k],
                    weights: vec![0.0; batch * k],
                    raw_scores: vec![0.0; batch * n],
                },
                grad_weights: vec![0.0; batch * k],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Load,
    Forward,
    Metric,
    Backward,
    Update,
}

/// Task category; its rendering (`fwd.gate`, `bwd.expert`, `metric`) keys the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskKind {
    pub phase: Phase,
    pub class: &'static str,
}

impl TaskKind {
    pub const LOAD: TaskKind = TaskKind {
        phase: Phase::Load,
        class: "load",
    };
    pub const METRIC: TaskKind = TaskKind {
        phase: Phase::Metric,
        class: "metric",
    };

    pub fn is_forward(&self) -> bool {
        matches!(self.phase, Phase::Load | Phase::Forward)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.phase {
            Phase::Load | Phase::Metric => f.write_str(self.class),
            Phase::Forward => write!(f, "fwd.{}", self.class),
            Phase::Backward => write!(f, "bwd.{}", self.class),
            Phase::Update => write!(f, "update.{}", self.class),
        }
    }
}

/// What a task executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskAction {
    Forward(NodeId),
    CacheLookup(NodeId),
    CacheUpdate(NodeId),
    Metric,
    Backward(NodeId),
    Update(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDescriptor {
    pub id: usize,
    pub kind: TaskKind,
    pub action: TaskAction,
    pub worker: usize,
    /// Earlier tasks of the same iteration this one waits for.
    pub deps: Vec<usize>,
    pub reads: Vec<BufKey>,
    pub writes: Vec<BufKey>,
    /// Leading dimension of the work, for per-row costs.
    pub rows: usize,
}

/// Immutable description of one plan generation. Buffers are shared storage.
#[derive(Debug)]
pub struct PlanCore {
    pub spec: GraphSpec,
    pub generation: u64,
    pub workers: usize,
    pub shapes: BTreeMap<PortRef, EdgeShape>,
    pub param_shapes: BTreeMap<ParamId, Vec<usize>>,
    pub buffers: BTreeMap<BufKey, Arc<Buffer>>,
    pub capacities: Vec<Vec<usize>>,
    pub requires_grad: BTreeSet<PortRef>,
    /// Task order of nodes (priority-sorted topological order).
    pub order: Vec<NodeId>,
    pub tasks: Vec<TaskDescriptor>,
    pub input_node: NodeId,
    pub labels_node: Option<NodeId>,
    /// Buffers written by the per-iteration load task.
    pub load_writes: Vec<BufKey>,
}

impl PlanCore {
    pub fn buffer(&self, key: BufKey) -> &Arc<Buffer> {
        &self.buffers[&key]
    }

    pub fn edge(&self, port: PortRef) -> &Arc<Buffer> {
        self.buffer(BufKey::Edge(port))
    }

    pub fn node_outputs(&self, node: NodeId) -> Vec<PortRef> {
        self.shapes.keys().filter(|p| p.node == node).copied().collect()
    }

    pub fn has_metric(&self) -> bool {
        self.tasks.iter().any(|t| t.action == TaskAction::Metric)
    }
}

/// A compiled plan; cheap to clone (shares the core).
#[derive(Debug, Clone)]
pub struct CompiledPlan {
    core: Arc<PlanCore>,
}

/// Outcome of a recompile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecompileReport {
    pub generation: u64,
    pub reallocated: Vec<PortRef>,
    pub reused: usize,
}

impl CompiledPlan {
    pub fn core(&self) -> &Arc<PlanCore> {
        &self.core
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.core.spec
    }

    pub fn generation(&self) -> u64 {
        self.core.generation
    }

    pub fn tasks(&self) -> &[TaskDescriptor] {
        &self.core.tasks
    }

    pub fn workers(&self) -> usize {
        self.core.workers
    }

    pub fn capacities(&self, block: usize) -> &[usize] {
        &self.core.capacities[block]
    }

    pub fn shape(&self, port: PortRef) -> Option<&EdgeShape> {
        self.core.shapes.get(&port)
    }

    pub fn buffer(&self, key: BufKey) -> Option<&Arc<Buffer>> {
        self.core.buffers.get(&key)
    }

    /// Copy of the tensor on an edge.
    pub fn read_tensor(&self, port: PortRef) -> Option<Tensor> {
        self.core.buffers.get(&BufKey::Edge(port))?.read().tensor().cloned()
    }

    pub fn read_value(&self, key: BufKey) -> Option<Value> {
        Some(self.core.buffers.get(&key)?.read().clone())
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.read_value(BufKey::Param(id))?.tensor().cloned()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.core.param_shapes.keys().copied().collect()
    }

    /// Overwrites a parameter's data (used by gradient checks and tests).
    pub fn set_param(&self, id: ParamId, data: &[f64]) {
        let mut guard = self.core.buffer(BufKey::Param(id)).write();
        let t = guard.tensor_mut().expect("parameter buffers hold tensors");
        t.data_mut().copy_from_slice(data);
    }

    pub fn zero_param_grads(&self) {
        for id in self.core.param_shapes.keys() {
            let mut guard = self.core.buffer(BufKey::Param(*id)).write();
            if let Some(t) = guard.tensor_mut() {
                t.zero_grad();
            }
        }
    }

    /// Concatenated little-endian bytes of every parameter, in id order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for id in self.core.param_shapes.keys() {
            out.extend(id.0.to_le_bytes());
            let guard = self.core.buffer(BufKey::Param(*id)).read();
            out.extend(guard.tensor().expect("parameter tensor").data_bytes());
        }
        out
    }

    /// Hex SHA-256 of [`CompiledPlan::param_bytes`].
    pub fn weights_checksum(&self) -> String {
        let digest = Sha256::digest(self.param_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// One line per task: `gen:id kind worker deps=[...]`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for t in &self.core.tasks {
            let deps: Vec<String> = t.deps.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                out,
                "{}:{} {} {} deps=[{}]",
                self.core.generation,
                t.id,
                t.kind,
                t.worker,
                deps.join(",")
            );
        }
        out
    }

    /// Index of the forward task of `node`.
    pub fn forward_task(&self, node: NodeId) -> Option<usize> {
        self.core
            .tasks
            .iter()
            .position(|t| t.action == TaskAction::Forward(node))
    }

    /// Whether task `a` transitively depends on task `b`.
    pub fn depends_on(&self, a: usize, b: usize) -> bool {
        let mut stack = vec![a];
        let mut seen = vec![false; self.core.tasks.len()];
        while let Some(t) = stack.pop() {
            for &d in &self.core.tasks[t].deps {
                if d == b {
                    return true;
                }
                if !seen[d] {
                    seen[d] = true;
                    stack.push(d);
                }
            }
        }
        false
    }
}

fn shape_err(spec: &GraphSpec, node: NodeId, detail: impl Into<String>) -> CompileError {
    CompileError::Shape {
        node,
        op: spec.nodes[node].op.name().to_string(),
        detail: detail.into(),
    }
}

fn output_count(spec: &GraphSpec, node: NodeId) -> usize {
    match spec.nodes[node].op {
        Op::Input { .. } | Op::FixedRouting { .. } => 2,
        Op::GroupBy { block } => spec.blocks.get(block).map_or(1, |b| b.capacity.n + 1),
        _ => 1,
    }
}

fn expected_arity(spec: &GraphSpec, node: NodeId) -> Option<(usize, usize)> {
    let op = &spec.nodes[node].op;
    let n = op.block().and_then(|b| spec.blocks.get(b)).map(|b| b.capacity.n);
    Some(match op {
        Op::Input { .. } | Op::Labels { .. } => (0, 0),
        Op::Linear { .. } | Op::Relu | Op::Softmax | Op::Mlp { .. } | Op::TopK { .. } | Op::FixedRouting { .. } => {
            (1, 1)
        }
        Op::Cache { .. } | Op::CrossEntropy | Op::SpecLoss { .. } | Op::Balance { .. } => (2, 2),
        Op::GroupBy { .. } => (2, 3),
        Op::Aggregate { .. } | Op::AggregateSpec { .. } => {
            let n = n?;
            (n + 2, n + 2)
        }
    })
}

fn validate(spec: &GraphSpec) -> Result<(), CompileError> {
    if spec.batch_size == 0 {
        return Err(CompileError::Shape {
            node: 0,
            op: "graph".into(),
            detail: "batch_size must be positive".into(),
        });
    }
    for (b, block) in spec.blocks.iter().enumerate() {
        block
            .capacity
            .validate()
            .map_err(|detail| CompileError::Capacity { block: b, detail })?;
    }
    for (id, node) in spec.nodes.iter().enumerate() {
        if let Some(b) = node.op.block() {
            if b >= spec.blocks.len() {
                return Err(shape_err(spec, id, format!("unknown block {b}")));
            }
        }
        let (lo, hi) = expected_arity(spec, id).ok_or_else(|| shape_err(spec, id, "unknown block"))?;
        if node.inputs.len() < lo || node.inputs.len() > hi {
            return Err(shape_err(
                spec,
                id,
                format!("expected {lo}..={hi} inputs, got {}", node.inputs.len()),
            ));
        }
        for p in &node.inputs {
            if p.node >= spec.nodes.len() || p.port >= output_count(spec, p.node) {
                return Err(shape_err(spec, id, format!("input {p} does not exist")));
            }
        }
        if let Op::GroupBy { block } = node.op {
            if spec.blocks[block].cache_enabled && node.inputs.len() != 3 {
                return Err(shape_err(spec, id, "caching enabled but no Cache input"));
            }
        }
    }
    let out = spec.output;
    if out.node >= spec.nodes.len() || out.port >= output_count(spec, out.node) {
        return Err(CompileError::Shape {
            node: out.node,
            op: "output".into(),
            detail: format!("output port {out} does not exist"),
        });
    }
    Ok(())
}

/// Inputs that order a node's forward task.
fn order_inputs(spec: &GraphSpec, node: NodeId) -> Vec<PortRef> {
    let n = &spec.nodes[node];
    match n.op {
        Op::Cache { .. } => vec![n.inputs[0]],
        Op::GroupBy { block } if spec.blocks[block].cache_enabled => vec![n.inputs[0], n.inputs[2]],
        _ => n.inputs.clone(),
    }
}

fn role_rank(role: Role) -> u8 {
    match role {
        Role::Main => 0,
        Role::Expert(_) => 1,
        Role::Gate => 2,
    }
}

/// Kahn's algorithm; among ready nodes the lowest `(role rank, id)` goes first.
fn topo_order(spec: &GraphSpec, inputs_of: impl Fn(NodeId) -> Vec<PortRef>) -> Result<Vec<NodeId>, CompileError> {
    let count = spec.nodes.len();
    let mut indegree = vec![0usize; count];
    let mut users: Vec<Vec<NodeId>> = vec![Vec::new(); count];
    for id in 0..count {
        let mut preds: Vec<NodeId> = inputs_of(id).iter().map(|p| p.node).collect();
        preds.sort_unstable();
        preds.dedup();
        indegree[id] = preds.len();
        for p in preds {
            users[p].push(id);
        }
    }
    let key = |id: NodeId| Reverse((role_rank(spec.nodes[id].role), id));
    let mut ready: BinaryHeap<_> = (0..count).filter(|&i| indegree[i] == 0).map(key).collect();
    let mut order = Vec::with_capacity(count);
    while let Some(Reverse((_, id))) = ready.pop() {
        order.push(id);
        for &u in &users[id] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.push(key(u));
            }
        }
    }
    if order.len() != count {
        let node = (0..count).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(CompileError::Cycle { node });
    }
    Ok(order)
}

struct Inferred {
    shapes: BTreeMap<PortRef, EdgeShape>,
    params: BTreeMap<ParamId, Vec<usize>>,
    capacities: Vec<Vec<usize>>,
}

fn matrix(spec: &GraphSpec, node: NodeId, shapes: &BTreeMap<PortRef, EdgeShape>, port: PortRef) -> Result<(usize, usize), CompileError> {
    match shapes[&port].main() {
        Some([m, c]) => Ok((*m, *c)),
        _ => Err(shape_err(spec, node, format!("input {port} is not a matrix"))),
    }
}

fn infer(spec: &GraphSpec, order: &[NodeId]) -> Result<Inferred, CompileError> {
    let capacities: Vec<Vec<usize>> = spec.blocks.iter().map(|b| b.capacity.capacities()).collect();
    let mut shapes: BTreeMap<PortRef, EdgeShape> = BTreeMap::new();
    let mut params = BTreeMap::new();
    let batch = spec.batch_size;
    for &id in order {
        let node = &spec.nodes[id];
        let inp = &node.inputs;
        let err = |d: String| shape_err(spec, id, d);
        let block_cfg = node.op.block().map(|b| &spec.blocks[b].capacity);
        let mut outs: Vec<(usize, EdgeShape)> = Vec::new();
        let mut set = |port: usize, s: EdgeShape| outs.push((port, s));
        match &node.op {
            Op::Input { features } => {
                set(0, EdgeShape::Tensor(vec![batch, *features]));
                set(1, EdgeShape::Ids(batch));
            }
            Op::Labels { classes } => set(
                0,
                EdgeShape::Labels {
                    rows: batch,
                    classes: *classes,
                },
            ),
            Op::Linear { out } => {
                let (m, p) = matrix(spec, id, &shapes, inp[0])?;
                params.insert(node.params[0], vec![p, *out]);
                params.insert(node.params[1], vec![*out]);
                set(0, EdgeShape::Tensor(vec![m, *out]));
            }
            Op::Relu | Op::Softmax => {
                let s = shapes[&inp[0]]
                    .main()
                    .ok_or_else(|| err(format!("input {} is not a tensor", inp[0])))?
                    .to_vec();
                if matches!(node.op, Op::Softmax) && s.len() != 2 {
                    return Err(err("softmax needs a matrix".into()));
                }
                set(0, EdgeShape::Tensor(s));
            }
            Op::Mlp { hidden, out, .. } => {
                let (m, mut p) = matrix(spec, id, &shapes, inp[0])?;
                let mut hs = Vec::new();
                for (l, &h) in hidden.iter().chain(std::iter::once(out)).enumerate() {
                    params.insert(node.params[2 * l], vec![p, h]);
                    params.insert(node.params[2 * l + 1], vec![h]);
                    p = h;
                    if l < hidden.len() {
                        hs.push(vec![m, h]);
                    }
                }
                set(
                    0,
                    EdgeShape::Mlp {
                        out: vec![m, *out],
                        hidden: hs,
                    },
                );
            }
            Op::TopK { .. } => {
                let cfg = block_cfg.expect("validated");
                let (m, n) = matrix(spec, id, &shapes, inp[0])?;
                if n != cfg.n || m != cfg.batch_size {
                    return Err(err(format!(
                        "scores [{m} × {n}] do not match block batch {} and n = {}",
                        cfg.batch_size, cfg.n
                    )));
                }
                set(0, EdgeShape::Decision { batch: m, k: cfg.k, n });
            }
            Op::FixedRouting { .. } => {
                let cfg = block_cfg.expect("validated");
                let EdgeShape::Ids(m) = shapes[&inp[0]] else {
                    return Err(err("expects sample ids".into()));
                };
                if m != cfg.batch_size {
                    return Err(err(format!("batch {m} does not match block batch {}", cfg.batch_size)));
                }
                set(0, EdgeShape::Decision { batch: m, k: cfg.k, n: cfg.n });
                set(1, EdgeShape::Tensor(vec![m, cfg.n]));
            }
            Op::Cache { .. } => {
                let cfg = block_cfg.expect("validated");
                let EdgeShape::Ids(m) = shapes[&inp[0]] else {
                    return Err(err("expects sample ids".into()));
                };
                let EdgeShape::Decision { batch, .. } = shapes[&inp[1]] else {
                    return Err(err("expects a gate decision".into()));
                };
                if m != batch {
                    return Err(err(format!("{m} ids for a decision over {batch} samples")));
                }
                set(0, EdgeShape::Routes { batch: m, k: cfg.k });
            }
            Op::GroupBy { block } => {
                let cfg = block_cfg.expect("validated");
                let (m, d) = matrix(spec, id, &shapes, inp[0])?;
                let EdgeShape::Decision { batch, .. } = shapes[&inp[1]] else {
                    return Err(err("second input must be a gate decision".into()));
                };
                if m != batch || m != cfg.batch_size {
                    return Err(err(format!(
                        "{m} rows, decision over {batch}, block batch {}",
                        cfg.batch_size
                    )));
                }
                if let Some(c) = inp.get(2) {
                    if !matches!(spec.nodes[c.node].op, Op::Cache { block: b } if b == *block) {
                        return Err(err("third input must be this block's Cache".into()));
                    }
                }
                for (e, &c) in capacities[*block].iter().enumerate() {
                    set(e, EdgeShape::Tensor(vec![c, d]));
                }
                set(cfg.n, EdgeShape::Assignment { batch: m, k: cfg.k, n: cfg.n });
            }
            Op::Aggregate { block } | Op::AggregateSpec { block } => {
                let cfg = block_cfg.expect("validated");
                if !matches!(shapes[&inp[0]], EdgeShape::Assignment { .. })
                    || !matches!(spec.nodes[inp[0].node].op, Op::GroupBy { block: b } if b == *block)
                {
                    return Err(err("first input must be this block's assignment".into()));
                }
                let (m, n) = matrix(spec, id, &shapes, inp[1])?;
                if n != cfg.n || m != cfg.batch_size {
                    return Err(err(format!("gate probabilities [{m} × {n}]")));
                }
                let mut cols = None;
                for (e, p) in inp[2..].iter().enumerate() {
                    let (rows, c) = matrix(spec, id, &shapes, *p)?;
                    if rows != capacities[*block][e] {
                        return Err(err(format!(
                            "expert {e} output has {rows} rows, capacity is {}",
                            capacities[*block][e]
                        )));
                    }
                    if *cols.get_or_insert(c) != c {
                        return Err(err(format!("expert {e} output width {c} differs")));
                    }
                }
                let c = cols.unwrap_or(0);
                if matches!(node.op, Op::Aggregate { .. }) {
                    set(0, EdgeShape::Tensor(vec![m, c]));
                } else {
                    set(
                        0,
                        EdgeShape::Spec {
                            batch: m,
                            k: cfg.k,
                            cols: c,
                            n: cfg.n,
                        },
                    );
                }
            }
            Op::CrossEntropy => {
                let (m, c) = matrix(spec, id, &shapes, inp[0])?;
                let EdgeShape::Labels { rows, classes } = shapes[&inp[1]] else {
                    return Err(err("second input must be labels".into()));
                };
                if rows != m || classes != c {
                    return Err(err(format!("[{m} × {c}] predictions vs {rows} labels of {classes} classes")));
                }
                set(0, EdgeShape::Tensor(vec![1]));
            }
            Op::SpecLoss { .. } => {
                let EdgeShape::Spec { batch, cols, .. } = shapes[&inp[0]] else {
                    return Err(err("first input must be an AggregateSpec output".into()));
                };
                let EdgeShape::Labels { rows, classes } = shapes[&inp[1]] else {
                    return Err(err("second input must be labels".into()));
                };
                if rows != batch || classes != cols {
                    return Err(err(format!("{batch} × {cols} predictions vs {rows} labels of {classes} classes")));
                }
                set(0, EdgeShape::Tensor(vec![1]));
            }
            Op::Balance { .. } => {
                let cfg = block_cfg.expect("validated");
                let (m, n) = matrix(spec, id, &shapes, inp[0])?;
                if !matches!(shapes[&inp[1]], EdgeShape::Decision { .. }) || n != cfg.n || m != cfg.batch_size {
                    return Err(err("expects gate probabilities and decision".into()));
                }
                set(0, EdgeShape::Tensor(vec![1]));
            }
        }
        for (port, s) in outs {
            shapes.insert(PortRef::new(id, port), s);
        }
    }
    Ok(Inferred {
        shapes,
        params,
        capacities,
    })
}

/// Indices of the inputs a node differentiates through.
pub(crate) fn differentiable_inputs(op: &Op) -> std::ops::Range<usize> {
    match op {
        Op::Linear { .. } | Op::Relu | Op::Softmax | Op::Mlp { .. } => 0..1,
        Op::GroupBy { .. } => 0..1,
        Op::Aggregate { .. } | Op::AggregateSpec { .. } => 1..usize::MAX,
        Op::CrossEntropy | Op::SpecLoss { .. } | Op::Balance { .. } => 0..1,
        _ => 0..0,
    }
}

fn grad_inputs(spec: &GraphSpec, node: NodeId, requires: &BTreeSet<PortRef>) -> Vec<PortRef> {
    let n = &spec.nodes[node];
    let range = differentiable_inputs(&n.op);
    n.inputs
        .iter()
        .enumerate()
        .filter(|(i, p)| range.contains(i) && requires.contains(p))
        .map(|(_, p)| *p)
        .collect()
}

fn requires_grad(spec: &GraphSpec, order: &[NodeId], shapes: &BTreeMap<PortRef, EdgeShape>) -> BTreeSet<PortRef> {
    let mut req = BTreeSet::new();
    for &id in order {
        let node = &spec.nodes[id];
        let flows = match node.op {
            Op::Linear { .. } | Op::Mlp { .. } => true,
            Op::Input { .. } | Op::Labels { .. } | Op::TopK { .. } | Op::FixedRouting { .. } | Op::Cache { .. } => false,
            _ => !grad_inputs(spec, id, &req).is_empty(),
        };
        if !flows {
            continue;
        }
        for p in shapes.keys().filter(|p| p.node == id) {
            let is_assignment = matches!(node.op, Op::GroupBy { block } if p.port == spec.blocks[block].capacity.n);
            if !is_assignment {
                req.insert(*p);
            }
        }
    }
    req
}

fn worker_of(placement: Placement, workers: usize) -> usize {
    match placement {
        Placement::Main => 0,
        Placement::Expert(i) if workers > 1 => 1 + i % (workers - 1),
        Placement::Expert(_) => 0,
    }
}

fn class_of(spec: &GraphSpec, node: NodeId) -> &'static str {
    let n = &spec.nodes[node];
    if n.op.is_dense() {
        match n.role {
            Role::Gate => "gate",
            Role::Expert(_) => "expert",
            Role::Main => n.op.name(),
        }
    } else {
        n.op.name()
    }
}

struct TaskBuilder {
    tasks: Vec<TaskDescriptor>,
    tracker: DepTracker<BufKey, usize>,
}

impl TaskBuilder {
    fn push(&mut self, kind: TaskKind, action: TaskAction, worker: usize, reads: Vec<BufKey>, writes: Vec<BufKey>, rows: usize) {
        let id = self.tasks.len();
        let mut deps = self.tracker.register(id, &reads, &writes);
        deps.retain(|&d| d != usize::MAX);
        self.tasks.push(TaskDescriptor {
            id,
            kind,
            action,
            worker,
            deps,
            reads,
            writes,
            rows,
        });
    }
}

fn edge_keys(ports: &[PortRef]) -> Vec<BufKey> {
    ports.iter().map(|p| BufKey::Edge(*p)).collect()
}

fn build_tasks(
    spec: &GraphSpec,
    order: &[NodeId],
    shapes: &BTreeMap<PortRef, EdgeShape>,
    requires: &BTreeSet<PortRef>,
    workers: usize,
    load_writes: &[BufKey],
) -> Vec<TaskDescriptor> {
    let mut b = TaskBuilder {
        tasks: Vec::new(),
        tracker: DepTracker::new(),
    };
    // The injected load task precedes every iteration; registering its writes
    // keeps in-iteration dependencies relative to it without emitting it.
    b.tracker.register(usize::MAX, &[], load_writes);
    let outputs_of = |id: NodeId| -> Vec<PortRef> { shapes.keys().filter(|p| p.node == id).copied().collect() };
    let rows_of = |id: NodeId| -> usize {
        let node = &spec.nodes[id];
        node.inputs
            .first()
            .and_then(|p| shapes[p].main())
            .and_then(|s| s.first().copied())
            .unwrap_or(spec.batch_size)
    };
    let param_keys = |id: NodeId| -> Vec<BufKey> { spec.nodes[id].params.iter().map(|p| BufKey::Param(*p)).collect() };

    for &id in order {
        let node = &spec.nodes[id];
        let worker = worker_of(node.placement, workers);
        let kind = TaskKind {
            phase: Phase::Forward,
            class: class_of(spec, id),
        };
        let outs = edge_keys(&outputs_of(id));
        match node.op {
            Op::Input { .. } | Op::Labels { .. } => {}
            Op::Cache { block } => {
                if spec.blocks[block].cache_enabled {
                    b.push(
                        TaskKind {
                            phase: Phase::Forward,
                            class: "cache_lookup",
                        },
                        TaskAction::CacheLookup(id),
                        worker,
                        vec![BufKey::Edge(node.inputs[0]), BufKey::CacheState(block)],
                        outs,
                        rows_of(id),
                    );
                }
            }
            _ => {
                let mut reads = edge_keys(&order_inputs(spec, id));
                reads.extend(param_keys(id));
                b.push(kind, TaskAction::Forward(id), worker, reads, outs, rows_of(id));
            }
        }
    }
    for &id in order {
        let node = &spec.nodes[id];
        if let Op::Cache { block } = node.op {
            b.push(
                TaskKind {
                    phase: Phase::Forward,
                    class: "cache_update",
                },
                TaskAction::CacheUpdate(id),
                worker_of(node.placement, workers),
                edge_keys(&node.inputs),
                vec![BufKey::CacheState(block)],
                rows_of(id),
            );
        }
    }
    let losses: Vec<NodeId> = order.iter().copied().filter(|&i| spec.nodes[i].op.is_loss()).collect();
    if !losses.is_empty() {
        let mut reads: Vec<BufKey> = losses.iter().map(|&i| BufKey::Edge(PortRef::new(i, 0))).collect();
        reads.push(BufKey::Edge(spec.output));
        if let Some(l) = spec.nodes.iter().position(|n| matches!(n.op, Op::Labels { .. })) {
            reads.push(BufKey::Edge(PortRef::new(l, 0)));
        }
        for (id, node) in spec.nodes.iter().enumerate() {
            match node.op {
                Op::GroupBy { block } => reads.push(BufKey::Edge(PortRef::new(id, spec.blocks[block].capacity.n))),
                Op::TopK { .. } | Op::FixedRouting { .. } => reads.push(BufKey::Edge(PortRef::new(id, 0))),
                Op::Cache { block } => reads.push(BufKey::CacheState(block)),
                _ => {}
            }
        }
        reads.sort();
        reads.dedup();
        b.push(TaskKind::METRIC, TaskAction::Metric, 0, reads, vec![], spec.batch_size);
    }
    for &id in order.iter().rev() {
        let node = &spec.nodes[id];
        let grads = grad_inputs(spec, id, requires);
        if node.params.is_empty() && grads.is_empty() {
            continue;
        }
        let mut writes = edge_keys(&grads);
        writes.extend(param_keys(id));
        let mut reads = edge_keys(&outputs_of(id));
        reads.extend(edge_keys(&node.inputs));
        reads.retain(|k| !writes.contains(k));
        b.push(
            TaskKind {
                phase: Phase::Backward,
                class: class_of(spec, id),
            },
            TaskAction::Backward(id),
            worker_of(node.placement, workers),
            reads,
            writes,
            rows_of(id),
        );
    }
    for &id in order {
        let node = &spec.nodes[id];
        if node.params.is_empty() {
            continue;
        }
        b.push(
            TaskKind {
                phase: Phase::Update,
                class: class_of(spec, id),
            },
            TaskAction::Update(id),
            worker_of(node.placement, workers),
            vec![],
            param_keys(id),
            rows_of(id),
        );
    }
    b.tasks
}

/// Xavier-uniform weights (biases zero) drawn from a stream keyed by the parameter id.
pub fn init_param(seed: u64, id: ParamId, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if shape.len() == 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(id.0));
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    t
}

fn assemble(
    spec: &GraphSpec,
    workers: usize,
    generation: u64,
    previous: Option<&PlanCore>,
) -> Result<(PlanCore, Vec<PortRef>, usize), CompileError> {
    validate(spec)?;
    if workers == 0 {
        return Err(CompileError::Shape {
            node: 0,
            op: "graph".into(),
            detail: "worker count must be at least 1".into(),
        });
    }
    let full = topo_order(spec, |id| spec.nodes[id].inputs.clone())?;
    let order = topo_order(spec, |id| order_inputs(spec, id))?;
    let inferred = infer(spec, &full)?;
    let requires = requires_grad(spec, &full, &inferred.shapes);

    let inputs: Vec<NodeId> = (0..spec.nodes.len())
        .filter(|&i| matches!(spec.nodes[i].op, Op::Input { .. }))
        .collect();
    let labels: Vec<NodeId> = (0..spec.nodes.len())
        .filter(|&i| matches!(spec.nodes[i].op, Op::Labels { .. }))
        .collect();
    if inputs.len() != 1 || labels.len() > 1 {
        return Err(CompileError::Shape {
            node: inputs.get(1).or(labels.get(1)).copied().unwrap_or(0),
            op: "graph".into(),
            detail: "expected one Input node and at most one Labels node".into(),
        });
    }
    let mut load_writes = vec![
        BufKey::Edge(PortRef::new(inputs[0], 0)),
        BufKey::Edge(PortRef::new(inputs[0], 1)),
    ];
    if let Some(&l) = labels.first() {
        load_writes.push(BufKey::Edge(PortRef::new(l, 0)));
    }

    let mut buffers = BTreeMap::new();
    let mut reallocated = Vec::new();
    let mut reused = 0;
    for (port, shape) in &inferred.shapes {
        let key = BufKey::Edge(*port);
        match previous {
            Some(prev) if prev.shapes.get(port) == Some(shape) => {
                buffers.insert(key, Arc::clone(prev.buffer(key)));
                reused += 1;
            }
            _ => {
                buffers.insert(key, Buffer::new(shape.allocate()));
                if previous.is_some() {
                    reallocated.push(*port);
                }
            }
        }
    }
    for (id, shape) in &inferred.params {
        let key = BufKey::Param(*id);
        let buf = match previous {
            Some(prev) => Arc::clone(prev.buffer(key)),
            None => Buffer::new(Value::Tensor(init_param(spec.init_seed, *id, shape))),
        };
        buffers.insert(key, buf);
    }
    for node in &spec.nodes {
        if let Op::Cache { block } = node.op {
            let key = BufKey::CacheState(block);
            let buf = match previous.and_then(|p| p.buffers.get(&key)) {
                Some(b) => Arc::clone(b),
                None => Buffer::new(Value::Cache(AssignmentCache::default())),
            };
            buffers.insert(key, buf);
        }
    }

    let tasks = build_tasks(spec, &order, &inferred.shapes, &requires, workers, &load_writes);
    let core = PlanCore {
        spec: spec.clone(),
        generation,
        workers,
        shapes: inferred.shapes,
        param_shapes: inferred.params,
        buffers,
        capacities: inferred.capacities,
        requires_grad: requires,
        order,
        tasks,
        input_node: inputs[0],
        labels_node: labels.first().copied(),
        load_writes,
    };
    Ok((core, reallocated, reused))
}

/// Allocates zeroed buffers, initializes parameters and orders the task list.
pub fn compile(spec: &GraphSpec, workers: usize) -> Result<CompiledPlan, CompileError> {
    let (core, _, _) = assemble(spec, workers, 0, None)?;
    Ok(CompiledPlan { core: Arc::new(core) })
}

fn check_edit(old: &GraphSpec, new: &GraphSpec) -> Result<(), CompileError> {
    let bad = |what: &str| Err(CompileError::UnsupportedEdit(what.to_string()));
    if old.nodes != new.nodes {
        return bad("operator nodes changed");
    }
    if old.output != new.output || old.batch_size != new.batch_size {
        return bad("graph output or batch size changed");
    }
    if old.init_seed != new.init_seed || old.learning_rate != new.learning_rate {
        return bad("initialization seed or learning rate changed");
    }
    if old.blocks.len() != new.blocks.len() {
        return bad("number of MoE blocks changed");
    }
    for (b, (o, n)) in old.blocks.iter().zip(&new.blocks).enumerate() {
        let (o, n) = (&o.capacity, &n.capacity);
        if o.batch_size != n.batch_size || o.k != n.k || o.n != n.n {
            return Err(CompileError::UnsupportedEdit(format!(
                "block {b}: only capacity factors and caching may change"
            )));
        }
    }
    Ok(())
}

/// Rebuilds the plan for `new_spec`, reusing every buffer whose shape is unchanged.
/// Parameters and cache state are always carried over.
pub fn recompile(plan: &CompiledPlan, new_spec: &GraphSpec) -> Result<(CompiledPlan, RecompileReport), CompileError> {
    check_edit(&plan.core.spec, new_spec)?;
    let generation = plan.core.generation + 1;
    let (core, reallocated, reused) = assemble(new_spec, plan.core.workers, generation, Some(&plan.core))?;
    let report = RecompileReport {
        generation,
        reallocated,
        reused,
    };
    Ok((CompiledPlan { core: Arc::new(core) }, report))
}

/// Edges whose shape differs between two plans.
pub fn changed_edges(a: &CompiledPlan, b: &CompiledPlan) -> Vec<PortRef> {
    let mut all: HashMap<PortRef, (Option<&EdgeShape>, Option<&EdgeShape>)> = HashMap::new();
    for (p, s) in &a.core.shapes {
        all.entry(*p).or_default().0 = Some(s);
    }
    for (p, s) in &b.core.shapes {
        all.entry(*p).or_default().1 = Some(s);
    }
    let mut out: Vec<PortRef> = all.into_iter().filter(|(_, (x, y))| x != y).map(|(p, _)| p).collect();
    out.sort();
    out
}

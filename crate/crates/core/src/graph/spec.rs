//! Declared operator graphs and a builder for MoE models.

use std::fmt;

use crate::tensor::ParamId;

pub type NodeId = usize;

/// One output port of a node; every port is an edge of the dataflow graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub node: NodeId,
    pub port: usize,
}

impl PortRef {
    pub const fn new(node: NodeId, port: usize) -> Self {
        Self { node, port }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node, self.port)
    }
}

/// What part of the model a node belongs to; names dense tasks (`fwd.gate`, `fwd.expert`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Main,
    Gate,
    Expert(usize),
}

/// Which device slot the node's tasks run on under expert parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    /// Worker 0, shared with the gating network.
    Main,
    /// Worker `1 + (i mod (W − 1))`.
    Expert(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Ports: 0 = features `[batch × features]`, 1 = sample ids.
    Input { features: usize },
    Labels { classes: usize },
    Linear { out: usize },
    Relu,
    Softmax,
    /// Dense stack with ReLU between layers and optional softmax head.
    Mlp {
        hidden: Vec<usize>,
        out: usize,
        softmax: bool,
    },
    /// Inputs: gate probabilities. Port 0: decision.
    TopK { block: usize },
    /// Frozen per-sample random routing with uniform weights.
    /// Inputs: sample ids. Ports: 0 = decision, 1 = constant uniform probabilities.
    FixedRouting { block: usize, seed: u64 },
    /// Inputs: sample ids, fresh decision. Port 0: routes read from last epoch.
    Cache { block: usize },
    /// Inputs: features, decision, optionally the cache node.
    /// Ports `0..n`: expert batches, port `n`: assignment.
    GroupBy { block: usize },
    /// Inputs: assignment, gate probabilities, expert outputs `0..n`.
    Aggregate { block: usize },
    /// Same inputs as `Aggregate`; port 0 holds concatenated per-expert predictions.
    AggregateSpec { block: usize },
    /// Inputs: probabilities, labels.
    CrossEntropy,
    /// Inputs: AggregateSpec output, labels.
    SpecLoss { block: usize },
    /// Inputs: gate probabilities, decision.
    Balance { block: usize, lambda: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Labels { .. } => "labels",
            Op::Linear { .. } => "linear",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Mlp { .. } => "mlp",
            Op::TopK { .. } => "topk",
            Op::FixedRouting { .. } => "fixed_routing",
            Op::Cache { .. } => "cache",
            Op::GroupBy { .. } => "groupby",
            Op::Aggregate { .. } => "aggregate",
            Op::AggregateSpec { .. } => "aggregate_spec",
            Op::CrossEntropy => "cross_entropy",
            Op::SpecLoss { .. } => "spec_loss",
            Op::Balance { .. } => "balance",
        }
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, Op::CrossEntropy | Op::SpecLoss { .. } | Op::Balance { .. })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Op::Linear { .. } | Op::Relu | Op::Softmax | Op::Mlp { .. })
    }

    pub fn block(&self) -> Option<usize> {
        match *self {
            Op::TopK { block }
            | Op::FixedRouting { block, .. }
            | Op::Cache { block }
            | Op::GroupBy { block }
            | Op::Aggregate { block }
            | Op::AggregateSpec { block }
            | Op::SpecLoss { block }
            | Op::Balance { block, .. } => Some(block),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<PortRef>,
    pub role: Role,
    pub placement: Placement,
    pub params: Vec<ParamId>,
}

/// Inputs to the expert-capacity formula for one MoE block.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityConfig {
    pub batch_size: usize,
    pub k: usize,
    pub n: usize,
    /// Capacity factor per expert.
    pub alpha: Vec<f64>,
}

impl CapacityConfig {
    pub fn uniform(batch_size: usize, k: usize, n: usize, alpha: f64) -> Self {
        Self {
            batch_size,
            k,
            n,
            alpha: vec![alpha; n],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.k == 0 || self.k > self.n {
            return Err(format!("k = {} must satisfy 1 <= k <= n = {}", self.k, self.n));
        }
        if self.alpha.len() != self.n {
            return Err(format!("expected {} capacity factors, got {}", self.n, self.alpha.len()));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(format!("capacity factor {a} must be positive"));
        }
        Ok(())
    }

    pub fn capacities(&self) -> Vec<usize> {
        (0..self.n).map(|e| expert_capacity(self, e)).collect()
    }

    /// Capacity factor whose capacity is exactly `capacity`.
    pub fn alpha_for(&self, capacity: usize) -> f64 {
        capacity as f64 * self.n as f64 / (self.batch_size * self.k) as f64
    }
}

/// `ceil(α_e · batch_size · k / n)`, at least 1.
///
/// Values within `1e-9` (relative) of an integer snap to it, so a factor
/// produced by [`CapacityConfig::alpha_for`] maps back to the same capacity.
pub fn expert_capacity(cfg: &CapacityConfig, expert: usize) -> usize {
    let raw = cfg.alpha[expert] * cfg.batch_size as f64 * cfg.k as f64 / cfg.n as f64;
    let nearest = raw.round();
    let value = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (value as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlock {
    pub capacity: CapacityConfig,
    pub cache_enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub nodes: Vec<Node>,
    pub blocks: Vec<MoeBlock>,
    pub batch_size: usize,
    /// The model prediction (used for accuracy).
    pub output: PortRef,
    pub init_seed: u64,
    pub learning_rate: f64,
}

impl GraphSpec {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn set_alpha(&mut self, block: usize, alpha: Vec<f64>) {
        self.blocks[block].capacity.alpha = alpha;
    }

    pub fn set_cache_enabled(&mut self, block: usize, enabled: bool) {
        self.blocks[block].cache_enabled = enabled;
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.params.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateKind {
    /// Learned gate network (dense layers + softmax) followed by TopK.
    Learned { hidden: Vec<usize> },
    /// Frozen random routing with uniform weights.
    FixedUniform { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOptions {
    pub n: usize,
    pub k: usize,
    pub alpha: Vec<f64>,
    /// Rows entering the block.
    pub batch_size: usize,
    pub gate: GateKind,
    /// Adds a Cache node so caching can be toggled by recompilation.
    pub with_cache: bool,
    pub cache_enabled: bool,
    /// Emit an AggregateSpec output for the specification loss.
    pub spec_output: bool,
    /// Balance weight; `None` adds no balance node.
    pub balance_lambda: Option<f64>,
    /// Forces every node of the block onto one expert slot (nested blocks).
    pub pin: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeHandles {
    pub block: usize,
    pub probs: PortRef,
    pub decision: PortRef,
    pub groupby: NodeId,
    pub output: PortRef,
    pub spec: Option<PortRef>,
    pub balance: Option<PortRef>,
}

#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    blocks: Vec<MoeBlock>,
    batch_size: usize,
    next_param: u32,
}

impl GraphBuilder {
    pub fn new(batch_size: usize) -> Self {
        Self {
            nodes: Vec::new(),
            blocks: Vec::new(),
            batch_size,
            next_param: 0,
        }
    }

    pub fn add(&mut self, op: Op, inputs: Vec<PortRef>, role: Role, placement: Placement) -> NodeId {
        let param_count = match &op {
            Op::Linear { .. } => 2,
            Op::Mlp { hidden, .. } => 2 * (hidden.len() + 1),
            _ => 0,
        };
        let params = (0..param_count)
            .map(|_| {
                let id = ParamId(self.next_param);
                self.next_param += 1;
                id
            })
            .collect();
        self.nodes.push(Node {
            op,
            inputs,
            role,
            placement,
            params,
        });
        self.nodes.len() - 1
    }

    /// Skips `count` parameter ids. Initialization is keyed by id, so this lets
    /// later nodes share initial weights with a variant that has more parameters.
    pub fn reserve_params(&mut self, count: usize) {
        self.next_param += count as u32;
    }

    /// Returns `(features, sample_ids)`.
    pub fn input(&mut self, features: usize) -> (PortRef, PortRef) {
        let id = self.add(Op::Input { features }, vec![], Role::Main, Placement::Main);
        (PortRef::new(id, 0), PortRef::new(id, 1))
    }

    pub fn labels(&mut self, classes: usize) -> PortRef {
        let id = self.add(Op::Labels { classes }, vec![], Role::Main, Placement::Main);
        PortRef::new(id, 0)
    }

    pub fn linear(&mut self, x: PortRef, out: usize) -> PortRef {
        PortRef::new(self.add(Op::Linear { out }, vec![x], Role::Main, Placement::Main), 0)
    }

    pub fn relu(&mut self, x: PortRef) -> PortRef {
        PortRef::new(self.add(Op::Relu, vec![x], Role::Main, Placement::Main), 0)
    }

    pub fn softmax(&mut self, x: PortRef) -> PortRef {
        PortRef::new(self.add(Op::Softmax, vec![x], Role::Main, Placement::Main), 0)
    }

    pub fn mlp(
        &mut self,
        x: PortRef,
        hidden: &[usize],
        out: usize,
        softmax: bool,
        role: Role,
        placement: Placement,
    ) -> PortRef {
        let op = Op::Mlp {
            hidden: hidden.to_vec(),
            out,
            softmax,
        };
        PortRef::new(self.add(op, vec![x], role, placement), 0)
    }

    pub fn cross_entropy(&mut self, probs: PortRef, labels: PortRef) -> PortRef {
        PortRef::new(
            self.add(Op::CrossEntropy, vec![probs, labels], Role::Main, Placement::Main),
            0,
        )
    }

    pub fn spec_loss(&mut self, spec: PortRef, labels: PortRef, block: usize) -> PortRef {
        PortRef::new(
            self.add(Op::SpecLoss { block }, vec![spec, labels], Role::Main, Placement::Main),
            0,
        )
    }

    /// Builds Gate → TopK → (Cache) → GroupBy → experts → Aggregate (+ AggregateSpec).
    ///
    /// `expert` receives the builder, the expert index and that expert's input
    /// batch, and returns the expert's prediction port.
    pub fn moe<F>(&mut self, x: PortRef, ids: PortRef, opts: &MoeOptions, mut expert: F) -> MoeHandles
    where
        F: FnMut(&mut GraphBuilder, usize, PortRef) -> PortRef,
    {
        let block = self.blocks.len();
        self.blocks.push(MoeBlock {
            capacity: CapacityConfig {
                batch_size: opts.batch_size,
                k: opts.k,
                n: opts.n,
                alpha: opts.alpha.clone(),
            },
            cache_enabled: opts.cache_enabled,
        });
        let main = match opts.pin {
            Some(i) => Placement::Expert(i),
            None => Placement::Main,
        };
        let (probs, decision) = match &opts.gate {
            GateKind::Learned { hidden } => {
                let probs = self.mlp(x, hidden, opts.n, true, Role::Gate, main);
                let topk = self.add(Op::TopK { block }, vec![probs], Role::Gate, main);
                (probs, PortRef::new(topk, 0))
            }
            GateKind::FixedUniform { seed } => {
                let fixed = self.add(Op::FixedRouting { block, seed: *seed }, vec![ids], Role::Gate, main);
                (PortRef::new(fixed, 1), PortRef::new(fixed, 0))
            }
        };
        let mut gb_inputs = vec![x, decision];
        if opts.with_cache {
            let cache = self.add(Op::Cache { block }, vec![ids, decision], Role::Main, main);
            gb_inputs.push(PortRef::new(cache, 0));
        }
        let groupby = self.add(Op::GroupBy { block }, gb_inputs, Role::Main, main);
        let mut outs = Vec::with_capacity(opts.n);
        for e in 0..opts.n {
            outs.push(expert(self, e, PortRef::new(groupby, e)));
        }
        let mut agg_inputs = vec![PortRef::new(groupby, opts.n), probs];
        agg_inputs.extend(&outs);
        let agg = self.add(Op::Aggregate { block }, agg_inputs.clone(), Role::Main, main);
        let spec = opts.spec_output.then(|| {
            PortRef::new(
                self.add(Op::AggregateSpec { block }, agg_inputs, Role::Main, main),
                0,
            )
        });
        let balance = opts.balance_lambda.map(|lambda| {
            PortRef::new(
                self.add(Op::Balance { block, lambda }, vec![probs, decision], Role::Main, main),
                0,
            )
        });
        MoeHandles {
            block,
            probs,
            decision,
            groupby,
            output: PortRef::new(agg, 0),
            spec,
            balance,
        }
    }

    pub fn finish(self, output: PortRef, init_seed: u64, learning_rate: f64) -> GraphSpec {
        GraphSpec {
            nodes: self.nodes,
            blocks: self.blocks,
            batch_size: self.batch_size,
            output,
            init_seed,
            learning_rate,
        }
    }
}

//! Task bodies: each runs one node's forward, backward or update step against
//! the plan's shared buffers.

use std::sync::{Arc, RwLockReadGuard, RwLockWriteGuard};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::RuntimeError;
use crate::graph::buffer::{BufKey, Value};
use crate::graph::plan::{PlanCore, TaskAction};
use crate::graph::spec::{NodeId, Op, PortRef};
use crate::kernels::{
    cross_entropy, cross_entropy_bwd, linear_backward, linear_into, relu_backward, relu_into, sgd_update,
    softmax_backward, softmax_into,
};
use crate::losses::{accuracy, balance_backward_into, balance_term, specification_loss, specification_loss_backward_into, BatchStats};
use crate::moe::{
    aggregate_backward_into, aggregate_into, aggregate_spec_backward_into, aggregate_spec_into, cache_lookup,
    cache_step, gather_expert_batch, groupby_backward_into, place, resolve_routes, topk_backward_into, topk_fwd,
    GateDecision,
};
use crate::runtime::metrics::{MetricBoard, MetricRecord};
use crate::tensor::{ParamId, Tensor};

/// One mini-batch as delivered by the data pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<u64>,
    pub epoch: u64,
}

/// Per-iteration context handed to every task instance.
#[derive(Debug, Clone)]
pub struct IterCtx {
    pub iteration: u64,
    pub epoch: u64,
    pub generation: u64,
    pub board: Arc<MetricBoard>,
}

type KResult = Result<(), String>;

fn tensor(v: &Value) -> Result<&Tensor, String> {
    v.tensor().ok_or_else(|| "expected a tensor buffer".to_string())
}

fn tensor_mut(v: &mut Value) -> Result<&mut Tensor, String> {
    v.tensor_mut().ok_or_else(|| "expected a tensor buffer".to_string())
}

macro_rules! expect_value {
    ($v:expr, $pat:pat => $out:expr) => {
        match $v {
            $pat => $out,
            _ => return Err(format!("unexpected buffer payload at {}:{}", file!(), line!())),
        }
    };
}

struct Ctx<'a> {
    core: &'a PlanCore,
    id: NodeId,
}

impl<'a> Ctx<'a> {
    fn input(&self, i: usize) -> PortRef {
        self.core.spec.nodes[self.id].inputs[i]
    }

    fn read_in(&self, i: usize) -> RwLockReadGuard<'a, Value> {
        self.core.edge(self.input(i)).read()
    }

    fn write_in(&self, i: usize) -> RwLockWriteGuard<'a, Value> {
        self.core.edge(self.input(i)).write()
    }

    fn read_out(&self, port: usize) -> RwLockReadGuard<'a, Value> {
        self.core.edge(PortRef::new(self.id, port)).read()
    }

    fn write_out(&self, port: usize) -> RwLockWriteGuard<'a, Value> {
        self.core.edge(PortRef::new(self.id, port)).write()
    }

    fn needs_grad(&self, i: usize) -> bool {
        self.core.requires_grad.contains(&self.input(i))
    }

    fn param(&self, i: usize) -> ParamId {
        self.core.spec.nodes[self.id].params[i]
    }

    fn read_param(&self, i: usize) -> RwLockReadGuard<'a, Value> {
        self.core.buffer(BufKey::Param(self.param(i))).read()
    }

    fn write_param(&self, i: usize) -> RwLockWriteGuard<'a, Value> {
        self.core.buffer(BufKey::Param(self.param(i))).write()
    }
}

/// Writes the batch into the input, id and label buffers.
pub fn run_load(core: &PlanCore, batch: &Batch) -> Result<(), RuntimeError> {
    load(core, batch).map_err(|message| RuntimeError::Task {
        task: u64::MAX,
        kind: "load".into(),
        message,
    })
}

fn load(core: &PlanCore, batch: &Batch) -> KResult {
    let fail = |m: String| m;
    let input = core.input_node;
    {
        let mut x = core.edge(PortRef::new(input, 0)).write();
        let x = tensor_mut(&mut x).map_err(fail)?;
        if x.shape() != batch.x.shape() {
            return Err(fail(format!(
                "batch features {:?} do not match input {:?}",
                batch.x.shape(),
                x.shape()
            )));
        }
        x.data_mut().copy_from_slice(batch.x.data());
        x.zero_grad();
    }
    {
        let mut ids = core.edge(PortRef::new(input, 1)).write();
        let ids = expect_value!(&mut *ids, Value::Ids(v) => v);
        if ids.len() != batch.sample_ids.len() {
            return Err(fail(format!("{} sample ids for batch {}", batch.sample_ids.len(), ids.len())));
        }
        ids.copy_from_slice(&batch.sample_ids);
    }
    if let Some(l) = core.labels_node {
        let mut labels = core.edge(PortRef::new(l, 0)).write();
        let labels = expect_value!(&mut *labels, Value::Labels(v) => v);
        if labels.len() != batch.labels.len() {
            return Err(fail(format!("{} labels for batch {}", batch.labels.len(), labels.len())));
        }
        labels.copy_from_slice(&batch.labels);
    }
    Ok(())
}

/// Runs task `index` of `core`.
pub fn run_task(core: &PlanCore, index: usize, ctx: &IterCtx) -> Result<(), RuntimeError> {
    let task = &core.tasks[index];
    let result = match task.action {
        TaskAction::Forward(id) => forward(&Ctx { core, id }),
        TaskAction::CacheLookup(id) => lookup(&Ctx { core, id }),
        TaskAction::CacheUpdate(id) => update_cache(&Ctx { core, id }),
        TaskAction::Metric => return metric(core, ctx),
        TaskAction::Backward(id) => backward(&Ctx { core, id }),
        TaskAction::Update(id) => update(&Ctx { core, id }),
    };
    result.map_err(|message| RuntimeError::Task {
        task: index as u64,
        kind: task.kind.to_string(),
        message,
    })
}

fn mlp_forward(c: &Ctx<'_>, hidden_sizes: &[usize], softmax: bool) -> KResult {
    let x = c.read_in(0);
    let x = tensor(&x)?;
    let mut outv = c.write_out(0);
    let (out, hidden) = expect_value!(&mut *outv, Value::Mlp { out, hidden } => (out, hidden));
    let m = x.rows();
    let layers = hidden_sizes.len() + 1;
    let mut act: Vec<f64> = x.data().to_vec();
    let mut p = x.cols();
    for l in 0..layers {
        let w = c.read_param(2 * l);
        let b = c.read_param(2 * l + 1);
        let (w, b) = (tensor(&w)?, tensor(&b)?);
        let q = w.shape()[1];
        let mut z = vec![0.0; m * q];
        linear_into(&act, w.data(), b.data(), &mut z, m, p, q);
        if l + 1 < layers {
            let h = &mut hidden[l];
            relu_into(&z, h.data_mut());
            h.zero_grad();
            act = h.data().to_vec();
        } else if softmax {
            softmax_into(&z, out.data_mut(), q).map_err(|e| e.to_string())?;
        } else {
            out.data_mut().copy_from_slice(&z);
        }
        p = q;
    }
    out.zero_grad();
    Ok(())
}


/// Runs `f` on an input's data and, when the input takes a gradient, its gradient slice.
fn with_input<R>(c: &Ctx<'_>, i: usize, f: impl FnOnce(&[f64], Option<&mut [f64]>) -> Result<R, String>) -> Result<R, String> {
    if c.needs_grad(i) {
        let mut guard = c.write_in(i);
        let (data, grad) = tensor_mut(&mut guard)?.data_and_grad_mut();
        f(data, Some(grad))
    } else {
        let guard = c.read_in(i);
        f(tensor(&guard)?.data(), None)
    }
}

fn mlp_backward(c: &Ctx<'_>, softmax: bool) -> KResult {
    let outv = c.read_out(0);
    let (out, hidden) = expect_value!(&*outv, Value::Mlp { out, hidden } => (out, hidden));
    let (m, q_out) = (out.rows(), out.cols());
    let mut g = vec![0.0; m * q_out];
    if softmax {
        softmax_backward(out.data(), out.grad(), &mut g, q_out);
    } else {
        g.copy_from_slice(out.grad());
    }
    let layers = hidden.len() + 1;
    with_input(c, 0, |x, mut gx| {
        for l in (0..layers).rev() {
            let mut wg = c.write_param(2 * l);
            let mut bg = c.write_param(2 * l + 1);
            let w = tensor_mut(&mut wg)?;
            let (p, q) = (w.shape()[0], w.shape()[1]);
            let (wd, wgrad) = w.data_and_grad_mut();
            let bgrad = tensor_mut(&mut bg)?.grad_mut();
            if l == 0 {
                linear_backward(x, wd, &g, gx.as_deref_mut(), wgrad, bgrad, m, p, q);
            } else {
                let prev = hidden[l - 1].data();
                let mut ga = vec![0.0; m * p];
                linear_backward(prev, wd, &g, Some(&mut ga), wgrad, bgrad, m, p, q);
                let mut gz = vec![0.0; m * p];
                relu_backward(prev, &ga, &mut gz);
                g = gz;
            }
        }
        Ok(())
    })
}

fn fixed_routes(ids: &[u64], seed: u64, n: usize, k: usize) -> Vec<usize> {
    let mut routes = Vec::with_capacity(ids.len() * k);
    for &id in ids {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        routes.extend(sample(&mut rng, n, k));
    }
    routes
}

fn read_tensors<'a>(c: &Ctx<'a>, range: std::ops::Range<usize>) -> Vec<RwLockReadGuard<'a, Value>> {
    range.map(|i| c.read_in(i)).collect()
}

fn refs<'g>(guards: &'g [RwLockReadGuard<'_, Value>]) -> Result<Vec<&'g Tensor>, String> {
    guards.iter().map(|g| tensor(g)).collect()
}

/// Adds `grad` into the gradient of input `i`.
fn accumulate_input(c: &Ctx<'_>, i: usize, grad: &[f64]) -> KResult {
    let mut guard = c.write_in(i);
    for (o, &v) in tensor_mut(&mut guard)?.grad_mut().iter_mut().zip(grad) {
        *o += v;
    }
    Ok(())
}

fn forward(c: &Ctx<'_>) -> KResult {
    let core = c.core;
    let node = &core.spec.nodes[c.id];
    match &node.op {
        Op::Input { .. } | Op::Labels { .. } => Ok(()),
        Op::Linear { .. } => {
            let x = c.read_in(0);
            let x = tensor(&x)?;
            let (w, b) = (c.read_param(0), c.read_param(1));
            let (w, b) = (tensor(&w)?, tensor(&b)?);
            let mut y = c.write_out(0);
            let y = tensor_mut(&mut y)?;
            let (m, p, q) = (x.rows(), x.cols(), w.shape()[1]);
            linear_into(x.data(), w.data(), b.data(), y.data_mut(), m, p, q);
            y.zero_grad();
            Ok(())
        }
        Op::Relu | Op::Softmax => {
            let x = c.read_in(0);
            let x = tensor(&x)?;
            let mut y = c.write_out(0);
            let y = tensor_mut(&mut y)?;
            if matches!(node.op, Op::Relu) {
                relu_into(x.data(), y.data_mut());
            } else {
                softmax_into(x.data(), y.data_mut(), x.cols()).map_err(|e| e.to_string())?;
            }
            y.zero_grad();
            Ok(())
        }
        Op::Mlp { hidden, softmax, .. } => mlp_forward(c, hidden, *softmax),
        Op::TopK { block } => {
            let k = core.spec.blocks[*block].capacity.k;
            let probs = c.read_in(0);
            let decision = topk_fwd(tensor(&probs)?, k).map_err(|e| e.to_string())?;
            *c.write_out(0) = Value::Decision(decision);
            Ok(())
        }
        Op::FixedRouting { block, seed } => {
            let cfg = &core.spec.blocks[*block].capacity;
            let ids = c.read_in(0);
            let ids = expect_value!(&*ids, Value::Ids(v) => v);
            let routes = fixed_routes(ids, *seed, cfg.n, cfg.k);
            let mut probs = c.write_out(1);
            let probs = tensor_mut(&mut probs)?;
            probs.fill(1.0 / cfg.n as f64);
            probs.zero_grad();
            *c.write_out(0) = Value::Decision(GateDecision::from_routes(probs.data(), cfg.n, &routes, cfg.k));
            Ok(())
        }
        Op::Cache { .. } => lookup(c),
        Op::GroupBy { block } => {
            let b = &core.spec.blocks[*block];
            let (k, n) = (b.capacity.k, b.capacity.n);
            let x = c.read_in(0);
            let x = tensor(&x)?;
            let (routes, routed) = if b.cache_enabled {
                let cached = c.read_in(2);
                let cached = expect_value!(&*cached, Value::Routes(r) => r);
                // A miss stays unrouted: the gate is not consulted, so the
                // dependency on it remains cut.
                resolve_routes(cached, None)
            } else {
                let d = c.read_in(1);
                let d = expect_value!(&*d, Value::Decision(d) => d);
                (d.indices.clone(), vec![true; d.batch])
            };
            let assignment = place(&routes, &routed, k, &core.capacities[*block]);
            for e in 0..n {
                let mut out = c.write_out(e);
                gather_expert_batch(x, &assignment, e, tensor_mut(&mut out)?);
            }
            *c.write_out(n) = Value::Assignment(assignment);
            Ok(())
        }
        Op::Aggregate { block } | Op::AggregateSpec { block } => {
            let n = core.spec.blocks[*block].capacity.n;
            let asg = c.read_in(0);
            let asg = expect_value!(&*asg, Value::Assignment(a) => a);
            let probs = c.read_in(1);
            let probs = tensor(&probs)?;
            let outs = read_tensors(c, 2..2 + n);
            let outs = refs(&outs)?;
            let decision = GateDecision::from_routes(probs.data(), n, &asg.routes, asg.k);
            let mut y = c.write_out(0);
            match &mut *y {
                Value::Tensor(y) => {
                    aggregate_into(&outs, &decision, asg, y);
                    y.zero_grad();
                }
                Value::Spec {
                    concat,
                    decision: stored,
                    grad_weights,
                } => {
                    aggregate_spec_into(&outs, asg, concat);
                    grad_weights.iter_mut().for_each(|g| *g = 0.0);
                    *stored = decision;
                }
                _ => return Err("aggregate output has the wrong payload".into()),
            }
            Ok(())
        }
        Op::CrossEntropy => {
            let probs = c.read_in(0);
            let labels = c.read_in(1);
            let labels = expect_value!(&*labels, Value::Labels(l) => l);
            let loss = cross_entropy(tensor(&probs)?, labels).map_err(|e| e.to_string())?;
            write_scalar(c, loss)
        }
        Op::SpecLoss { block } => {
            let k = core.spec.blocks[*block].capacity.k;
            let spec = c.read_in(0);
            let (concat, decision) = expect_value!(&*spec, Value::Spec { concat, decision, .. } => (concat, decision));
            let labels = c.read_in(1);
            let labels = expect_value!(&*labels, Value::Labels(l) => l);
            let loss = specification_loss(labels, concat, &decision.weights, k).map_err(|e| e.to_string())?;
            write_scalar(c, loss)
        }
        Op::Balance { block, lambda } => {
            let n = core.spec.blocks[*block].capacity.n;
            let d = c.read_in(1);
            let d = expect_value!(&*d, Value::Decision(d) => d);
            let stats = BatchStats::from_decision(d, 0, 0.0);
            write_scalar(c, balance_term(&stats, *lambda, n))
        }
    }
}

/// Loss outputs seed their own gradient with 1.
fn write_scalar(c: &Ctx<'_>, value: f64) -> KResult {
    let mut out = c.write_out(0);
    let t = tensor_mut(&mut out)?;
    t.data_mut()[0] = value;
    t.grad_mut()[0] = 1.0;
    Ok(())
}

fn lookup(c: &Ctx<'_>) -> KResult {
    let Op::Cache { block } = c.core.spec.nodes[c.id].op else {
        return Err("not a cache node".into());
    };
    let k = c.core.spec.blocks[block].capacity.k;
    let ids = c.read_in(0);
    let ids = expect_value!(&*ids, Value::Ids(v) => v);
    let state = c.core.buffer(BufKey::CacheState(block)).read();
    let state = expect_value!(&*state, Value::Cache(s) => s);
    *c.write_out(0) = Value::Routes(cache_lookup(state, ids, k));
    Ok(())
}

fn update_cache(c: &Ctx<'_>) -> KResult {
    let Op::Cache { block } = c.core.spec.nodes[c.id].op else {
        return Err("not a cache node".into());
    };
    let ids = c.read_in(0);
    let ids = expect_value!(&*ids, Value::Ids(v) => v);
    let d = c.read_in(1);
    let d = expect_value!(&*d, Value::Decision(d) => d);
    let mut state = c.core.buffer(BufKey::CacheState(block)).write();
    let state = expect_value!(&mut *state, Value::Cache(s) => s);
    cache_step(state, d, ids);
    Ok(())
}

fn scalar_grad(c: &Ctx<'_>) -> Result<f64, String> {
    Ok(tensor(&c.read_out(0))?.grad()[0])
}

fn backward(c: &Ctx<'_>) -> KResult {
    let core = c.core;
    let node = &core.spec.nodes[c.id];
    match &node.op {
        Op::Linear { .. } => {
            let y = c.read_out(0);
            let y = tensor(&y)?;
            with_input(c, 0, |x, gx| {
                let mut wg = c.write_param(0);
                let mut bg = c.write_param(1);
                let w = tensor_mut(&mut wg)?;
                let (p, q) = (w.shape()[0], w.shape()[1]);
                let m = y.rows();
                let (wd, wgrad) = w.data_and_grad_mut();
                linear_backward(x, wd, y.grad(), gx, wgrad, tensor_mut(&mut bg)?.grad_mut(), m, p, q);
                Ok(())
            })
        }
        Op::Relu | Op::Softmax => {
            let y = c.read_out(0);
            let y = tensor(&y)?;
            let relu = matches!(node.op, Op::Relu);
            with_input(c, 0, |x, gx| {
                if let Some(gx) = gx {
                    if relu {
                        relu_backward(x, y.grad(), gx);
                    } else {
                        softmax_backward(y.data(), y.grad(), gx, y.cols());
                    }
                }
                Ok(())
            })
        }
        Op::Mlp { softmax, .. } => mlp_backward(c, *softmax),
        Op::GroupBy { block } => {
            let n = core.spec.blocks[*block].capacity.n;
            let asg = c.read_out(n);
            let asg = expect_value!(&*asg, Value::Assignment(a) => a);
            let batches: Vec<_> = (0..n).map(|e| c.read_out(e)).collect();
            let batches = refs(&batches)?;
            let grads: Vec<&[f64]> = batches.iter().map(|t| t.grad()).collect();
            let d = batches.first().map_or(0, |t| t.cols());
            with_input(c, 0, |_, gx| {
                if let Some(gx) = gx {
                    groupby_backward_into(asg, &grads, d, gx);
                }
                Ok(())
            })
        }
        Op::Aggregate { block } | Op::AggregateSpec { block } => {
            let n = core.spec.blocks[*block].capacity.n;
            let asg = c.read_in(0);
            let asg = expect_value!(&*asg, Value::Assignment(a) => a);
            let y = c.read_out(0);
            let mut expert_grads: Vec<Vec<f64>> = (0..n)
                .map(|e| core.shapes[&c.input(2 + e)].main().map_or(0, |s| s.iter().product()))
                .map(|len| vec![0.0; len])
                .collect();
            let (decision, grad_w) = {
                let mut views: Vec<&mut [f64]> = expert_grads.iter_mut().map(Vec::as_mut_slice).collect();
                match &*y {
                    Value::Tensor(y) => {
                        let probs = c.read_in(1);
                        let probs = tensor(&probs)?;
                        let decision = GateDecision::from_routes(probs.data(), n, &asg.routes, asg.k);
                        let outs = read_tensors(c, 2..2 + n);
                        let outs = refs(&outs)?;
                        let gw = aggregate_backward_into(&outs, &decision, asg, y.grad(), &mut views);
                        (decision, gw)
                    }
                    Value::Spec {
                        concat,
                        decision,
                        grad_weights,
                    } => {
                        aggregate_spec_backward_into(asg, concat.preds.grad(), concat.preds.cols(), &mut views);
                        (decision.clone(), grad_weights.clone())
                    }
                    _ => return Err("aggregate output has the wrong payload".into()),
                }
            };
            for (e, g) in expert_grads.iter().enumerate() {
                if c.needs_grad(2 + e) {
                    accumulate_input(c, 2 + e, g)?;
                }
            }
            if c.needs_grad(1) {
                let mut probs = c.write_in(1);
                topk_backward_into(&decision, &grad_w, tensor_mut(&mut probs)?.grad_mut());
            }
            Ok(())
        }
        Op::CrossEntropy => {
            let scale = scalar_grad(c)?;
            let labels = c.read_in(1);
            let labels = expect_value!(&*labels, Value::Labels(l) => l);
            let mut probs = c.write_in(0);
            cross_entropy_bwd(tensor_mut(&mut probs)?, labels, scale).map_err(|e| e.to_string())
        }
        Op::SpecLoss { block } => {
            let k = core.spec.blocks[*block].capacity.k;
            let scale = scalar_grad(c)?;
            let labels = c.read_in(1);
            let labels = expect_value!(&*labels, Value::Labels(l) => l);
            let mut spec = c.write_in(0);
            let (concat, decision, grad_weights) = expect_value!(
                &mut *spec,
                Value::Spec { concat, decision, grad_weights } => (concat, decision, grad_weights)
            );
            specification_loss_backward_into(labels, concat, &decision.weights, k, scale, grad_weights)
                .map_err(|e| e.to_string())
        }
        Op::Balance { lambda, .. } => {
            let scale = scalar_grad(c)?;
            let d = c.read_in(1);
            let d = expect_value!(&*d, Value::Decision(d) => d);
            let stats = BatchStats::from_decision(d, 0, 0.0);
            let mut probs = c.write_in(0);
            balance_backward_into(&stats.token_fractions, lambda * scale, d.batch, tensor_mut(&mut probs)?.grad_mut());
            Ok(())
        }
        Op::Input { .. } | Op::Labels { .. } | Op::TopK { .. } | Op::FixedRouting { .. } | Op::Cache { .. } => Ok(()),
    }
}

fn update(c: &Ctx<'_>) -> KResult {
    let lr = c.core.spec.learning_rate;
    for i in 0..c.core.spec.nodes[c.id].params.len() {
        let mut p = c.write_param(i);
        let t = tensor_mut(&mut p)?;
        sgd_update(t, lr);
        t.zero_grad();
    }
    Ok(())
}

fn metric(core: &PlanCore, ctx: &IterCtx) -> Result<(), RuntimeError> {
    let spec = &core.spec;
    let fail = |m: String| RuntimeError::Task {
        task: u64::MAX,
        kind: "metric".into(),
        message: m,
    };
    let scalar = |id: NodeId| -> f64 {
        core.edge(PortRef::new(id, 0))
            .read()
            .tensor()
            .map_or(f64::NAN, |t| t.data()[0])
    };
    let mut task_loss = 0.0;
    let mut balance = 0.0;
    for (id, node) in spec.nodes.iter().enumerate() {
        match node.op {
            Op::CrossEntropy | Op::SpecLoss { .. } => task_loss += scalar(id),
            Op::Balance { .. } => balance += scalar(id),
            _ => {}
        }
    }
    let loss = task_loss + balance;
    if !loss.is_finite() {
        return Err(RuntimeError::Diverged {
            iteration: ctx.iteration,
        });
    }
    let acc = match core.labels_node {
        Some(l) => {
            let labels = core.edge(PortRef::new(l, 0)).read();
            let out = core.edge(spec.output).read();
            match (&*labels, out.tensor()) {
                (Value::Labels(labels), Some(t)) if t.rows() == labels.len() => accuracy(t, labels),
                _ => f64::NAN,
            }
        }
        None => f64::NAN,
    };
    let blocks = spec.blocks.len();
    let mut counts = vec![Vec::new(); blocks];
    let mut token_fractions = vec![Vec::new(); blocks];
    let mut drops = vec![0usize; blocks];
    let mut hits = vec![0.0; blocks];
    for (id, node) in spec.nodes.iter().enumerate() {
        match node.op {
            Op::GroupBy { block } => {
                let n = spec.blocks[block].capacity.n;
                let asg = core.edge(PortRef::new(id, n)).read();
                let asg = match &*asg {
                    Value::Assignment(a) => a,
                    _ => return Err(fail("assignment buffer has the wrong payload".into())),
                };
                counts[block] = asg.assigned_counts.clone();
                drops[block] = asg.drop_count();
            }
            Op::TopK { block } | Op::FixedRouting { block, .. } => {
                if let Value::Decision(d) = &*core.edge(PortRef::new(id, 0)).read() {
                    let pairs = (d.batch * d.k).max(1) as f64;
                    token_fractions[block] = d.expert_counts().iter().map(|&c| c as f64 / pairs).collect();
                }
            }
            Op::Cache { block } => {
                if let Value::Cache(state) = &*core.buffer(BufKey::CacheState(block)).read() {
                    hits[block] = state.hit_fraction;
                }
            }
            _ => {}
        }
    }
    let pairs: usize = spec.blocks.iter().map(|b| b.capacity.batch_size * b.capacity.k).sum();
    let drop_total: usize = drops.iter().sum();
    let alphas: Vec<Vec<f64>> = spec.blocks.iter().map(|b| b.capacity.alpha.clone()).collect();
    let experts: usize = alphas.iter().map(Vec::len).sum::<usize>().max(1);
    let mean_alpha = alphas.iter().flatten().sum::<f64>() / experts as f64;
    let mean_capacity = core.capacities.iter().flatten().sum::<usize>() as f64 / experts as f64;
    let record = MetricRecord {
        iteration: ctx.iteration,
        epoch: ctx.epoch,
        generation: ctx.generation,
        loss,
        task_loss,
        balance,
        accuracy: acc,
        drop_rate: if pairs == 0 { 0.0 } else { drop_total as f64 / pairs as f64 },
        hit_fraction: hits.first().copied().unwrap_or(0.0),
        mean_alpha,
        mean_capacity,
        counts,
        token_fractions,
        drops,
        hit_fractions: hits,
        capacities: core.capacities.clone(),
        alphas,
        cache_enabled: spec.blocks.iter().map(|b| b.cache_enabled).collect(),
    };
    ctx.board.resolve(record)
}

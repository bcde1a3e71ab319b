//! MoE routing operators: TopK, GroupBy, Aggregate, AggregateSpec and the
//! assignment cache.
//!
//! Gate weights are the top-k gate probabilities divided by their sum, so with
//! `k = 1` every routed sample carries weight exactly `1.0`. Capacity overflow
//! is resolved first-fit in ascending sample order; an overflowing
//! `(sample, rank)` pair is dropped and neither contributes to the output nor
//! receives gradient.

use std::collections::HashMap;

use crate::error::{MoeError, TensorError};
use crate::tensor::Tensor;

/// Per-sample expert choice and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub batch: usize,
    pub k: usize,
    pub n: usize,
    /// `[batch × k]`, rank order (highest score first for gate-derived decisions).
    pub indices: Vec<usize>,
    /// `[batch × k]`
    pub weights: Vec<f64>,
    /// `[batch × n]` gate probabilities the weights were taken from.
    pub raw_scores: Vec<f64>,
}

impl GateDecision {
    /// Builds the decision for an explicit route table by sum-normalizing the
    /// gate probabilities of the routed experts.
    pub fn from_routes(raw_scores: &[f64], n: usize, routes: &[usize], k: usize) -> Self {
        let batch = if k == 0 { 0 } else { routes.len() / k };
        let mut weights = vec![0.0; routes.len()];
        for s in 0..batch {
            let row = &raw_scores[s * n..(s + 1) * n];
            let sel = &routes[s * k..(s + 1) * k];
            let mut sum = 0.0;
            for &e in sel {
                sum += row[e];
            }
            for (r, &e) in sel.iter().enumerate() {
                weights[s * k + r] = if sum > 0.0 { row[e] / sum } else { 0.0 };
            }
        }
        Self {
            batch,
            k,
            n,
            indices: routes.to_vec(),
            weights,
            raw_scores: raw_scores.to_vec(),
        }
    }

    pub fn experts_of(&self, sample: usize) -> &[usize] {
        &self.indices[sample * self.k..(sample + 1) * self.k]
    }

    pub fn weights_of(&self, sample: usize) -> &[f64] {
        &self.weights[sample * self.k..(sample + 1) * self.k]
    }

    /// Pre-drop routed count per expert.
    pub fn expert_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n];
        for &e in &self.indices {
            counts[e] += 1;
        }
        counts
    }
}

fn check_k(k: usize, n: usize) -> Result<(), MoeError> {
    if k == 0 || k > n {
        return Err(MoeError::Config(format!("k = {k} must satisfy 1 <= k <= n = {n}")));
    }
    Ok(())
}

/// Indices of the `k` largest entries of `row`, largest first; ties go to the
/// lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn topk_fwd(raw_scores: &Tensor, k: usize) -> Result<GateDecision, MoeError> {
    let (batch, n) = raw_scores.require_matrix("topk")?;
    check_k(k, n)?;
    let mut routes = Vec::with_capacity(batch * k);
    for s in 0..batch {
        routes.extend(top_k_indices(raw_scores.row(s), k));
    }
    Ok(GateDecision::from_routes(raw_scores.data(), n, &routes, k))
}

/// Accumulates the gradient of the sum-normalization into `grad_raw[batch × n]`.
///
/// For selected set `S` with `Z = Σ_{j∈S} p_j` and `w_r = p_r / Z`:
/// `∂L/∂p_j = (g_j − Σ_r g_r w_r) / Z` for `j ∈ S`, zero elsewhere.
pub fn topk_backward_into(decision: &GateDecision, grad_weights: &[f64], grad_raw: &mut [f64]) {
    let (n, k) = (decision.n, decision.k);
    for s in 0..decision.batch {
        let sel = decision.experts_of(s);
        let w = decision.weights_of(s);
        let g = &grad_weights[s * k..(s + 1) * k];
        let z: f64 = sel.iter().map(|&e| decision.raw_scores[s * n + e]).sum();
        if z <= 0.0 {
            continue;
        }
        let mean: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
        for (r, &e) in sel.iter().enumerate() {
            grad_raw[s * n + e] += (g[r] - mean) / z;
        }
    }
}

pub fn topk_bwd(decision: &GateDecision, grad_weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; decision.batch * decision.n];
    topk_backward_into(decision, grad_weights, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotEntry {
    pub sample: usize,
    pub rank: usize,
}

/// Where every routed `(sample, rank)` pair landed.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub batch: usize,
    pub k: usize,
    pub capacities: Vec<usize>,
    /// `[batch × k]` expert of each pair (meaningless for unrouted samples).
    pub routes: Vec<usize>,
    /// `false` for samples that could not be routed at all (cache miss without fallback).
    pub routed: Vec<bool>,
    /// Per expert, the occupant of each slot in slot order.
    pub experts: Vec<Vec<SlotEntry>>,
    /// `[batch × k]` slot index of each pair, `None` when dropped.
    pub slot_of: Vec<Option<usize>>,
    pub dropped: Vec<SlotEntry>,
    /// Pre-drop routed count per expert.
    pub assigned_counts: Vec<usize>,
}

impl Assignment {
    pub fn n(&self) -> usize {
        self.capacities.len()
    }

    pub fn used(&self, expert: usize) -> usize {
        self.experts[expert].len()
    }

    pub fn drop_count(&self) -> usize {
        self.dropped.len()
    }

    pub fn is_dropped(&self, sample: usize, rank: usize) -> bool {
        self.slot_of[sample * self.k + rank].is_none()
    }
}

/// First-fit placement of routed pairs into per-expert slots.
pub fn place(routes: &[usize], routed: &[bool], k: usize, capacities: &[usize]) -> Assignment {
    let n = capacities.len();
    let batch = routed.len();
    let mut experts: Vec<Vec<SlotEntry>> = capacities.iter().map(|&c| Vec::with_capacity(c)).collect();
    let mut slot_of = vec![None; batch * k];
    let mut dropped = Vec::new();
    let mut assigned_counts = vec![0; n];
    for s in 0..batch {
        for r in 0..k {
            let entry = SlotEntry { sample: s, rank: r };
            if !routed[s] {
                dropped.push(entry);
                continue;
            }
            let e = routes[s * k + r];
            assigned_counts[e] += 1;
            if experts[e].len() < capacities[e] {
                slot_of[s * k + r] = Some(experts[e].len());
                experts[e].push(entry);
            } else {
                dropped.push(entry);
            }
        }
    }
    Assignment {
        batch,
        k,
        capacities: capacities.to_vec(),
        routes: routes.to_vec(),
        routed: routed.to_vec(),
        experts,
        slot_of,
        dropped,
        assigned_counts,
    }
}

/// Writes expert `e`'s batch: occupied slots copy their sample row, the rest are zero.
pub fn gather_expert_batch(x: &Tensor, assignment: &Assignment, expert: usize, out: &mut Tensor) {
    let d = x.cols();
    out.fill(0.0);
    out.zero_grad();
    for (slot, entry) in assignment.experts[expert].iter().enumerate() {
        out.row_mut(slot).copy_from_slice(x.row(entry.sample));
    }
    debug_assert_eq!(out.cols(), d);
}

fn gather_all(x: &Tensor, assignment: &Assignment) -> Vec<Tensor> {
    let d = x.cols();
    (0..assignment.n())
        .map(|e| {
            let mut t = Tensor::zeros(&[assignment.capacities[e], d]);
            gather_expert_batch(x, assignment, e, &mut t);
            t
        })
        .collect()
}

pub fn groupby_fwd(
    x: &Tensor,
    decision: &GateDecision,
    capacities: &[usize],
) -> Result<(Vec<Tensor>, Assignment), MoeError> {
    let (rows, _) = x.require_matrix("groupby")?;
    if rows != decision.batch || capacities.len() != decision.n {
        return Err(TensorError::Shape {
            op: "groupby",
            left: x.shape().to_vec(),
            right: vec![decision.batch, decision.n],
        }
        .into());
    }
    let assignment = place(&decision.indices, &vec![true; rows], decision.k, capacities);
    let batches = gather_all(x, &assignment);
    Ok((batches, assignment))
}

/// Scatter-adds slot gradients back onto sample rows of `grad_x[batch × d]`.
pub fn groupby_backward_into(assignment: &Assignment, expert_grads: &[&[f64]], d: usize, grad_x: &mut [f64]) {
    for (e, entries) in assignment.experts.iter().enumerate() {
        let g = expert_grads[e];
        for (slot, entry) in entries.iter().enumerate() {
            let src = &g[slot * d..(slot + 1) * d];
            let dst = &mut grad_x[entry.sample * d..(entry.sample + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
}

pub fn groupby_bwd(assignment: &Assignment, expert_grads: &[&[f64]], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; assignment.batch * d];
    groupby_backward_into(assignment, expert_grads, d, &mut out);
    out
}

/// `y[s] = Σ_{surviving r} w[s,r] · O_{e(s,r)}[slot]`, written into `y[batch × c]`.
pub fn aggregate_into(outputs: &[&Tensor], decision: &GateDecision, assignment: &Assignment, y: &mut Tensor) {
    let k = assignment.k;
    y.fill(0.0);
    for s in 0..assignment.batch {
        for r in 0..k {
            let Some(slot) = assignment.slot_of[s * k + r] else {
                continue;
            };
            let e = assignment.routes[s * k + r];
            let w = decision.weights[s * k + r];
            let src = outputs[e].row(slot);
            for (o, &v) in y.row_mut(s).iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
}

pub fn aggregate_fwd(outputs: &[&Tensor], decision: &GateDecision, assignment: &Assignment) -> Tensor {
    let c = outputs.first().map_or(0, |t| t.cols());
    let mut y = Tensor::zeros(&[assignment.batch, c]);
    aggregate_into(outputs, decision, assignment, &mut y);
    y
}

/// Gradients of the aggregate with respect to each expert output (`[C_e × c]`,
/// accumulated into `grad_outputs`) and the gate weights (`[batch × k]`, returned).
pub fn aggregate_backward_into(
    outputs: &[&Tensor],
    decision: &GateDecision,
    assignment: &Assignment,
    grad_y: &[f64],
    grad_outputs: &mut [&mut [f64]],
) -> Vec<f64> {
    let k = assignment.k;
    let c = outputs.first().map_or(0, |t| t.cols());
    let mut grad_w = vec![0.0; assignment.batch * k];
    for s in 0..assignment.batch {
        let gy = &grad_y[s * c..(s + 1) * c];
        for r in 0..k {
            let Some(slot) = assignment.slot_of[s * k + r] else {
                continue;
            };
            let e = assignment.routes[s * k + r];
            let w = decision.weights[s * k + r];
            let o = outputs[e].row(slot);
            grad_w[s * k + r] = gy.iter().zip(o).map(|(a, b)| a * b).sum();
            let go = &mut grad_outputs[e][slot * c..(slot + 1) * c];
            for (dst, &g) in go.iter_mut().zip(gy) {
                *dst += w * g;
            }
        }
    }
    grad_w
}

pub fn aggregate_bwd(
    outputs: &[&Tensor],
    decision: &GateDecision,
    assignment: &Assignment,
    grad_y: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut grads: Vec<Vec<f64>> = outputs.iter().map(|t| vec![0.0; t.len()]).collect();
    let grad_w = {
        let mut views: Vec<&mut [f64]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
        aggregate_backward_into(outputs, decision, assignment, grad_y, &mut views)
    };
    (grads, grad_w)
}

/// Concatenated per-(sample, rank) expert predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecConcat {
    /// `[(batch·k) × c]`, row `s·k + r`.
    pub preds: Tensor,
    /// `false` for dropped pairs; their rows are zero and excluded from the loss.
    pub valid: Vec<bool>,
}

pub fn aggregate_spec_into(outputs: &[&Tensor], assignment: &Assignment, out: &mut SpecConcat) {
    let k = assignment.k;
    out.preds.fill(0.0);
    out.preds.zero_grad();
    for s in 0..assignment.batch {
        for r in 0..k {
            let row = s * k + r;
            match assignment.slot_of[row] {
                Some(slot) => {
                    let e = assignment.routes[row];
                    out.preds.row_mut(row).copy_from_slice(outputs[e].row(slot));
                    out.valid[row] = true;
                }
                None => out.valid[row] = false,
            }
        }
    }
}

pub fn aggregate_spec_fwd(outputs: &[&Tensor], assignment: &Assignment) -> SpecConcat {
    let c = outputs.first().map_or(0, |t| t.cols());
    let rows = assignment.batch * assignment.k;
    let mut out = SpecConcat {
        preds: Tensor::zeros(&[rows, c]),
        valid: vec![false; rows],
    };
    aggregate_spec_into(outputs, assignment, &mut out);
    out
}

/// Routes `grad_preds[(batch·k) × c]` back to the expert output slots.
pub fn aggregate_spec_backward_into(assignment: &Assignment, grad_preds: &[f64], c: usize, grad_outputs: &mut [&mut [f64]]) {
    for (row, slot) in assignment.slot_of.iter().enumerate() {
        let Some(slot) = *slot else { continue };
        let e = assignment.routes[row];
        let src = &grad_preds[row * c..(row + 1) * c];
        let dst = &mut grad_outputs[e][slot * c..(slot + 1) * c];
        for (o, &g) in dst.iter_mut().zip(src) {
            *o += g;
        }
    }
}

/// Remembers each sample's expert set from the previous epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentCache {
    pub last_assignment: HashMap<u64, Vec<usize>>,
    pub hit_fraction: f64,
}

fn same_set(a: &[usize], b: &[usize]) -> bool {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_unstable();
    y.sort_unstable();
    x == y
}

impl AssignmentCache {
    pub fn lookup(&self, sample_id: u64) -> Option<&[usize]> {
        self.last_assignment.get(&sample_id).map(Vec::as_slice)
    }
}

/// Scores the fresh decision against the cache, then overwrites the cache with it.
/// Returns the fraction of samples whose full expert set is unchanged.
pub fn cache_step(cache: &mut AssignmentCache, decision: &GateDecision, sample_ids: &[u64]) -> f64 {
    let mut hits = 0usize;
    for (s, &id) in sample_ids.iter().enumerate() {
        let fresh = decision.experts_of(s);
        if let Some(prev) = cache.last_assignment.get(&id) {
            if same_set(prev, fresh) {
                hits += 1;
            }
        }
    }
    for (s, &id) in sample_ids.iter().enumerate() {
        cache.last_assignment.insert(id, decision.experts_of(s).to_vec());
    }
    cache.hit_fraction = if sample_ids.is_empty() {
        0.0
    } else {
        hits as f64 / sample_ids.len() as f64
    };
    cache.hit_fraction
}

/// Routes read from the cache for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedRoutes {
    pub k: usize,
    /// `[batch × k]`; entries of unknown samples are placeholders.
    pub routes: Vec<usize>,
    pub known: Vec<bool>,
}

impl CachedRoutes {
    pub fn misses(&self) -> usize {
        self.known.iter().filter(|&&h| !h).count()
    }
}

pub fn cache_lookup(cache: &AssignmentCache, sample_ids: &[u64], k: usize) -> CachedRoutes {
    let mut routes = Vec::with_capacity(sample_ids.len() * k);
    let mut known = Vec::with_capacity(sample_ids.len());
    for &id in sample_ids {
        match cache.lookup(id) {
            Some(experts) if experts.len() == k => {
                routes.extend_from_slice(experts);
                known.push(true);
            }
            _ => {
                routes.extend(0..k);
                known.push(false);
            }
        }
    }
    CachedRoutes { k, routes, known }
}

/// Merges cached routes with a gate-derived fallback for unknown samples.
/// Without a fallback, unknown samples stay unrouted (all their pairs drop).
pub fn resolve_routes(cached: &CachedRoutes, fallback: Option<&GateDecision>) -> (Vec<usize>, Vec<bool>) {
    let k = cached.k;
    let mut routes = cached.routes.clone();
    let mut routed = cached.known.clone();
    if let Some(decision) = fallback {
        for (s, known) in cached.known.iter().enumerate() {
            if !known {
                routes[s * k..(s + 1) * k].copy_from_slice(decision.experts_of(s));
                routed[s] = true;
            }
        }
    }
    (routes, routed)
}

/// GroupBy driven by last epoch's assignments instead of the current gate.
pub fn cached_route(
    cache: &AssignmentCache,
    x: &Tensor,
    sample_ids: &[u64],
    k: usize,
    fallback: Option<&GateDecision>,
    capacities: &[usize],
) -> Result<(Vec<Tensor>, Assignment, CachedRoutes), MoeError> {
    let (rows, _) = x.require_matrix("cached_route")?;
    if rows != sample_ids.len() {
        return Err(TensorError::Shape {
            op: "cached_route",
            left: x.shape().to_vec(),
            right: vec![sample_ids.len()],
        }
        .into());
    }
    check_k(k, capacities.len())?;
    let cached = cache_lookup(cache, sample_ids, k);
    let (routes, routed) = resolve_routes(&cached, fallback);
    let assignment = place(&routes, &routed, k, capacities);
    let batches = gather_all(x, &assignment);
    Ok((batches, assignment, cached))
}

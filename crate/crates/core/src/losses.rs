//! Task losses over MoE outputs, the load-balance regularizer, and batch metrics.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::kernels::{cross_entropy, cross_entropy_bwd, nll, nll_grad};
use crate::moe::{aggregate_backward_into, aggregate_fwd, Assignment, GateDecision, SpecConcat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Task loss on the gate-weighted sum of expert predictions.
    Cooperation,
    /// Gate-weighted sum of per-expert task losses.
    Specification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Balance weight; 0 disables the regularizer's effect.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Cooperation,
            lambda: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// `T_i`: share of routed (pre-drop) tokens per expert; sums to 1.
    pub token_fractions: Vec<f64>,
    /// `G_i`: mean gate probability per expert; sums to 1.
    pub gate_fractions: Vec<f64>,
    pub drop_count: usize,
    pub hit_fraction: f64,
}

impl BatchStats {
    pub fn from_decision(decision: &GateDecision, drop_count: usize, hit_fraction: f64) -> Self {
        let (batch, n) = (decision.batch, decision.n);
        let pairs = (batch * decision.k).max(1) as f64;
        let token_fractions = decision
            .expert_counts()
            .into_iter()
            .map(|c| c as f64 / pairs)
            .collect();
        let mut gate_fractions = vec![0.0; n];
        for row in decision.raw_scores.chunks(n) {
            for (g, &p) in gate_fractions.iter_mut().zip(row) {
                *g += p;
            }
        }
        let inv = 1.0 / batch.max(1) as f64;
        gate_fractions.iter_mut().for_each(|g| *g *= inv);
        Self {
            token_fractions,
            gate_fractions,
            drop_count,
            hit_fraction,
        }
    }
}

/// Cross-entropy of the aggregated prediction.
pub fn cooperation_loss(
    labels: &[usize],
    outputs: &[&Tensor],
    decision: &GateDecision,
    assignment: &Assignment,
) -> Result<f64, TensorError> {
    cross_entropy(&aggregate_fwd(outputs, decision, assignment), labels)
}

/// Gradients of [`cooperation_loss`] with respect to each expert output and the gate weights.
pub fn cooperation_loss_bwd(
    labels: &[usize],
    outputs: &[&Tensor],
    decision: &GateDecision,
    assignment: &Assignment,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), TensorError> {
    let mut y = aggregate_fwd(outputs, decision, assignment);
    cross_entropy_bwd(&mut y, labels, 1.0)?;
    let mut grads: Vec<Vec<f64>> = outputs.iter().map(|t| vec![0.0; t.len()]).collect();
    let gw = {
        let mut views: Vec<&mut [f64]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
        aggregate_backward_into(outputs, decision, assignment, y.grad(), &mut views)
    };
    Ok((grads, gw))
}

fn check_spec(labels: &[usize], spec: &SpecConcat, k: usize) -> Result<(usize, usize), TensorError> {
    let (rows, c) = spec.preds.require_matrix("specification_loss")?;
    if rows != labels.len() * k {
        return Err(TensorError::Shape {
            op: "specification_loss",
            left: spec.preds.shape().to_vec(),
            right: vec![labels.len(), k],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::Index {
            op: "specification_loss",
            label: bad,
            classes: c,
        });
    }
    Ok((rows, c))
}

/// `(1/batch) Σ_s Σ_{valid r} w[s,r] · L(y_s, O_{e(s,r)})`.
pub fn specification_loss(labels: &[usize], spec: &SpecConcat, weights: &[f64], k: usize) -> Result<f64, TensorError> {
    let (rows, c) = check_spec(labels, spec, k)?;
    let batch = labels.len().max(1) as f64;
    let mut total = 0.0;
    for row in 0..rows {
        if !spec.valid[row] {
            continue;
        }
        let y = labels[row / k];
        total += weights[row] * nll(spec.preds.data()[row * c + y]);
    }
    Ok(total / batch)
}

/// Accumulates `scale · ∂L_spec/∂preds` into `spec.preds.grad` and `scale · ∂L_spec/∂w`
/// into `grad_weights`. The prediction gradient of a row depends only on that
/// row and its own weight.
pub fn specification_loss_backward_into(
    labels: &[usize],
    spec: &mut SpecConcat,
    weights: &[f64],
    k: usize,
    scale: f64,
    grad_weights: &mut [f64],
) -> Result<(), TensorError> {
    let (rows, c) = check_spec(labels, spec, k)?;
    let inv = scale / labels.len().max(1) as f64;
    let (data, grad) = spec.preds.data_and_grad_mut();
    for row in 0..rows {
        if !spec.valid[row] {
            continue;
        }
        let idx = row * c + labels[row / k];
        grad_weights[row] += inv * nll(data[idx]);
        grad[idx] += inv * weights[row] * nll_grad(data[idx]);
    }
    Ok(())
}

/// `λ · n · Σ T_i · G_i`
pub fn balance_term(stats: &BatchStats, lambda: f64, n: usize) -> f64 {
    let dot: f64 = stats
        .token_fractions
        .iter()
        .zip(&stats.gate_fractions)
        .map(|(t, g)| t * g)
        .sum();
    lambda * n as f64 * dot
}

/// Accumulates `∂B/∂p[s,i] = λ · n · T_i / batch` into `grad_probs[batch × n]`;
/// `T` is held constant.
pub fn balance_backward_into(token_fractions: &[f64], lambda: f64, batch: usize, grad_probs: &mut [f64]) {
    let n = token_fractions.len();
    let scale = lambda * n as f64 / batch.max(1) as f64;
    for row in grad_probs.chunks_mut(n) {
        for (g, &t) in row.iter_mut().zip(token_fractions) {
            *g += scale * t;
        }
    }
}

pub fn total_loss(task_loss: f64, balance: f64) -> f64 {
    task_loss + balance
}

/// Share of rows whose arg-max matches the label (ties to the lower class).
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(probs.row(i)) == l)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

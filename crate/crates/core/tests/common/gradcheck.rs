//! Central finite-difference oracles for every differentiable operator.
//!
//! Each check draws a random instance, reduces the operator's output to a
//! scalar with a random projection, and compares the analytic gradient of
//! every input coordinate against `(f(x + h) − f(x − h)) / 2h`. Inputs are
//! drawn away from kinks (ReLU zero, top-k ties, the probability floor) so
//! the difference quotient is taken on a smooth piece.

#![allow(dead_code)]

use moe_core::harness::{build_model, CapacitySection, ExperimentConfig, Routing, StaticCapacity};
use moe_core::kernels::{
    cross_entropy, cross_entropy_bwd, linear_backward, linear_into, relu_backward, relu_into, softmax_backward,
    softmax_into,
};
use moe_core::losses::{
    balance_backward_into, balance_term, cooperation_loss, cooperation_loss_bwd, specification_loss,
    specification_loss_backward_into, BatchStats,
};
use moe_core::moe::{
    aggregate_bwd, aggregate_fwd, aggregate_spec_backward_into, aggregate_spec_fwd, groupby_bwd, groupby_fwd, place,
    topk_bwd, topk_fwd, Assignment, GateDecision,
};
use moe_core::{compile, execute, Batch, ExecMode, LossMode, Phases, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
/// Absolute slack for coordinates whose true gradient is (near) zero.
pub const ABS_FLOOR: f64 = 1e-8;
pub const STEP: f64 = 1e-6;
pub const TRIALS: usize = 100;
pub const CONFIGS: [(usize, usize); 3] = [(4, 1), (4, 2), (8, 2)];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub coordinates: usize,
    pub failures: usize,
    /// Largest `|a − f| / max(|a|, |f|)` seen over coordinates above the floor.
    pub worst_rel: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials == TRIALS
    }
}

struct Tally {
    coordinates: usize,
    failures: usize,
    worst_rel: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            coordinates: 0,
            failures: 0,
            worst_rel: 0.0,
        }
    }

    /// Returns `false` if any coordinate is outside tolerance.
    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) -> bool {
        assert_eq!(analytic.len(), numeric.len());
        let mut ok = true;
        for (&a, &f) in analytic.iter().zip(numeric) {
            self.coordinates += 1;
            let scale = a.abs().max(f.abs());
            let err = (a - f).abs();
            if scale > 0.0 && err > ABS_FLOOR {
                self.worst_rel = self.worst_rel.max(err / scale);
            }
            if !(err <= REL_TOL * scale + ABS_FLOOR) {
                ok = false;
            }
        }
        ok
    }
}

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values with `|v| ≥ 0.05`, so a step of `STEP` never crosses zero.
fn away_from_zero(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Probability rows of width `cols`, every entry at least `0.02 / cols`.
fn prob_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.02..1.0)).collect();
        let z: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / z));
    }
    out
}

fn separated(row: &[f64], k: usize, margin: f64) -> bool {
    if k >= row.len() {
        return true;
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.windows(2).all(|w| w[0] - w[1] > margin)
}

/// Gate probabilities whose entries are pairwise separated, so top-k selection
/// is locally constant.
fn gate_probs(rng: &mut ChaCha8Rng, batch: usize, n: usize, k: usize) -> Vec<f64> {
    loop {
        let p = prob_rows(rng, batch, n);
        if p.chunks(n).all(|r| separated(r, k, 1e-3)) {
            return p;
        }
    }
}

/// Random routes, `k` distinct experts per sample, and capacities that
/// usually force some drops.
fn random_routing(rng: &mut ChaCha8Rng, batch: usize, n: usize, k: usize) -> (GateDecision, Assignment) {
    let mut routes = Vec::with_capacity(batch * k);
    let experts: Vec<usize> = (0..n).collect();
    for _ in 0..batch {
        routes.extend(experts.choose_multiple(rng, k).copied());
    }
    let probs = prob_rows(rng, batch, n);
    let decision = GateDecision::from_routes(&probs, n, &routes, k);
    let base = (batch * k).div_ceil(n);
    let capacities: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=base + 2)).collect();
    let assignment = place(&routes, &vec![true; batch], k, &capacities);
    (decision, assignment)
}

fn batch_size(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(n..=2 * n + 4)
}

fn run_check(
    name: &'static str,
    n: usize,
    k: usize,
    seed: u64,
    mut trial: impl FnMut(&mut ChaCha8Rng, &mut Tally) -> bool,
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32) ^ ((k as u64) << 48));
    let mut tally = Tally::new();
    let mut failures = 0;
    for _ in 0..TRIALS {
        if !trial(&mut rng, &mut tally) {
            failures += 1;
        }
    }
    CheckReport {
        name,
        n,
        k,
        trials: TRIALS,
        coordinates: tally.coordinates,
        failures,
        worst_rel: tally.worst_rel,
    }
}

pub fn check_linear(n: usize, k: usize) -> CheckReport {
    run_check("linear", n, k, 1, |rng, t| {
        let (m, p, q) = (batch_size(rng, n), n + k, n);
        let (x, w, b) = (normal_vec(rng, m * p), normal_vec(rng, p * q), normal_vec(rng, q));
        let r = normal_vec(rng, m * q);
        let f = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut out = vec![0.0; m * q];
            linear_into(x, w, b, &mut out, m, p, q);
            dot(&out, &r)
        };
        let (mut gx, mut gw, mut gb) = (vec![0.0; m * p], vec![0.0; p * q], vec![0.0; q]);
        linear_backward(&x, &w, &r, Some(&mut gx), &mut gw, &mut gb, m, p, q);
        let ok_x = t.compare(&gx, &numeric_grad(&x, |v| f(v, &w, &b)));
        let ok_w = t.compare(&gw, &numeric_grad(&w, |v| f(&x, v, &b)));
        let ok_b = t.compare(&gb, &numeric_grad(&b, |v| f(&x, &w, v)));
        ok_x && ok_w && ok_b
    })
}

pub fn check_relu(n: usize, k: usize) -> CheckReport {
    run_check("relu", n, k, 2, |rng, t| {
        let len = batch_size(rng, n) * n;
        let x = away_from_zero(rng, len);
        let r = normal_vec(rng, len);
        let mut g = vec![0.0; len];
        relu_backward(&x, &r, &mut g);
        t.compare(
            &g,
            &numeric_grad(&x, |v| {
                let mut y = vec![0.0; len];
                relu_into(v, &mut y);
                dot(&y, &r)
            }),
        )
    })
}

pub fn check_softmax(n: usize, k: usize) -> CheckReport {
    run_check("softmax", n, k, 3, |rng, t| {
        let len = batch_size(rng, n) * n;
        let x: Vec<f64> = normal_vec(rng, len).iter().map(|v| 3.0 * v).collect();
        let r = normal_vec(rng, len);
        let mut y = vec![0.0; len];
        softmax_into(&x, &mut y, n).unwrap();
        let mut g = vec![0.0; len];
        softmax_backward(&y, &r, &mut g, n);
        t.compare(
            &g,
            &numeric_grad(&x, |v| {
                let mut y = vec![0.0; len];
                softmax_into(v, &mut y, n).unwrap();
                dot(&y, &r)
            }),
        )
    })
}

pub fn check_cross_entropy(n: usize, k: usize) -> CheckReport {
    run_check("cross_entropy", n, k, 4, |rng, t| {
        let m = batch_size(rng, n);
        let p = prob_rows(rng, m, n);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let mut probs = Tensor::from_vec(&[m, n], p.clone()).unwrap();
        cross_entropy_bwd(&mut probs, &labels, 1.0).unwrap();
        t.compare(
            probs.grad(),
            &numeric_grad(&p, |v| cross_entropy(&Tensor::from_vec(&[m, n], v.to_vec()).unwrap(), &labels).unwrap()),
        )
    })
}

/// Gate logits through softmax and top-k normalization into a weighted objective.
pub fn check_topk(n: usize, k: usize) -> CheckReport {
    run_check("topk", n, k, 5, |rng, t| {
        let m = batch_size(rng, n);
        let p = gate_probs(rng, m, n, k);
        let r = normal_vec(rng, m * k);
        let decision = topk_fwd(&Tensor::from_vec(&[m, n], p.clone()).unwrap(), k).unwrap();
        let routes = decision.indices.clone();
        let analytic = topk_bwd(&decision, &r);
        let numeric = numeric_grad(&p, |v| {
            let d = topk_fwd(&Tensor::from_vec(&[m, n], v.to_vec()).unwrap(), k).unwrap();
            assert_eq!(d.indices, routes, "selection must be locally constant");
            dot(&d.weights, &r)
        });
        t.compare(&analytic, &numeric)
    })
}

/// Logits → softmax → top-k weights, the gate's full differentiable path.
pub fn check_gate_chain(n: usize, k: usize) -> CheckReport {
    run_check("gate_chain", n, k, 6, |rng, t| {
        let m = batch_size(rng, n);
        let logits = loop {
            let l: Vec<f64> = normal_vec(rng, m * n).iter().map(|v| 2.0 * v).collect();
            let mut p = vec![0.0; m * n];
            softmax_into(&l, &mut p, n).unwrap();
            if p.chunks(n).all(|r| separated(r, k, 1e-4)) {
                break l;
            }
        };
        let r = normal_vec(rng, m * k);
        let forward = |l: &[f64]| {
            let mut p = vec![0.0; m * n];
            softmax_into(l, &mut p, n).unwrap();
            let d = topk_fwd(&Tensor::from_vec(&[m, n], p.clone()).unwrap(), k).unwrap();
            (p, d)
        };
        let (p, d) = forward(&logits);
        let gp = topk_bwd(&d, &r);
        let mut gl = vec![0.0; m * n];
        softmax_backward(&p, &gp, &mut gl, n);
        let routes = d.indices.clone();
        t.compare(
            &gl,
            &numeric_grad(&logits, |v| {
                let (_, d) = forward(v);
                assert_eq!(d.indices, routes);
                dot(&d.weights, &r)
            }),
        )
    })
}

pub fn check_groupby(n: usize, k: usize) -> CheckReport {
    run_check("groupby", n, k, 7, |rng, t| {
        let (m, dim) = (batch_size(rng, n), 3);
        let (decision, _) = random_routing(rng, m, n, k);
        let base = (m * k).div_ceil(n);
        let capacities: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=base + 2)).collect();
        let x = normal_vec(rng, m * dim);
        let rs: Vec<Vec<f64>> = capacities.iter().map(|&c| normal_vec(rng, c * dim)).collect();
        let (_, asg) = groupby_fwd(&Tensor::from_vec(&[m, dim], x.clone()).unwrap(), &decision, &capacities).unwrap();
        let views: Vec<&[f64]> = rs.iter().map(|r| r.as_slice()).collect();
        let analytic = groupby_bwd(&asg, &views, dim);
        t.compare(
            &analytic,
            &numeric_grad(&x, |v| {
                let (batches, _) =
                    groupby_fwd(&Tensor::from_vec(&[m, dim], v.to_vec()).unwrap(), &decision, &capacities).unwrap();
                batches.iter().zip(&rs).map(|(b, r)| dot(b.data(), r)).sum()
            }),
        )
    })
}

fn expert_outputs(rng: &mut ChaCha8Rng, asg: &Assignment, n: usize, c: usize, probs: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|e| {
            let rows = asg.capacities[e];
            if probs {
                prob_rows(rng, rows, c)
            } else {
                normal_vec(rng, rows * c)
            }
        })
        .collect()
}

fn tensors(data: &[Vec<f64>], c: usize) -> Vec<Tensor> {
    data.iter()
        .map(|d| Tensor::from_vec(&[d.len() / c, c], d.clone()).unwrap())
        .collect()
}

/// Checks a scalar function of every expert output buffer, one buffer at a time.
fn compare_outputs(
    t: &mut Tally,
    outputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    mut f: impl FnMut(&[Vec<f64>]) -> f64,
) -> bool {
    let mut ok = true;
    for e in 0..outputs.len() {
        let mut probe = outputs.to_vec();
        let numeric = numeric_grad(&outputs[e], |v| {
            probe[e].copy_from_slice(v);
            f(&probe)
        });
        ok &= t.compare(&analytic[e], &numeric);
    }
    ok
}

pub fn check_aggregate(n: usize, k: usize) -> CheckReport {
    run_check("aggregate", n, k, 8, |rng, t| {
        let (m, c) = (batch_size(rng, n), 3);
        let (decision, asg) = random_routing(rng, m, n, k);
        let outs = expert_outputs(rng, &asg, n, c, false);
        let r = normal_vec(rng, m * c);
        let f = |outs: &[Vec<f64>], d: &GateDecision| {
            let ts = tensors(outs, c);
            let refs: Vec<&Tensor> = ts.iter().collect();
            dot(aggregate_fwd(&refs, d, &asg).data(), &r)
        };
        let ts = tensors(&outs, c);
        let refs: Vec<&Tensor> = ts.iter().collect();
        let (go, gw) = aggregate_bwd(&refs, &decision, &asg, &r);
        let ok_o = compare_outputs(t, &outs, &go, |o| f(o, &decision));
        let numeric_w = numeric_grad(&decision.weights, |w| {
            let mut d = decision.clone();
            d.weights.copy_from_slice(w);
            f(&outs, &d)
        });
        ok_o && t.compare(&gw, &numeric_w)
    })
}

pub fn check_aggregate_spec(n: usize, k: usize) -> CheckReport {
    run_check("aggregate_spec", n, k, 9, |rng, t| {
        let (m, c) = (batch_size(rng, n), 3);
        let (_, asg) = random_routing(rng, m, n, k);
        let outs = expert_outputs(rng, &asg, n, c, false);
        let r = normal_vec(rng, m * k * c);
        let mut go: Vec<Vec<f64>> = outs.iter().map(|o| vec![0.0; o.len()]).collect();
        {
            let mut views: Vec<&mut [f64]> = go.iter_mut().map(|g| g.as_mut_slice()).collect();
            aggregate_spec_backward_into(&asg, &r, c, &mut views);
        }
        compare_outputs(t, &outs, &go, |o| {
            let ts = tensors(o, c);
            let refs: Vec<&Tensor> = ts.iter().collect();
            dot(aggregate_spec_fwd(&refs, &asg).preds.data(), &r)
        })
    })
}

pub fn check_cooperation_loss(n: usize, k: usize) -> CheckReport {
    run_check("cooperation_loss", n, k, 10, |rng, t| {
        let (m, c) = (batch_size(rng, n), 4);
        let (decision, asg) = random_routing(rng, m, n, k);
        let outs = expert_outputs(rng, &asg, n, c, true);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
        let f = |outs: &[Vec<f64>], d: &GateDecision| {
            let ts = tensors(outs, c);
            let refs: Vec<&Tensor> = ts.iter().collect();
            cooperation_loss(&labels, &refs, d, &asg).unwrap()
        };
        let ts = tensors(&outs, c);
        let refs: Vec<&Tensor> = ts.iter().collect();
        let (go, gw) = cooperation_loss_bwd(&labels, &refs, &decision, &asg).unwrap();
        // Samples with every pair dropped sit on the probability floor; their loss is constant.
        let ok_o = compare_outputs(t, &outs, &go, |o| f(o, &decision));
        let numeric_w = numeric_grad(&decision.weights, |w| {
            let mut d = decision.clone();
            d.weights.copy_from_slice(w);
            f(&outs, &d)
        });
        ok_o && t.compare(&gw, &numeric_w)
    })
}

pub fn check_specification_loss(n: usize, k: usize) -> CheckReport {
    run_check("specification_loss", n, k, 11, |rng, t| {
        let (m, c) = (batch_size(rng, n), 4);
        let (decision, asg) = random_routing(rng, m, n, k);
        let outs = expert_outputs(rng, &asg, n, c, true);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
        let f = |outs: &[Vec<f64>], w: &[f64]| {
            let ts = tensors(outs, c);
            let refs: Vec<&Tensor> = ts.iter().collect();
            specification_loss(&labels, &aggregate_spec_fwd(&refs, &asg), w, k).unwrap()
        };
        let ts = tensors(&outs, c);
        let refs: Vec<&Tensor> = ts.iter().collect();
        let mut spec = aggregate_spec_fwd(&refs, &asg);
        let mut gw = vec![0.0; m * k];
        specification_loss_backward_into(&labels, &mut spec, &decision.weights, k, 1.0, &mut gw).unwrap();
        let mut go: Vec<Vec<f64>> = outs.iter().map(|o| vec![0.0; o.len()]).collect();
        {
            let mut views: Vec<&mut [f64]> = go.iter_mut().map(|g| g.as_mut_slice()).collect();
            aggregate_spec_backward_into(&asg, spec.preds.grad(), c, &mut views);
        }
        let ok_o = compare_outputs(t, &outs, &go, |o| f(o, &decision.weights));
        let numeric_w = numeric_grad(&decision.weights, |w| f(&outs, w));
        ok_o && t.compare(&gw, &numeric_w)
    })
}

/// Balance term with respect to gate logits, token fractions held fixed.
pub fn check_balance(n: usize, k: usize) -> CheckReport {
    run_check("balance", n, k, 12, |rng, t| {
        let m = batch_size(rng, n);
        let lambda = rng.gen_range(0.01..1.0);
        let logits: Vec<f64> = normal_vec(rng, m * n).iter().map(|v| 2.0 * v).collect();
        let (decision, _) = random_routing(rng, m, n, k);
        let frozen = BatchStats::from_decision(&decision, 0, 0.0).token_fractions;
        let f = |l: &[f64]| {
            let mut p = vec![0.0; m * n];
            softmax_into(l, &mut p, n).unwrap();
            let mut d = decision.clone();
            d.raw_scores = p;
            let mut stats = BatchStats::from_decision(&d, 0, 0.0);
            stats.token_fractions = frozen.clone();
            balance_term(&stats, lambda, n)
        };
        let mut p = vec![0.0; m * n];
        softmax_into(&logits, &mut p, n).unwrap();
        let mut gp = vec![0.0; m * n];
        balance_backward_into(&frozen, lambda, m, &mut gp);
        let mut gl = vec![0.0; m * n];
        softmax_backward(&p, &gp, &mut gl, n);
        t.compare(&gl, &numeric_grad(&logits, f))
    })
}

fn plan_config(n: usize, k: usize, mode: LossMode, routing: Routing, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.model.n = n;
    cfg.model.k = k;
    cfg.model.expert_hidden = vec![5];
    cfg.model.gate_hidden = vec![6];
    cfg.model.routing = routing;
    cfg.loss.mode = mode;
    cfg.loss.lambda = 0.05;
    cfg.dataset.feature_dim = 4;
    cfg.dataset.classes = 3;
    cfg.runtime.batch_size = 12;
    cfg.runtime.workers = Some(1);
    cfg
}

/// End-to-end gradient of the compiled plan's total loss with respect to a
/// sample of parameter coordinates, over both losses, both routings, and
/// capacities with and without drops.
pub fn check_plan(n: usize, k: usize) -> CheckReport {
    const COORDS: usize = 6;
    let mut arm = 0u64;
    run_check("plan", n, k, 13, |rng, t| {
        let mode = if arm.is_multiple_of(2) {
            LossMode::Cooperation
        } else {
            LossMode::Specification
        };
        let routing = if arm % 4 < 2 { Routing::Learned } else { Routing::Fixed };
        // Alternate between capacities that can never drop and the tight default.
        let alpha = if (arm / 4).is_multiple_of(2) { n as f64 } else { 1.0 };
        arm += 1;
        let mut cfg = plan_config(n, k, mode, routing, rng.gen());
        cfg.capacity = CapacitySection::Static(StaticCapacity { alpha });
        let d = &cfg.dataset;
        let m = cfg.runtime.batch_size;
        let x = Tensor::from_vec(&[m, d.feature_dim], normal_vec(rng, m * d.feature_dim)).unwrap();
        let batch = Batch {
            x,
            labels: (0..m).map(|_| rng.gen_range(0..d.classes)).collect(),
            sample_ids: (0..m as u64).collect(),
            epoch: 0,
        };
        let plan = compile(&build_model(&cfg), 1).unwrap();
        // Zero-initialized biases tie the gate logits of samples whose hidden units are all inactive.
        for id in plan.param_ids() {
            let len = plan.param(id).unwrap().len();
            plan.set_param(id, &normal_vec(rng, len));
        }
        let mode = ExecMode::Simulated(Default::default());
        let base = execute(&plan, batch.clone(), &mode, Phases::NoUpdate).unwrap();
        let base_rec = base.record.expect("metric record");
        let ids = plan.param_ids();
        let grads: Vec<Tensor> = ids.iter().map(|&id| plan.param(id).unwrap()).collect();
        let mut analytic = Vec::with_capacity(COORDS);
        let mut numeric = Vec::with_capacity(COORDS);
        for _ in 0..COORDS {
            let pi = rng.gen_range(0..ids.len());
            let ci = rng.gen_range(0..grads[pi].len());
            let orig = grads[pi].data().to_vec();
            let loss_at = |delta: f64| {
                let mut v = orig.clone();
                v[ci] += delta;
                plan.set_param(ids[pi], &v);
                let rec = execute(&plan, batch.clone(), &mode, Phases::ForwardOnly)
                    .unwrap()
                    .record
                    .expect("metric record");
                assert_eq!(rec.counts, base_rec.counts, "routing must be locally constant");
                assert_eq!(rec.drops, base_rec.drops);
                rec.loss
            };
            let (up, down) = (loss_at(STEP), loss_at(-STEP));
            plan.set_param(ids[pi], &orig);
            analytic.push(grads[pi].grad()[ci]);
            numeric.push((up - down) / (2.0 * STEP));
        }
        t.compare(&analytic, &numeric)
    })
}

pub type Check = fn(usize, usize) -> CheckReport;

pub const CHECKS: [(&str, Check); 13] = [
    ("linear", check_linear),
    ("relu", check_relu),
    ("softmax", check_softmax),
    ("cross_entropy", check_cross_entropy),
    ("topk", check_topk),
    ("gate_chain", check_gate_chain),
    ("groupby", check_groupby),
    ("aggregate", check_aggregate),
    ("aggregate_spec", check_aggregate_spec),
    ("cooperation_loss", check_cooperation_loss),
    ("specification_loss", check_specification_loss),
    ("balance", check_balance),
    ("plan", check_plan),
];

/// Every check at every `(n, k)` configuration.
pub fn run_suite() -> Vec<CheckReport> {
    let mut out = Vec::new();
    for (_, check) in CHECKS {
        for (n, k) in CONFIGS {
            out.push(check(n, k));
        }
    }
    out
}

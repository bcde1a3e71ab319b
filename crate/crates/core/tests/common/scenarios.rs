//! Whole-run scenarios: recompile safety, launch-gap semantics, trigger
//! overlap, caching equivalence and the loss inequality.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use moe_core::graph::GraphSpec;
use moe_core::losses::{cooperation_loss, specification_loss};
use moe_core::moe::{aggregate_spec_fwd, place, GateDecision};
use moe_core::runtime::{RunReport, SpecDelta, TriggerSnapshot};
use moe_core::{
    compile, execute, forward_makespan, recompile, run, CostModel, ExecMode, Phases, RuntimeConfig,
    Session, TaskCost, Tensor, Trigger, TriggerDecision,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::models::{epoch_batches, random_batch, Moe};

fn sim() -> ExecMode {
    ExecMode::Simulated(CostModel::default())
}

/// Redraws every expert's capacity factor from `[lo, hi]` until some capacity changes.
pub struct RandomCapacity {
    rng: ChaCha8Rng,
    lo: f64,
    hi: f64,
    /// Stop after this many recompiles.
    pub remaining: usize,
}

impl RandomCapacity {
    pub fn new(seed: u64, lo: f64, hi: f64, count: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            lo,
            hi,
            remaining: count,
        }
    }
}

impl Trigger for RandomCapacity {
    fn name(&self) -> &str {
        "random_capacity"
    }

    fn evaluate(&mut self, snapshot: &TriggerSnapshot, spec: &GraphSpec) -> Result<TriggerDecision, String> {
        if self.remaining == 0 {
            return Ok(TriggerDecision::none(snapshot));
        }
        let cap = &spec.blocks[0].capacity;
        loop {
            let alpha: Vec<f64> = (0..cap.n).map(|_| self.rng.gen_range(self.lo..=self.hi)).collect();
            let mut next = cap.clone();
            next.alpha = alpha.clone();
            if next.capacities() != cap.capacities() {
                self.remaining -= 1;
                let mut delta = SpecDelta::default();
                delta.alpha.insert(0, alpha);
                return Ok(TriggerDecision::recompile(snapshot, delta));
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SafetyOutcome {
    pub recompiles: usize,
    /// Recompiles whose parameter checksum changed.
    pub checksum_changes: usize,
    pub max_loss_diff: f64,
    pub iterations: usize,
}

/// Trains with 50 random capacity recompiles, every capacity at least the
/// batch size, against a run with a fixed large capacity.
pub fn recompile_safety(recompiles: usize) -> SafetyOutcome {
    let model = Moe {
        n: 4,
        k: 2,
        batch: 16,
        alpha: 4.0,
        ..Moe::default()
    };
    let spec = model.spec();
    let batches = epoch_batches(11, 8, 8, model.batch, model.features, model.classes);
    // C >= batch whenever alpha >= n/k, so no sample can drop.
    let no_drop = model.n as f64 / model.k as f64;
    let config = RuntimeConfig {
        verify_weights: true,
        ..RuntimeConfig::default()
    };

    let mut session = Session::new(compile(&spec, 5).unwrap(), &sim());
    let mut triggers: Vec<Box<dyn Trigger>> = vec![Box::new(RandomCapacity::new(5, no_drop, 2.0 * no_drop, recompiles))];
    let live = run(&mut session, batches.clone(), &mut triggers, &config).unwrap();

    let mut session = Session::new(compile(&spec, 5).unwrap(), &sim());
    let fixed = run(&mut session, batches, &mut [], &config).unwrap();

    let checksum_changes = live
        .recompiles
        .iter()
        .filter(|r| r.checksums.as_ref().is_none_or(|(a, b)| a != b))
        .count();
    let max_loss_diff = live
        .records
        .iter()
        .zip(&fixed.records)
        .map(|(a, b)| {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.drops, vec![0]);
            (a.loss - b.loss).abs()
        })
        .fold(0.0, f64::max);
    SafetyOutcome {
        recompiles: live.recompiles.len(),
        checksum_changes,
        max_loss_diff,
        iterations: live.records.len().min(fixed.records.len()),
    }
}

/// Requests a capacity change every `every` evaluations, alternating between two factors.
pub struct Toggle {
    every: usize,
    calls: usize,
    sleep: Duration,
}

impl Toggle {
    pub fn new(every: usize, sleep: Duration) -> Self {
        Self { every, calls: 0, sleep }
    }
}

impl Trigger for Toggle {
    fn name(&self) -> &str {
        "toggle"
    }

    fn evaluate(&mut self, snapshot: &TriggerSnapshot, spec: &GraphSpec) -> Result<TriggerDecision, String> {
        if !self.sleep.is_zero() {
            std::thread::sleep(self.sleep);
        }
        self.calls += 1;
        if self.every == 0 || !self.calls.is_multiple_of(self.every) {
            return Ok(TriggerDecision::none(snapshot));
        }
        let cap = &spec.blocks[0].capacity;
        let next = if cap.alpha[0] == 2.0 { 3.0 } else { 2.0 };
        let mut delta = SpecDelta::default();
        delta.alpha.insert(0, vec![next; cap.n]);
        Ok(TriggerDecision::recompile(snapshot, delta))
    }
}

#[derive(Debug, Clone)]
pub struct LatencyCheck {
    pub delta_launch: usize,
    pub recompiles: usize,
    /// `(decided_at, first iteration stamped with the new generation)` per recompile.
    pub effects: Vec<(u64, u64)>,
    /// Every effect landed at `decided_at + delta_launch + 1`, in metric records,
    /// recompile events and task generation stamps alike.
    pub exact: bool,
}

/// Runs a recompiling trigger at `delta_launch` and reads effect latency off generation stamps.
pub fn launch_latency(delta_launch: usize) -> LatencyCheck {
    let model = Moe {
        alpha: 2.0,
        ..Moe::default()
    };
    let batches = epoch_batches(21, 6, 5, model.batch, model.features, model.classes);
    let mut session = Session::new(compile(&model.spec(), 5).unwrap(), &sim());
    let mut triggers: Vec<Box<dyn Trigger>> = vec![Box::new(Toggle::new(3, Duration::ZERO))];
    let config = RuntimeConfig {
        delta_launch,
        ..RuntimeConfig::default()
    };
    let report = run(&mut session, batches, &mut triggers, &config).unwrap();
    latency_of(&report, delta_launch)
}

fn latency_of(report: &RunReport, delta_launch: usize) -> LatencyCheck {
    let mut effects = Vec::new();
    let mut exact = !report.recompiles.is_empty();
    for event in &report.recompiles {
        let first = report
            .records
            .iter()
            .find(|r| r.generation == event.generation)
            .map_or(u64::MAX, |r| r.iteration);
        let last_old = report
            .records
            .iter()
            .filter(|r| r.generation < event.generation)
            .map(|r| r.iteration)
            .max();
        let trace_first = report
            .trace
            .entries
            .iter()
            .filter(|t| t.generation == event.generation)
            .map(|t| t.iteration)
            .min()
            .unwrap_or(u64::MAX);
        let expected = event.decided_at + delta_launch as u64 + 1;
        exact &= first == expected
            && event.first_iteration == expected
            && trace_first == expected
            && last_old == Some(expected - 1);
        effects.push((event.decided_at, first));
    }
    LatencyCheck {
        delta_launch,
        recompiles: report.recompiles.len(),
        effects,
        exact,
    }
}

#[derive(Debug, Clone)]
pub struct IdleCheck {
    pub iteration_us: f64,
    pub idle_us: f64,
    pub trigger_us: f64,
    pub evaluations: usize,
}

impl IdleCheck {
    pub fn fraction(&self) -> f64 {
        self.idle_us / self.iteration_us
    }
}

/// Real threads with tasks padded to their modeled cost. The trigger runs
/// every `delta_launch` iterations and sleeps for `busy_iterations` of
/// measured iteration time.
pub fn trigger_idle(delta_launch: usize, busy_iterations: f64) -> IdleCheck {
    let model = Moe {
        alpha: 2.0,
        batch: 32,
        ..Moe::default()
    };
    let spec = model.spec();
    let cost = CostModel::uniform(0.0)
        .with("fwd.gate", TaskCost::fixed(1.0))
        .with("bwd.gate", TaskCost::fixed(1.0))
        .with("fwd.expert", TaskCost::fixed(1.5))
        .with("bwd.expert", TaskCost::fixed(1.5))
        .with("fwd.aggregate", TaskCost::fixed(0.5))
        .with("bwd.aggregate", TaskCost::fixed(0.5));
    let mode = ExecMode::Real { pad: Some(cost) };
    let iterations = 40;
    let batches = epoch_batches(31, 10, 4, model.batch, model.features, model.classes);
    assert_eq!(batches.len(), iterations);

    let mut session = Session::new(compile(&spec, 5).unwrap(), &mode);
    let warm = Instant::now();
    let config = RuntimeConfig {
        delta_launch,
        min_interval_iterations: delta_launch as u64,
        ..RuntimeConfig::default()
    };
    run(&mut session, batches.clone(), &mut [], &config).unwrap();
    let iteration_us = warm.elapsed().as_secs_f64() * 1e6 / iterations as f64;

    let sleep = Duration::from_secs_f64(iteration_us * busy_iterations / 1e6);
    let mut session = Session::new(compile(&spec, 5).unwrap(), &mode);
    let mut triggers: Vec<Box<dyn Trigger>> = vec![Box::new(Toggle::new(0, sleep))];
    let report = run(&mut session, batches, &mut triggers, &config).unwrap();
    IdleCheck {
        iteration_us,
        idle_us: report.idle_attributable_us,
        trigger_us: report.trigger_intervals_us.iter().map(|(s, e)| e - s).sum(),
        evaluations: report.trigger_intervals_us.len(),
    }
}

#[derive(Debug, Clone)]
pub struct CachingCheck {
    pub hit_fraction: f64,
    pub max_output_diff: f64,
    pub max_grad_diff: f64,
    pub makespan_off: f64,
    pub makespan_on: f64,
    pub expected_off: f64,
    pub expected_on: f64,
}

/// Runs the same batch twice so the cache holds its exact routes, then
/// compares the uncached and cached pipelines.
pub fn caching_equivalence(seed: u64, n: usize, k: usize) -> CachingCheck {
    let model = Moe {
        n,
        k,
        alpha: 1.5,
        ..Moe::default()
    };
    let spec = model.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = random_batch(&mut rng, model.batch, model.features, model.classes, 100);
    let plan = compile(&spec, n + 1).unwrap();
    execute(&plan, batch.clone(), &sim(), Phases::ForwardOnly).unwrap();

    let grads = |plan: &moe_core::CompiledPlan| -> Vec<f64> {
        plan.param_ids()
            .into_iter()
            .flat_map(|id| plan.param(id).unwrap().grad().to_vec())
            .collect()
    };
    plan.zero_param_grads();
    let off = execute(&plan, batch.clone(), &sim(), Phases::NoUpdate).unwrap();
    let off_grads = grads(&plan);
    let hit_fraction = off.record.as_ref().unwrap().hit_fraction;

    let mut cached = spec.clone();
    cached.set_cache_enabled(0, true);
    let (plan_on, _) = recompile(&plan, &cached).unwrap();
    plan_on.zero_param_grads();
    let on = execute(&plan_on, batch, &sim(), Phases::NoUpdate).unwrap();
    let on_grads = grads(&plan_on);

    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let (g, e, a) = (2.0, 1.5, 0.5);
    let cost = CostModel::uniform(0.0)
        .with("fwd.gate", TaskCost::fixed(g))
        .with("fwd.expert", TaskCost::fixed(e))
        .with("fwd.aggregate", TaskCost::fixed(a));
    CachingCheck {
        hit_fraction,
        max_output_diff: diff(off.output.unwrap().data(), on.output.unwrap().data()),
        max_grad_diff: diff(&off_grads, &on_grads),
        makespan_off: forward_makespan(&plan, &cost),
        makespan_on: forward_makespan(&plan_on, &cost),
        expected_off: g + e + a,
        expected_on: g.max(e) + a,
    }
}

/// Cooperation loss never exceeds specification loss on batches without drops.
/// Returns `(batches checked, violations)`.
pub fn jensen_batches(count: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for i in 0..count {
        let (n, k) = [(4, 1), (4, 2), (8, 2), (8, 4)][i % 4];
        let batch = rng.gen_range(1..=32);
        let c = rng.gen_range(2..=6);
        let experts: Vec<usize> = (0..n).collect();
        let mut routes = Vec::with_capacity(batch * k);
        for _ in 0..batch {
            routes.extend(experts.choose_multiple(&mut rng, k).copied());
        }
        let probs: Vec<f64> = (0..batch * n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let decision = GateDecision::from_routes(&probs, n, &routes, k);
        let asg = place(&routes, &vec![true; batch], k, &vec![batch; n]);
        assert_eq!(asg.drop_count(), 0);
        let outputs: Vec<Tensor> = (0..n)
            .map(|_| {
                let mut rows = Vec::with_capacity(batch * c);
                for _ in 0..batch {
                    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(1e-3..1.0f64).powi(3)).collect();
                    let z: f64 = raw.iter().sum();
                    rows.extend(raw.iter().map(|v| v / z));
                }
                Tensor::from_vec(&[batch, c], rows).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = outputs.iter().collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..c)).collect();
        let coop = cooperation_loss(&labels, &refs, &decision, &asg).unwrap();
        let spec = specification_loss(&labels, &aggregate_spec_fwd(&refs, &asg), &decision.weights, k).unwrap();
        if coop > spec + 1e-12 * spec.abs().max(1.0) {
            violations += 1;
        }
    }
    (count, violations)
}

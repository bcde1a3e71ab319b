use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, RuntimeError};
use crate::executor::{make_executor, ExecMode, Executor, TaskInstance, TaskTrace, Work};
use crate::graph::{recompile, Batch, BufKey, CompiledPlan, DepTracker, GraphSpec, IterCtx, Phase, RecompileReport, TaskKind};
use crate::runtime::metrics::{MetricBoard, MetricRecord, MetricValue};
use crate::tensor::Tensor;

/// Which phases of an iteration to launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phases {
    Full,
    /// Forward, metric and backward; parameters keep their gradients.
    NoUpdate,
    ForwardOnly,
}

impl Phases {
    fn includes(self, phase: Phase) -> bool {
        match self {
            Phases::Full => true,
            Phases::NoUpdate => phase != Phase::Update,
            Phases::ForwardOnly => !matches!(phase, Phase::Backward | Phase::Update),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaunchRecord {
    pub iteration: u64,
    pub generation: u64,
    pub epoch: u64,
    pub first_task: u64,
    pub task_count: usize,
}

/// The launcher's side of a training run: owns the plan, tracks buffer
/// accesses across iterations and feeds the executor.
pub struct Session {
    plan: CompiledPlan,
    executor: Box<dyn Executor>,
    tracker: DepTracker<u64, u64>,
    board: Arc<MetricBoard>,
    next_task: u64,
    next_iteration: u64,
    launches: Vec<LaunchRecord>,
}

impl Session {
    pub fn new(plan: CompiledPlan, mode: &ExecMode) -> Self {
        let executor = make_executor(mode, plan.workers());
        Self {
            plan,
            executor,
            tracker: DepTracker::new(),
            board: Arc::new(MetricBoard::new()),
            next_task: 0,
            next_iteration: 0,
            launches: Vec::new(),
        }
    }

    pub fn plan(&self) -> &CompiledPlan {
        &self.plan
    }

    pub fn board(&self) -> &Arc<MetricBoard> {
        &self.board
    }

    pub fn next_iteration(&self) -> u64 {
        self.next_iteration
    }

    pub fn launches(&self) -> &[LaunchRecord] {
        &self.launches
    }

    pub fn executor_epoch(&self) -> Instant {
        self.executor.epoch()
    }

    /// Appends one iteration's tasks (and its metric futures) at the launch frontier.
    pub fn launch(&mut self, batch: Batch, phases: Phases) -> Result<u64, RuntimeError> {
        let core = Arc::clone(self.plan.core());
        let iteration = self.next_iteration;
        self.next_iteration += 1;
        if core.has_metric() {
            self.board.push_iteration(iteration);
        }
        let ctx = Arc::new(IterCtx {
            iteration,
            epoch: batch.epoch,
            generation: core.generation,
            board: Arc::clone(&self.board),
        });
        let ids = |keys: &[BufKey]| -> Vec<u64> { keys.iter().map(|k| core.buffer(*k).id()).collect() };
        let first_task = self.next_task;
        let rows = batch.labels.len();
        let epoch = batch.epoch;
        let load_id = self.alloc_id();
        let deps = self.tracker.register(load_id, &[], &ids(&core.load_writes));
        self.executor.submit(TaskInstance {
            id: load_id,
            iteration,
            generation: core.generation,
            kind: TaskKind::LOAD,
            worker: 0,
            deps,
            rows,
            work: Work::Load {
                core: Arc::clone(&core),
                batch: Arc::new(batch),
            },
        })?;
        for t in core.tasks.iter().filter(|t| phases.includes(t.kind.phase)) {
            let id = self.alloc_id();
            let deps = self.tracker.register(id, &ids(&t.reads), &ids(&t.writes));
            self.executor.submit(TaskInstance {
                id,
                iteration,
                generation: core.generation,
                kind: t.kind,
                worker: t.worker,
                deps,
                rows: t.rows,
                work: Work::Plan {
                    core: Arc::clone(&core),
                    index: t.id,
                    ctx: Arc::clone(&ctx),
                },
            })?;
        }
        self.launches.push(LaunchRecord {
            iteration,
            generation: core.generation,
            epoch,
            first_task,
            task_count: (self.next_task - first_task) as usize,
        });
        Ok(iteration)
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_task;
        self.next_task += 1;
        id
    }

    /// Swaps in a recompiled plan. Already-launched tasks keep the old generation.
    pub fn recompile(&mut self, spec: &GraphSpec) -> Result<RecompileReport, RuntimeError> {
        let (plan, report) = recompile(&self.plan, spec)?;
        self.plan = plan;
        Ok(report)
    }

    pub fn wait_progress(&mut self) -> Result<(), RuntimeError> {
        self.executor.wait_progress(&self.board)
    }

    pub fn drain(&mut self) -> Result<(), RuntimeError> {
        self.executor.drain()
    }

    pub fn trace(&self) -> TaskTrace {
        self.executor.trace()
    }

    pub fn starvation(&self) -> Vec<(f64, f64)> {
        self.executor.starvation()
    }
}

/// What the launcher must do before it may run triggers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapState {
    Ready,
    Wait,
    LaunchMore,
}

/// `Wait` if any queue is longer than `delta_launch`, `LaunchMore` if any is
/// shorter, otherwise `Ready`.
pub fn enforce_gap(queue_lengths: &[usize], delta_launch: usize) -> GapState {
    if queue_lengths.iter().any(|&l| l > delta_launch) {
        GapState::Wait
    } else if queue_lengths.iter().any(|&l| l < delta_launch) {
        GapState::LaunchMore
    } else {
        GapState::Ready
    }
}

/// Capacity and caching edits; the only changes recompilation accepts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecDelta {
    pub alpha: BTreeMap<usize, Vec<f64>>,
    pub cache: BTreeMap<usize, bool>,
}

impl SpecDelta {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty() && self.cache.is_empty()
    }

    pub fn apply(&self, spec: &GraphSpec) -> GraphSpec {
        let mut out = spec.clone();
        for (&b, a) in &self.alpha {
            out.set_alpha(b, a.clone());
        }
        for (&b, &on) in &self.cache {
            out.set_cache_enabled(b, on);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TriggerAction {
    None,
    Recompile(SpecDelta),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerDecision {
    pub action: TriggerAction,
    pub metrics_snapshot: BTreeMap<String, MetricValue>,
    pub decided_at_iteration: u64,
}

impl TriggerDecision {
    pub fn none(snapshot: &TriggerSnapshot) -> Self {
        Self {
            action: TriggerAction::None,
            metrics_snapshot: snapshot.values.clone(),
            decided_at_iteration: snapshot.iteration,
        }
    }

    pub fn recompile(snapshot: &TriggerSnapshot, delta: SpecDelta) -> Self {
        Self {
            action: TriggerAction::Recompile(delta),
            metrics_snapshot: snapshot.values.clone(),
            decided_at_iteration: snapshot.iteration,
        }
    }
}

/// What a trigger sees: the latest resolved value of every metric plus the
/// full records resolved since its previous evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSnapshot {
    pub iteration: u64,
    pub epoch: u64,
    pub values: BTreeMap<String, MetricValue>,
    pub latest: MetricRecord,
    pub new_records: Vec<MetricRecord>,
}

/// A user recompile trigger. Runs on its own thread while launched tasks keep executing.
pub trait Trigger: Send {
    fn name(&self) -> &str;
    fn evaluate(&mut self, snapshot: &TriggerSnapshot, spec: &GraphSpec) -> Result<TriggerDecision, String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub delta_launch: usize,
    pub min_interval_iterations: u64,
    /// New `delta_launch` values taking effect before launching the keyed iteration.
    pub delta_changes: BTreeMap<u64, usize>,
    /// Record parameter checksums around every recompile.
    pub verify_weights: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            delta_launch: 1,
            min_interval_iterations: 1,
            delta_changes: BTreeMap::new(),
            verify_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecompileEvent {
    pub decided_at: u64,
    pub generation: u64,
    /// First iteration launched with the new plan.
    pub first_iteration: u64,
    pub reallocated: usize,
    pub triggers: Vec<String>,
    /// Parameter checksums `(before, after)` when `verify_weights` is set.
    pub checksums: Option<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<MetricRecord>,
    pub decisions: Vec<(String, TriggerDecision)>,
    pub recompiles: Vec<RecompileEvent>,
    pub launches: Vec<LaunchRecord>,
    pub trigger_intervals_us: Vec<(f64, f64)>,
    /// Time the executor sat with no work while a trigger was running.
    pub idle_attributable_us: f64,
    pub trace: TaskTrace,
    pub final_spec: GraphSpec,
}

fn overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &(s1, e1) in a {
        for &(s2, e2) in b {
            let lo = s1.max(s2);
            let hi = e1.min(e2);
            if hi > lo {
                total += hi - lo;
            }
        }
    }
    total
}

/// Drives a session over `batches`: keeps `delta_launch` iterations in flight,
/// runs triggers when the gap is exact and applies their edits at the launch frontier.
pub fn run(
    session: &mut Session,
    batches: impl IntoIterator<Item = Batch>,
    triggers: &mut [Box<dyn Trigger>],
    config: &RuntimeConfig,
) -> Result<RunReport, Error> {
    let mut batches = batches.into_iter().peekable();
    let mut delta = config.delta_launch;
    let mut last_eval: Option<u64> = None;
    let mut seen_records = 0usize;
    let mut decisions = Vec::new();
    let mut recompiles = Vec::new();
    let mut intervals = Vec::new();
    let board = Arc::clone(session.board());
    let epoch = session.executor_epoch();
    loop {
        let next = session.next_iteration();
        if let Some(&d) = config.delta_changes.get(&next) {
            delta = d;
        }
        if batches.peek().is_none() {
            if board.pending() == 0 {
                break;
            }
            session.wait_progress()?;
            continue;
        }
        let view = board.view();
        match enforce_gap(&view.queue_lengths, delta) {
            GapState::Wait => {
                session.wait_progress()?;
                continue;
            }
            GapState::LaunchMore => {}
            GapState::Ready => {
                let due = match (&view.latest, last_eval) {
                    (Some(latest), Some(prev)) => latest.iteration >= prev + config.min_interval_iterations,
                    (Some(_), None) => true,
                    (None, _) => false,
                };
                if due && !triggers.is_empty() {
                    let latest = view.latest.clone().expect("due implies a resolved record");
                    let new_records = board.records_from(seen_records);
                    seen_records += new_records.len();
                    last_eval = Some(latest.iteration);
                    let snapshot = TriggerSnapshot {
                        iteration: latest.iteration,
                        epoch: latest.epoch,
                        values: board.latest_values(),
                        latest,
                        new_records,
                    };
                    let spec = session.plan().spec().clone();
                    let started = Instant::now();
                    let results: Vec<(String, Result<TriggerDecision, String>)> = std::thread::scope(|s| {
                        s.spawn(|| {
                            triggers
                                .iter_mut()
                                .map(|t| (t.name().to_string(), t.evaluate(&snapshot, &spec)))
                                .collect()
                        })
                        .join()
                    })
                    .map_err(|_| RuntimeError::Internal("trigger thread panicked".into()))?;
                    let ended = Instant::now();
                    let us = |t: Instant| t.duration_since(epoch).as_secs_f64() * 1e6;
                    intervals.push((us(started), us(ended)));
                    let mut new_spec = spec.clone();
                    let mut fired = Vec::new();
                    for (name, result) in results {
                        let decision = result.map_err(|message| RuntimeError::Trigger {
                            name: name.clone(),
                            iteration: snapshot.iteration,
                            message,
                        })?;
                        if let TriggerAction::Recompile(delta) = &decision.action {
                            if !delta.is_empty() {
                                new_spec = delta.apply(&new_spec);
                                fired.push(name.clone());
                            }
                        }
                        decisions.push((name, decision));
                    }
                    if !fired.is_empty() {
                        let before = config.verify_weights.then(|| session.plan().weights_checksum());
                        let report = session.recompile(&new_spec)?;
                        let checksums = before.map(|b| (b, session.plan().weights_checksum()));
                        recompiles.push(RecompileEvent {
                            decided_at: snapshot.iteration,
                            generation: report.generation,
                            first_iteration: session.next_iteration(),
                            reallocated: report.reallocated.len(),
                            triggers: fired,
                            checksums,
                        });
                    }
                }
            }
        }
        let batch = batches.next().expect("peeked");
        session.launch(batch, Phases::Full)?;
    }
    session.drain()?;
    let starvation = session.starvation();
    Ok(RunReport {
        records: board.records(),
        decisions,
        recompiles,
        launches: session.launches().to_vec(),
        idle_attributable_us: overlap(&intervals, &starvation),
        trigger_intervals_us: intervals,
        trace: session.trace(),
        final_spec: session.plan().spec().clone(),
    })
}

/// Result of a one-shot execution.
#[derive(Debug, Clone)]
pub struct ExecOutputs {
    /// The graph's output tensor after the iteration.
    pub output: Option<Tensor>,
    pub record: Option<MetricRecord>,
    pub trace: TaskTrace,
}

/// Runs one iteration of `plan` on `batch` and waits for it to finish.
pub fn execute(plan: &CompiledPlan, batch: Batch, mode: &ExecMode, phases: Phases) -> Result<ExecOutputs, RuntimeError> {
    let mut session = Session::new(plan.clone(), mode);
    session.launch(batch, phases)?;
    session.drain()?;
    Ok(ExecOutputs {
        output: plan.read_tensor(plan.spec().output),
        record: session.board().records().pop(),
        trace: session.trace(),
    })
}

//! Task executors (simulated list scheduler and a thread pool) and
//! critical-path analysis.

mod trace;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

pub use trace::{CostModel, TaskCost, TaskTrace, TraceEntry};

use crate::error::RuntimeError;
use crate::graph::{run_load, run_task, Batch, CompiledPlan, IterCtx, PlanCore, TaskKind};
use crate::runtime::metrics::MetricBoard;

/// Executable payload of a task instance.
#[derive(Debug, Clone)]
pub enum Work {
    Plan {
        core: Arc<PlanCore>,
        index: usize,
        ctx: Arc<IterCtx>,
    },
    Load {
        core: Arc<PlanCore>,
        batch: Arc<Batch>,
    },
}

/// A launched task: one plan task (or load) of one iteration.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub id: u64,
    pub iteration: u64,
    pub generation: u64,
    pub kind: TaskKind,
    pub worker: usize,
    /// Ids of earlier-launched instances.
    pub deps: Vec<u64>,
    pub rows: usize,
    pub work: Work,
}

impl TaskInstance {
    pub fn run(&self) -> Result<(), RuntimeError> {
        match &self.work {
            Work::Plan { core, index, ctx } => run_task(core, *index, ctx),
            Work::Load { core, batch } => run_load(core, batch),
        }
        .map_err(|e| match e {
            RuntimeError::Task { kind, message, .. } => RuntimeError::Task {
                task: self.id,
                kind,
                message,
            },
            other => other,
        })
    }

    fn entry(&self, worker: usize, start_us: f64, end_us: f64) -> TraceEntry {
        TraceEntry {
            id: self.id,
            iteration: self.iteration,
            generation: self.generation,
            kind: self.kind.to_string(),
            worker,
            start_us,
            end_us,
            deps: self.deps.clone(),
        }
    }
}

/// Execution mode of a session.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecMode {
    /// Tasks run sequentially on the caller's thread; times come from the cost model.
    Simulated(CostModel),
    /// Worker threads; tasks optionally padded to their modeled cost (wall clock).
    Real { pad: Option<CostModel> },
}

pub trait Executor: Send {
    fn submit(&mut self, task: TaskInstance) -> Result<(), RuntimeError>;
    /// Blocks until at least one more metric resolves or nothing is left to run.
    fn wait_progress(&mut self, board: &MetricBoard) -> Result<(), RuntimeError>;
    /// Runs every submitted task to completion.
    fn drain(&mut self) -> Result<(), RuntimeError>;
    fn trace(&self) -> TaskTrace;
    /// Intervals (µs since the executor epoch) with no task submitted or running.
    fn starvation(&self) -> Vec<(f64, f64)>;
    fn epoch(&self) -> Instant;
}

pub fn make_executor(mode: &ExecMode, workers: usize) -> Box<dyn Executor> {
    match mode {
        ExecMode::Simulated(cost) => Box::new(SimExecutor::new(cost.clone(), workers)),
        ExecMode::Real { pad } => Box::new(ThreadedExecutor::new(workers, pad.clone())),
    }
}

/// Deterministic list scheduler: tasks run in launch order; each starts at the
/// later of its worker becoming free and its dependencies ending.
#[derive(Debug)]
pub struct SimExecutor {
    cost: CostModel,
    worker_free: Vec<f64>,
    ends: HashMap<u64, f64>,
    pending: VecDeque<TaskInstance>,
    trace: TaskTrace,
    epoch: Instant,
}

impl SimExecutor {
    pub fn new(cost: CostModel, workers: usize) -> Self {
        Self {
            cost,
            worker_free: vec![0.0; workers.max(1)],
            ends: HashMap::new(),
            pending: VecDeque::new(),
            trace: TaskTrace::default(),
            epoch: Instant::now(),
        }
    }

    fn step(&mut self) -> Result<bool, RuntimeError> {
        let Some(task) = self.pending.pop_front() else {
            return Ok(false);
        };
        task.run()?;
        let w = task.worker % self.worker_free.len();
        let ready = task
            .deps
            .iter()
            .filter_map(|d| self.ends.get(d))
            .fold(self.worker_free[w], |a, &b| a.max(b));
        let end = ready + self.cost.cost(&task.kind, task.rows);
        self.worker_free[w] = end;
        self.ends.insert(task.id, end);
        self.trace.entries.push(task.entry(w, ready * 1000.0, end * 1000.0));
        Ok(true)
    }
}

impl Executor for SimExecutor {
    fn submit(&mut self, task: TaskInstance) -> Result<(), RuntimeError> {
        self.pending.push_back(task);
        Ok(())
    }

    fn wait_progress(&mut self, board: &MetricBoard) -> Result<(), RuntimeError> {
        let seen = board.resolved();
        while board.resolved() == seen {
            if !self.step()? {
                break;
            }
        }
        Ok(())
    }

    fn drain(&mut self) -> Result<(), RuntimeError> {
        while self.step()? {}
        Ok(())
    }

    fn trace(&self) -> TaskTrace {
        self.trace.clone()
    }

    fn starvation(&self) -> Vec<(f64, f64)> {
        Vec::new()
    }

    fn epoch(&self) -> Instant {
        self.epoch
    }
}

#[derive(Debug)]
struct PoolState {
    queues: Vec<VecDeque<TaskInstance>>,
    done: HashSet<u64>,
    outstanding: usize,
    error: Option<RuntimeError>,
    shutdown: bool,
    trace: Vec<TraceEntry>,
    starving_since: Option<Instant>,
    starvation: Vec<(Instant, Instant)>,
}

#[derive(Debug)]
struct Pool {
    state: Mutex<PoolState>,
    cv: Condvar,
    epoch: Instant,
    pad: Option<CostModel>,
}

impl Pool {
    fn lock(&self) -> MutexGuard<'_, PoolState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn worker_loop(&self, w: usize) {
        loop {
            let task = {
                let mut st = self.lock();
                loop {
                    if st.shutdown {
                        return;
                    }
                    if st.error.is_none() {
                        if let Some(head) = st.queues[w].front() {
                            if head.deps.iter().all(|d| st.done.contains(d)) {
                                break st.queues[w].pop_front().expect("head exists");
                            }
                        }
                    }
                    st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
                }
            };
            let start = Instant::now();
            // A panicking task must surface as an error; a dead worker would stall the pool.
            let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| task.run())).unwrap_or_else(|p| {
                let message = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into());
                Err(RuntimeError::Task {
                    task: task.id,
                    kind: task.kind.to_string(),
                    message,
                })
            });
            if let Some(model) = &self.pad {
                let target = Duration::from_secs_f64(model.cost(&task.kind, task.rows) / 1000.0);
                while let Some(left) = target.checked_sub(start.elapsed()) {
                    if left > Duration::from_micros(200) {
                        std::thread::sleep(left - Duration::from_micros(100));
                    } else if left.is_zero() {
                        break;
                    } else {
                        std::hint::spin_loop();
                    }
                }
            }
            let end = Instant::now();
            let mut st = self.lock();
            let us = |t: Instant| t.duration_since(self.epoch).as_secs_f64() * 1e6;
            st.trace.push(task.entry(w, us(start), us(end)));
            st.done.insert(task.id);
            st.outstanding -= 1;
            if st.outstanding == 0 {
                st.starving_since = Some(end);
            }
            if let Err(e) = result {
                st.error.get_or_insert(e);
            }
            drop(st);
            self.cv.notify_all();
        }
    }
}

/// Fixed pool of worker threads, each draining its own in-order queue.
#[derive(Debug)]
pub struct ThreadedExecutor {
    pool: Arc<Pool>,
    handles: Vec<JoinHandle<()>>,
}

impl ThreadedExecutor {
    pub fn new(workers: usize, pad: Option<CostModel>) -> Self {
        let workers = workers.max(1);
        let epoch = Instant::now();
        let pool = Arc::new(Pool {
            state: Mutex::new(PoolState {
                queues: vec![VecDeque::new(); workers],
                done: HashSet::new(),
                outstanding: 0,
                error: None,
                shutdown: false,
                trace: Vec::new(),
                starving_since: Some(epoch),
                starvation: Vec::new(),
            }),
            cv: Condvar::new(),
            epoch,
            pad,
        });
        let handles = (0..workers)
            .map(|w| {
                let pool = Arc::clone(&pool);
                std::thread::Builder::new()
                    .name(format!("moe-worker-{w}"))
                    .spawn(move || pool.worker_loop(w))
                    .expect("spawn worker thread")
            })
            .collect();
        Self { pool, handles }
    }

    fn check_error(&self) -> Result<(), RuntimeError> {
        match &self.pool.lock().error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }
}

impl Executor for ThreadedExecutor {
    fn submit(&mut self, task: TaskInstance) -> Result<(), RuntimeError> {
        let mut st = self.pool.lock();
        if let Some(e) = &st.error {
            return Err(e.clone());
        }
        if let Some(since) = st.starving_since.take() {
            st.starvation.push((since, Instant::now()));
        }
        st.outstanding += 1;
        let w = task.worker % st.queues.len();
        st.queues[w].push_back(task);
        drop(st);
        self.pool.cv.notify_all();
        Ok(())
    }

    fn wait_progress(&mut self, board: &MetricBoard) -> Result<(), RuntimeError> {
        let seen = board.resolved();
        loop {
            self.check_error()?;
            if board.wait_resolved(seen, Duration::from_millis(2)) > seen {
                return Ok(());
            }
            if self.pool.lock().outstanding == 0 {
                return self.check_error();
            }
        }
    }

    fn drain(&mut self) -> Result<(), RuntimeError> {
        let mut st = self.pool.lock();
        while st.outstanding > 0 && st.error.is_none() {
            st = self.pool.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        match &st.error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn trace(&self) -> TaskTrace {
        let mut entries = self.pool.lock().trace.clone();
        entries.sort_by(|a, b| a.start_us.total_cmp(&b.start_us).then(a.id.cmp(&b.id)));
        TaskTrace { entries }
    }

    fn starvation(&self) -> Vec<(f64, f64)> {
        let st = self.pool.lock();
        let us = |t: Instant| t.duration_since(self.pool.epoch).as_secs_f64() * 1e6;
        let mut out: Vec<(f64, f64)> = st.starvation.iter().map(|&(a, b)| (us(a), us(b))).collect();
        if let Some(since) = st.starving_since {
            out.push((us(since), us(Instant::now())));
        }
        out
    }

    fn epoch(&self) -> Instant {
        self.pool.epoch
    }
}

impl Drop for ThreadedExecutor {
    fn drop(&mut self) {
        self.pool.lock().shutdown = true;
        self.pool.cv.notify_all();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Same-worker predecessor of each task in plan order.
fn program_order(plan: &CompiledPlan) -> Vec<Option<usize>> {
    let mut last: HashMap<usize, usize> = HashMap::new();
    plan.tasks()
        .iter()
        .map(|t| last.insert(t.worker, t.id))
        .collect()
}

/// Earliest-start schedule of one iteration's plan tasks (no load task), without running kernels.
/// Returns `(start, end)` per task in simulated milliseconds.
pub fn schedule(plan: &CompiledPlan, cost: &CostModel) -> Vec<(f64, f64)> {
    let prev = program_order(plan);
    let mut times: Vec<(f64, f64)> = Vec::with_capacity(plan.tasks().len());
    for t in plan.tasks() {
        let start = t
            .deps
            .iter()
            .chain(prev[t.id].iter())
            .map(|&d| times[d].1)
            .fold(0.0, f64::max);
        times.push((start, start + cost.cost(&t.kind, t.rows)));
    }
    times
}

/// Longest cost-weighted path through the task DAG plus same-worker program
/// order. Returns the path cost and its task ids, source first.
pub fn critical_path(plan: &CompiledPlan, cost: &CostModel) -> (f64, Vec<usize>) {
    let tasks = plan.tasks();
    if tasks.is_empty() {
        return (0.0, Vec::new());
    }
    let prev = program_order(plan);
    let mut best: Vec<f64> = Vec::with_capacity(tasks.len());
    let mut from: Vec<Option<usize>> = Vec::with_capacity(tasks.len());
    for t in tasks {
        let mut pick: Option<usize> = None;
        for &d in t.deps.iter().chain(prev[t.id].iter()) {
            if pick.is_none_or(|p| best[d] > best[p]) {
                pick = Some(d);
            }
        }
        let base = pick.map_or(0.0, |p| best[p]);
        best.push(base + cost.cost(&t.kind, t.rows));
        from.push(pick);
    }
    let mut end = 0;
    for i in 1..best.len() {
        if best[i] > best[end] {
            end = i;
        }
    }
    let mut path = vec![end];
    while let Some(p) = from[*path.last().expect("non-empty")] {
        path.push(p);
    }
    path.reverse();
    (best[end], path)
}

/// Forward makespan of one iteration under `cost`: the latest end of any
/// forward-phase task in the earliest-start schedule.
pub fn forward_makespan(plan: &CompiledPlan, cost: &CostModel) -> f64 {
    schedule(plan, cost)
        .iter()
        .zip(plan.tasks())
        .filter(|(_, t)| t.kind.is_forward())
        .map(|(s, _)| s.1)
        .fold(0.0, f64::max)
}

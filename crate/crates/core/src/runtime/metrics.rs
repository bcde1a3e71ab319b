//! Per-metric future queues and the board the executor resolves them on.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::Serialize;

use crate::error::RuntimeError;

/// Metric payloads: scalars or fixed-length vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl MetricValue {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            MetricValue::Scalar(v) => Some(*v),
            MetricValue::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            MetricValue::Vector(v) => Some(v),
            MetricValue::Scalar(_) => None,
        }
    }
}

/// FIFO of unresolved futures for one metric; its length is the number of
/// launched-but-unexecuted iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricQueue {
    name: String,
    pending: VecDeque<u64>,
    resolved_latest: Option<(u64, MetricValue)>,
}

impl MetricQueue {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pending: VecDeque::new(),
            resolved_latest: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Appends the future for `iteration`.
    pub fn push(&mut self, iteration: u64) {
        self.pending.push_back(iteration);
    }

    /// Pops the head future, which must belong to `iteration`.
    pub fn resolve(&mut self, iteration: u64, value: MetricValue) -> Result<(), RuntimeError> {
        match self.pending.front() {
            None => Err(RuntimeError::EmptyQueue(self.name.clone())),
            Some(&head) if head != iteration => Err(RuntimeError::OutOfOrder {
                queue: self.name.clone(),
                expected: head,
                got: iteration,
            }),
            Some(_) => {
                self.pending.pop_front();
                self.resolved_latest = Some((iteration, value));
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn resolved_latest(&self) -> Option<&(u64, MetricValue)> {
        self.resolved_latest.as_ref()
    }
}

/// Everything the metric task observes for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub generation: u64,
    pub loss: f64,
    pub task_loss: f64,
    pub balance: f64,
    pub accuracy: f64,
    /// Dropped pairs over routed pairs, all blocks.
    pub drop_rate: f64,
    /// Hit fraction of block 0 (0 without a cache).
    pub hit_fraction: f64,
    pub mean_alpha: f64,
    pub mean_capacity: f64,
    /// Per block: routed (pre-drop) pairs per expert.
    pub counts: Vec<Vec<usize>>,
    /// Per block: the gate's own routing share per expert (`T_i`).
    pub token_fractions: Vec<Vec<f64>>,
    pub drops: Vec<usize>,
    pub hit_fractions: Vec<f64>,
    pub capacities: Vec<Vec<usize>>,
    pub alphas: Vec<Vec<f64>>,
    pub cache_enabled: Vec<bool>,
}

pub const METRIC_NAMES: [&str; 8] = [
    "loss",
    "task_loss",
    "balance",
    "accuracy",
    "drop_rate",
    "hit_fraction",
    "counts",
    "token_fractions",
];

impl MetricRecord {
    pub fn value(&self, name: &str) -> Option<MetricValue> {
        let first_block = |v: &Vec<Vec<f64>>| MetricValue::Vector(v.first().cloned().unwrap_or_default());
        Some(match name {
            "loss" => MetricValue::Scalar(self.loss),
            "task_loss" => MetricValue::Scalar(self.task_loss),
            "balance" => MetricValue::Scalar(self.balance),
            "accuracy" => MetricValue::Scalar(self.accuracy),
            "drop_rate" => MetricValue::Scalar(self.drop_rate),
            "hit_fraction" => MetricValue::Scalar(self.hit_fraction),
            "counts" => first_block(
                &self
                    .counts
                    .iter()
                    .map(|c| c.iter().map(|&v| v as f64).collect())
                    .collect(),
            ),
            "token_fractions" => first_block(&self.token_fractions),
            _ => return None,
        })
    }

    /// Largest routing share over the experts of block 0.
    pub fn max_token_fraction(&self) -> f64 {
        self.token_fractions
            .first()
            .map_or(0.0, |t| t.iter().copied().fold(0.0, f64::max))
    }
}

#[derive(Debug)]
struct BoardState {
    queues: BTreeMap<String, MetricQueue>,
    records: Vec<MetricRecord>,
    resolved: u64,
}

/// Metric queues shared by the launcher (push) and executor (resolve).
#[derive(Debug)]
pub struct MetricBoard {
    state: Mutex<BoardState>,
    changed: Condvar,
}

impl Default for MetricBoard {
    fn default() -> Self {
        Self::new()
    }
}

/// Consistent view of the board for the launcher.
#[derive(Debug, Clone, PartialEq)]
pub struct BoardView {
    pub queue_lengths: Vec<usize>,
    pub latest: Option<MetricRecord>,
    pub resolved: u64,
}

impl MetricBoard {
    pub fn new() -> Self {
        let queues = METRIC_NAMES
            .iter()
            .map(|n| (n.to_string(), MetricQueue::new(*n)))
            .collect();
        Self {
            state: Mutex::new(BoardState {
                queues,
                records: Vec::new(),
                resolved: 0,
            }),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, BoardState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Pushes one future per metric for `iteration`.
    pub fn push_iteration(&self, iteration: u64) {
        for q in self.lock().queues.values_mut() {
            q.push(iteration);
        }
    }

    /// Resolves every metric's head future from `record`.
    pub fn resolve(&self, record: MetricRecord) -> Result<(), RuntimeError> {
        let mut st = self.lock();
        for q in st.queues.values_mut() {
            let value = record
                .value(q.name())
                .ok_or_else(|| RuntimeError::Internal(format!("no value for metric `{}`", q.name())))?;
            q.resolve(record.iteration, value)?;
        }
        st.records.push(record);
        st.resolved += 1;
        drop(st);
        self.changed.notify_all();
        Ok(())
    }

    pub fn view(&self) -> BoardView {
        let st = self.lock();
        BoardView {
            queue_lengths: st.queues.values().map(MetricQueue::len).collect(),
            latest: st.records.last().cloned(),
            resolved: st.resolved,
        }
    }

    pub fn queue(&self, name: &str) -> Option<MetricQueue> {
        self.lock().queues.get(name).cloned()
    }

    pub fn pending(&self) -> usize {
        self.lock().queues.values().map(MetricQueue::len).max().unwrap_or(0)
    }

    pub fn resolved(&self) -> u64 {
        self.lock().resolved
    }

    /// Blocks until more than `seen` resolutions happened or `timeout` elapses.
    pub fn wait_resolved(&self, seen: u64, timeout: Duration) -> u64 {
        let st = self.lock();
        let (st, _) = self
            .changed
            .wait_timeout_while(st, timeout, |s| s.resolved <= seen)
            .unwrap_or_else(|e| e.into_inner());
        st.resolved
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.lock().records.clone()
    }

    pub fn records_from(&self, start: usize) -> Vec<MetricRecord> {
        let st = self.lock();
        st.records.get(start..).map(<[MetricRecord]>::to_vec).unwrap_or_default()
    }

    pub fn record_count(&self) -> usize {
        self.lock().records.len()
    }

    /// `resolved_latest` of every queue.
    pub fn latest_values(&self) -> BTreeMap<String, MetricValue> {
        self.lock()
            .queues
            .iter()
            .filter_map(|(k, q)| q.resolved_latest().map(|(_, v)| (k.clone(), v.clone())))
            .collect()
    }
}

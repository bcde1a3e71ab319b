//! Cost model and execution traces.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::graph::TaskKind;

/// `fixed + per_row · rows` simulated milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskCost {
    #[serde(default)]
    pub fixed: f64,
    #[serde(default)]
    pub per_row: f64,
}

impl TaskCost {
    pub const fn fixed(ms: f64) -> Self {
        Self { fixed: ms, per_row: 0.0 }
    }
}

/// Simulated cost per task kind (`fwd.gate`, `bwd.expert`, `load`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    #[serde(default)]
    pub kinds: BTreeMap<String, TaskCost>,
    pub default: TaskCost,
}

impl Default for CostModel {
    /// Dense work dominates; routing and bookkeeping are cheap.
    fn default() -> Self {
        let mut kinds = BTreeMap::new();
        for (k, fixed, per_row) in [
            ("load", 0.01, 0.0),
            ("metric", 0.01, 0.0),
            ("fwd.gate", 0.05, 0.004),
            ("bwd.gate", 0.05, 0.008),
            ("fwd.expert", 0.05, 0.004),
            ("bwd.expert", 0.05, 0.008),
            ("fwd.topk", 0.01, 0.0005),
            ("fwd.groupby", 0.02, 0.0005),
            ("bwd.groupby", 0.02, 0.0005),
            ("fwd.aggregate", 0.02, 0.0005),
            ("bwd.aggregate", 0.02, 0.001),
            ("fwd.cache_lookup", 0.01, 0.0002),
            ("fwd.cache_update", 0.01, 0.0002),
        ] {
            kinds.insert(k.to_string(), TaskCost { fixed, per_row });
        }
        Self {
            kinds,
            default: TaskCost {
                fixed: 0.01,
                per_row: 0.0005,
            },
        }
    }
}

impl CostModel {
    /// Every task costs `ms`.
    pub fn uniform(ms: f64) -> Self {
        Self {
            kinds: BTreeMap::new(),
            default: TaskCost::fixed(ms),
        }
    }

    pub fn with(mut self, kind: &str, cost: TaskCost) -> Self {
        self.kinds.insert(kind.to_string(), cost);
        self
    }

    pub fn cost(&self, kind: &TaskKind, rows: usize) -> f64 {
        let c = self.kinds.get(&kind.to_string()).unwrap_or(&self.default);
        c.fixed + c.per_row * rows as f64
    }

    /// Costs must be finite and non-negative.
    pub fn validate(&self) -> Result<(), String> {
        let ok = |c: &TaskCost| c.fixed.is_finite() && c.per_row.is_finite() && c.fixed >= 0.0 && c.per_row >= 0.0;
        if !ok(&self.default) {
            return Err("default cost must be finite and non-negative".into());
        }
        if let Some((k, _)) = self.kinds.iter().find(|(_, c)| !ok(c)) {
            return Err(format!("cost of `{k}` must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub id: u64,
    pub iteration: u64,
    pub generation: u64,
    pub kind: String,
    pub worker: usize,
    pub start_us: f64,
    pub end_us: f64,
    pub deps: Vec<u64>,
}

/// Executed tasks in completion-record order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaskTrace {
    pub entries: Vec<TraceEntry>,
}

impl TaskTrace {
    pub fn makespan_us(&self) -> f64 {
        let start = self.entries.iter().map(|e| e.start_us).fold(f64::INFINITY, f64::min);
        let end = self.entries.iter().map(|e| e.end_us).fold(0.0, f64::max);
        if self.entries.is_empty() {
            0.0
        } else {
            end - start
        }
    }

    /// Latest end among entries matching `pred`, minus the earliest start of all entries.
    pub fn span_until(&self, pred: impl Fn(&TraceEntry) -> bool) -> f64 {
        let start = self.entries.iter().map(|e| e.start_us).fold(f64::INFINITY, f64::min);
        let end = self
            .entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.end_us)
            .fold(f64::NEG_INFINITY, f64::max);
        if end.is_finite() {
            end - start
        } else {
            0.0
        }
    }

    pub fn iteration(&self, iteration: u64) -> TaskTrace {
        TaskTrace {
            entries: self.entries.iter().filter(|e| e.iteration == iteration).cloned().collect(),
        }
    }

    /// Checks that tasks on one worker never overlap and that every task
    /// starts no earlier than each recorded dependency ends.
    pub fn validate(&self) -> Result<(), String> {
        let ends: HashMap<u64, f64> = self.entries.iter().map(|e| (e.id, e.end_us)).collect();
        for e in &self.entries {
            if e.end_us < e.start_us {
                return Err(format!("task {} ends before it starts", e.id));
            }
            for d in &e.deps {
                match ends.get(d) {
                    Some(&end) if end > e.start_us => {
                        return Err(format!("task {} starts at {} before dependency {d} ends at {end}", e.id, e.start_us));
                    }
                    _ => {}
                }
            }
        }
        let mut by_worker: BTreeMap<usize, Vec<&TraceEntry>> = BTreeMap::new();
        for e in &self.entries {
            by_worker.entry(e.worker).or_default().push(e);
        }
        for (w, mut list) in by_worker {
            list.sort_by(|a, b| a.start_us.total_cmp(&b.start_us).then(a.end_us.total_cmp(&b.end_us)));
            for pair in list.windows(2) {
                if pair[1].start_us < pair[0].end_us {
                    return Err(format!("tasks {} and {} overlap on worker {w}", pair[0].id, pair[1].id));
                }
            }
        }
        Ok(())
    }

    /// Pairs of task ids whose execution intervals overlap.
    pub fn overlapping_pairs(&self) -> Vec<(u64, u64)> {
        let mut sorted: Vec<&TraceEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.start_us.total_cmp(&b.start_us));
        let mut out = Vec::new();
        for (i, a) in sorted.iter().enumerate() {
            for b in &sorted[i + 1..] {
                if b.start_us >= a.end_us {
                    break;
                }
                if b.start_us < a.end_us && a.start_us < b.end_us {
                    out.push((a.id.min(b.id), a.id.max(b.id)));
                }
            }
        }
        out
    }

    /// Tab-separated `gen id kind worker start_us end_us`, one task per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.generation,
                e.id,
                e.kind,
                e.worker,
                format_us(e.start_us),
                format_us(e.end_us)
            );
        }
        out
    }
}

fn format_us(v: f64) -> String {
    format!("{v:.3}")
}

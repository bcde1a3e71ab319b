//! Read/write-set dependency derivation.

use std::collections::HashMap;
use std::hash::Hash;

#[derive(Debug, Clone)]
struct Access<T> {
    last_writer: Option<T>,
    readers: Vec<T>,
}

impl<T> Default for Access<T> {
    fn default() -> Self {
        Self {
            last_writer: None,
            readers: Vec::new(),
        }
    }
}

/// Orders tasks by their declared accesses, in launch order: a read waits for
/// the last writer (RAW); a write waits for the last writer and every reader
/// since (WAW, WAR).
#[derive(Debug, Clone)]
pub struct DepTracker<K, T> {
    state: HashMap<K, Access<T>>,
}

impl<K: Hash + Eq + Clone, T: Copy + Ord> Default for DepTracker<K, T> {
    fn default() -> Self {
        Self { state: HashMap::new() }
    }
}

impl<K: Hash + Eq + Clone, T: Copy + Ord> DepTracker<K, T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `task` and returns its sorted, deduplicated dependencies.
    /// A key in both sets counts as a write.
    pub fn register(&mut self, task: T, reads: &[K], writes: &[K]) -> Vec<T> {
        let mut deps = Vec::new();
        for key in reads.iter().filter(|k| !writes.contains(k)) {
            let acc = self.state.entry(key.clone()).or_default();
            deps.extend(acc.last_writer);
            acc.readers.push(task);
        }
        for key in writes {
            let acc = self.state.entry(key.clone()).or_default();
            deps.extend(acc.last_writer);
            deps.append(&mut acc.readers);
            acc.last_writer = Some(task);
        }
        deps.sort_unstable();
        deps.dedup();
        deps.retain(|&d| d != task);
        deps
    }
}

//! Shared storage for edges, parameters and cache state.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::graph::spec::PortRef;
use crate::moe::{Assignment, AssignmentCache, CachedRoutes, GateDecision, SpecConcat};
use crate::tensor::{ParamId, Tensor};

/// Names a buffer within one plan generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BufKey {
    Edge(PortRef),
    Param(ParamId),
    /// Persistent assignment cache of a block.
    CacheState(usize),
}

impl fmt::Display for BufKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BufKey::Edge(p) => write!(f, "e{p}"),
            BufKey::Param(p) => write!(f, "p{}", p.0),
            BufKey::CacheState(b) => write!(f, "cache{b}"),
        }
    }
}

/// Payload of a buffer.
#[derive(Debug, Clone)]
pub enum Value {
    Tensor(Tensor),
    /// Dense stack output plus post-ReLU hidden activations kept for backward.
    Mlp { out: Tensor, hidden: Vec<Tensor> },
    Ids(Vec<u64>),
    Labels(Vec<usize>),
    Decision(GateDecision),
    Routes(CachedRoutes),
    Assignment(Assignment),
    Spec {
        concat: SpecConcat,
        decision: GateDecision,
        /// `∂L/∂w` for the `[batch × k]` gate weights.
        grad_weights: Vec<f64>,
    },
    Cache(AssignmentCache),
}

impl Value {
    /// The tensor a downstream op consumes, if this value carries one.
    pub fn tensor(&self) -> Option<&Tensor> {
        match self {
            Value::Tensor(t) | Value::Mlp { out: t, .. } => Some(t),
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Value::Tensor(t) | Value::Mlp { out: t, .. } => Some(t),
            _ => None,
        }
    }
}

static NEXT_BUFFER_ID: AtomicU64 = AtomicU64::new(1);

/// A lock-protected value with a process-unique id used for dependency tracking.
#[derive(Debug)]
pub struct Buffer {
    id: u64,
    value: RwLock<Value>,
}

impl Buffer {
    pub fn new(value: Value) -> Arc<Self> {
        Arc::new(Self {
            id: NEXT_BUFFER_ID.fetch_add(1, Ordering::Relaxed),
            value: RwLock::new(value),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Value> {
        self.value.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Value> {
        self.value.write().unwrap_or_else(|e| e.into_inner())
    }
}

//! Built-in recompile triggers: per-expert capacity factors and assignment caching.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::graph::{expert_capacity, CapacityConfig, GraphSpec};
use crate::runtime::{SpecDelta, Trigger, TriggerDecision, TriggerSnapshot};

/// Peak-plus-headroom capacity policy with shrink hysteresis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityPolicyConfig {
    pub headroom: f64,
    /// Iterations of count history the policy looks at.
    pub window_w: usize,
    pub shrink_utilization: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
}

impl Default for CapacityPolicyConfig {
    fn default() -> Self {
        Self {
            headroom: 0.15,
            window_w: 20,
            shrink_utilization: 0.5,
            min_alpha: 0.25,
            max_alpha: 8.0,
        }
    }
}

impl CapacityPolicyConfig {
    /// Returns the offending key and the reason.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.headroom.is_finite() && self.headroom > 0.0) {
            return Err(("headroom", format!("must be positive, got {}", self.headroom)));
        }
        if self.window_w == 0 {
            return Err(("window_w", "must be at least 1".into()));
        }
        if !(self.shrink_utilization > 0.0 && self.shrink_utilization < 1.0) {
            return Err((
                "shrink_utilization",
                format!("must lie in (0, 1), got {}", self.shrink_utilization),
            ));
        }
        if !(self.min_alpha.is_finite() && self.min_alpha > 0.0) {
            return Err(("min_alpha", format!("must be positive, got {}", self.min_alpha)));
        }
        if !(self.max_alpha.is_finite() && self.min_alpha <= self.max_alpha) {
            return Err(("max_alpha", format!("must be finite and >= min_alpha, got {}", self.max_alpha)));
        }
        Ok(())
    }
}

/// New capacity factors for one block, or `None` when no expert changes.
///
/// `history` holds per-iteration pre-drop counts per expert, oldest first;
/// only the last `window_w` entries are considered. An expert grows as soon
/// as its current capacity is below the window peak, and shrinks only when a
/// full window stayed under `shrink_utilization` of its capacity. The target
/// capacity is `ceil((1 + headroom) · peak)`.
pub fn capacity_trigger(cfg: &CapacityPolicyConfig, history: &[Vec<usize>], capacity: &CapacityConfig) -> Option<Vec<f64>> {
    let window = &history[history.len().saturating_sub(cfg.window_w)..];
    if window.is_empty() {
        return None;
    }
    let full = window.len() >= cfg.window_w;
    let mut alpha = capacity.alpha.clone();
    let mut changed = false;
    for e in 0..capacity.n {
        let current = expert_capacity(capacity, e);
        let peak = window.iter().map(|c| c[e]).max().unwrap_or(0);
        let grow = current < peak;
        let shrink = full
            && window
                .iter()
                .all(|c| (c[e] as f64) < cfg.shrink_utilization * current as f64);
        if !grow && !shrink {
            continue;
        }
        let target = (((1.0 + cfg.headroom) * peak as f64).ceil() as usize).max(1);
        let proposed = capacity.alpha_for(target).clamp(cfg.min_alpha, cfg.max_alpha);
        let mut probe = capacity.clone();
        probe.alpha[e] = proposed;
        if expert_capacity(&probe, e) != current {
            alpha[e] = proposed;
            changed = true;
        }
    }
    changed.then_some(alpha)
}

/// Adjusts every block's capacity factors from its recent routing counts.
#[derive(Debug, Clone)]
pub struct CapacityTrigger {
    cfg: CapacityPolicyConfig,
    history: Vec<VecDeque<Vec<usize>>>,
}

impl CapacityTrigger {
    pub fn new(cfg: CapacityPolicyConfig) -> Self {
        Self {
            cfg,
            history: Vec::new(),
        }
    }
}

impl Trigger for CapacityTrigger {
    fn name(&self) -> &str {
        "capacity"
    }

    fn evaluate(&mut self, snapshot: &TriggerSnapshot, spec: &GraphSpec) -> Result<TriggerDecision, String> {
        self.history.resize_with(spec.blocks.len(), VecDeque::new);
        for record in &snapshot.new_records {
            for (b, counts) in record.counts.iter().enumerate().take(spec.blocks.len()) {
                if counts.len() != spec.blocks[b].capacity.n {
                    return Err(format!("block {b}: {} counts for {} experts", counts.len(), spec.blocks[b].capacity.n));
                }
                let h = &mut self.history[b];
                h.push_back(counts.clone());
                while h.len() > self.cfg.window_w {
                    h.pop_front();
                }
            }
        }
        let mut delta = SpecDelta::default();
        for (b, block) in spec.blocks.iter().enumerate() {
            let h: Vec<Vec<usize>> = self.history[b].iter().cloned().collect();
            if let Some(alpha) = capacity_trigger(&self.cfg, &h, &block.capacity) {
                delta.alpha.insert(b, alpha);
            }
        }
        Ok(if delta.is_empty() {
            TriggerDecision::none(snapshot)
        } else {
            TriggerDecision::recompile(snapshot, delta)
        })
    }
}

/// Thresholds for switching assignment caching on and off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CachingPolicyConfig {
    pub enable_threshold: f64,
    pub disable_threshold: f64,
    pub warmup_epochs: u64,
}

impl Default for CachingPolicyConfig {
    fn default() -> Self {
        Self {
            enable_threshold: 0.96,
            disable_threshold: 0.90,
            warmup_epochs: 10,
        }
    }
}

impl CachingPolicyConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(0.0..=1.0).contains(&self.enable_threshold) {
            return Err(("enable_threshold", format!("must lie in [0, 1], got {}", self.enable_threshold)));
        }
        if !(self.disable_threshold >= 0.0 && self.disable_threshold < self.enable_threshold) {
            return Err((
                "disable_threshold",
                format!(
                    "must be non-negative and below enable_threshold ({}), got {}",
                    self.enable_threshold, self.disable_threshold
                ),
            ));
        }
        Ok(())
    }
}

/// `Some(new_state)` when caching should flip, `None` otherwise.
pub fn caching_trigger(cfg: &CachingPolicyConfig, hit_fraction: f64, epoch: u64, enabled: bool) -> Option<bool> {
    if epoch < cfg.warmup_epochs {
        None
    } else if !enabled && hit_fraction >= cfg.enable_threshold {
        Some(true)
    } else if enabled && hit_fraction < cfg.disable_threshold {
        Some(false)
    } else {
        None
    }
}

/// Epoch-level caching decision for one block.
///
/// Hit fractions are averaged over each completed epoch; an epoch counts as
/// complete once a record from a later epoch has been seen.
#[derive(Debug, Clone)]
pub struct CachingTrigger {
    cfg: CachingPolicyConfig,
    block: usize,
    epoch: Option<u64>,
    sum: f64,
    count: usize,
    /// `(epoch, mean hit fraction, caching enabled after the decision)`.
    pub epochs: Vec<(u64, f64, bool)>,
}

impl CachingTrigger {
    pub fn new(cfg: CachingPolicyConfig, block: usize) -> Self {
        Self {
            cfg,
            block,
            epoch: None,
            sum: 0.0,
            count: 0,
            epochs: Vec::new(),
        }
    }
}

impl Trigger for CachingTrigger {
    fn name(&self) -> &str {
        "caching"
    }

    fn evaluate(&mut self, snapshot: &TriggerSnapshot, spec: &GraphSpec) -> Result<TriggerDecision, String> {
        let block = spec
            .blocks
            .get(self.block)
            .ok_or_else(|| format!("no MoE block {}", self.block))?;
        let initial = block.cache_enabled;
        let mut enabled = initial;
        for record in &snapshot.new_records {
            let hit = record.hit_fractions.get(self.block).copied().unwrap_or(0.0);
            match self.epoch {
                Some(e) if e != record.epoch => {
                    let mean = self.sum / self.count as f64;
                    if let Some(on) = caching_trigger(&self.cfg, mean, e, enabled) {
                        enabled = on;
                    }
                    self.epochs.push((e, mean, enabled));
                    self.sum = 0.0;
                    self.count = 0;
                }
                _ => {}
            }
            self.epoch = Some(record.epoch);
            self.sum += hit;
            self.count += 1;
        }
        Ok(if enabled == initial {
            TriggerDecision::none(snapshot)
        } else {
            let mut delta = SpecDelta::default();
            delta.cache.insert(self.block, enabled);
            TriggerDecision::recompile(snapshot, delta)
        })
    }
}

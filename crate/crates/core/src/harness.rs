//! Experiment configuration, synthetic data, the training loop and the
//! experiment presets driven by the command-line tool.

use std::fmt::Write as _;

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{forward_makespan, CostModel, ExecMode, TaskTrace};
use crate::graph::{compile, Batch, GateKind, GraphBuilder, GraphSpec, MoeOptions, Placement, Role};
use crate::losses::{LossConfig, LossMode};
use crate::policies::{CachingPolicyConfig, CachingTrigger, CapacityPolicyConfig, CapacityTrigger};
use crate::runtime::{run, MetricRecord, RecompileEvent, RuntimeConfig, Session, Trigger};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "iter,epoch,loss,task_loss,balance,accuracy,drop_rate,hit_fraction,mean_alpha,generation";

/// Static capacity factors swept by [`sweep_capacity`].
pub const STATIC_ALPHAS: [f64; 5] = [1.0, 1.5, 2.0, 4.0, 7.0];
/// Headrooms of the dynamic policy swept by [`sweep_capacity`].
pub const DYNAMIC_HEADROOMS: [f64; 3] = [0.05, 0.15, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Gaussian clusters; each cluster splits its samples between two labels
    /// along its own random direction.
    Clusters,
    /// Standard normal features labelled by a random linear classifier.
    Separable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub size: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub cluster_count: usize,
    pub seed: u64,
    /// Distance of cluster centers from the origin.
    pub center_scale: f64,
    /// Within-cluster standard deviation.
    pub spread: f64,
    /// Length of a shift shared by every sample.
    pub offset: f64,
    /// Cluster `c` is drawn with weight `(1 - skew)^c`.
    pub skew: f64,
    /// Probability of replacing a label with a uniformly random class.
    pub label_noise: f64,
    /// Reshuffle the sample order every epoch.
    pub shuffle: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Clusters,
            size: 1024,
            feature_dim: 8,
            classes: 4,
            cluster_count: 4,
            seed: 0,
            center_scale: 4.0,
            spread: 1.0,
            offset: 0.0,
            skew: 0.0,
            label_noise: 0.0,
            shuffle: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Learned,
    /// Frozen random routing with uniform weights.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n: usize,
    pub k: usize,
    pub expert_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub routing: Routing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 4,
            k: 1,
            expert_hidden: vec![16],
            gate_hidden: Vec::new(),
            routing: Routing::Learned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticCapacity {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicCapacity {
    pub initial_alpha: f64,
    pub headroom: f64,
    pub window_w: usize,
    pub shrink_utilization: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
}

impl Default for DynamicCapacity {
    fn default() -> Self {
        let p = CapacityPolicyConfig::default();
        Self {
            initial_alpha: 1.0,
            headroom: p.headroom,
            window_w: p.window_w,
            shrink_utilization: p.shrink_utilization,
            min_alpha: p.min_alpha,
            max_alpha: p.max_alpha,
        }
    }
}

impl DynamicCapacity {
    pub fn policy(&self) -> CapacityPolicyConfig {
        CapacityPolicyConfig {
            headroom: self.headroom,
            window_w: self.window_w,
            shrink_utilization: self.shrink_utilization,
            min_alpha: self.min_alpha,
            max_alpha: self.max_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacitySection {
    Static(StaticCapacity),
    Dynamic(DynamicCapacity),
}

impl Default for CapacitySection {
    fn default() -> Self {
        CapacitySection::Static(StaticCapacity { alpha: 1.0 })
    }
}

impl CapacitySection {
    pub fn initial_alpha(&self) -> f64 {
        match self {
            CapacitySection::Static(s) => s.alpha,
            CapacitySection::Dynamic(d) => d.initial_alpha,
        }
    }
}

/// `off` still measures hit fractions; it never routes from the cache.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachingSection {
    #[default]
    Off,
    Adaptive(CachingPolicyConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    Simulated,
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    pub delta_launch: usize,
    /// Defaults to one worker for the main graph plus one per expert.
    pub workers: Option<usize>,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub executor: ExecutorKind,
    /// Threaded mode only: stretch each task to its modeled cost.
    pub pad_to_cost: bool,
    pub min_interval_iterations: u64,
    pub cost_model: CostModel,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            delta_launch: 1,
            workers: None,
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.1,
            executor: ExecutorKind::Simulated,
            pad_to_cost: false,
            min_interval_iterations: 1,
            cost_model: CostModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub csv: String,
    pub trace: String,
    pub config_echo: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            csv: "metrics.csv".into(),
            trace: "trace.tsv".into(),
            config_echo: "config.json".into(),
        }
    }
}

/// A complete experiment; parsed from one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds parameter initialization, fixed routing and shuffling.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub capacity: CapacitySection,
    pub caching: CachingSection,
    pub runtime: RuntimeSection,
    pub output: OutputSection,
}

fn bad(key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {detail}"))
}

fn check(ok: bool, key: &str, detail: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(bad(key, detail))
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "config".to_string() } else { path };
            bad(&path, e.inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let m = &self.model;
        let r = &self.runtime;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        check(r.batch_size > 0, "runtime.batch_size", "must be positive")?;
        check(d.size >= r.batch_size, "dataset.size", "must be at least runtime.batch_size")?;
        check(d.feature_dim > 0, "dataset.feature_dim", "must be positive")?;
        check(d.classes >= 2, "dataset.classes", "must be at least 2")?;
        check(d.cluster_count > 0, "dataset.cluster_count", "must be positive")?;
        check(finite_nonneg(d.center_scale), "dataset.center_scale", "must be finite and non-negative")?;
        check(finite_nonneg(d.spread), "dataset.spread", "must be finite and non-negative")?;
        check(finite_nonneg(d.offset), "dataset.offset", "must be finite and non-negative")?;
        check((0.0..1.0).contains(&d.skew), "dataset.skew", "must lie in [0, 1)")?;
        check((0.0..=1.0).contains(&d.label_noise), "dataset.label_noise", "must lie in [0, 1]")?;
        check(m.n > 0, "model.n", "must be positive")?;
        check(m.k >= 1 && m.k <= m.n, "model.k", "must satisfy 1 <= k <= n")?;
        check(m.expert_hidden.iter().all(|&h| h > 0), "model.expert_hidden", "sizes must be positive")?;
        check(m.gate_hidden.iter().all(|&h| h > 0), "model.gate_hidden", "sizes must be positive")?;
        check(finite_nonneg(self.loss.lambda), "loss.lambda", "must be finite and non-negative")?;
        match &self.capacity {
            CapacitySection::Static(s) => {
                check(s.alpha.is_finite() && s.alpha > 0.0, "capacity.static.alpha", "must be positive")?;
            }
            CapacitySection::Dynamic(dy) => {
                check(
                    dy.initial_alpha.is_finite() && dy.initial_alpha > 0.0,
                    "capacity.dynamic.initial_alpha",
                    "must be positive",
                )?;
                dy.policy()
                    .validate()
                    .map_err(|(key, detail)| bad(&format!("capacity.dynamic.{key}"), detail))?;
            }
        }
        if let CachingSection::Adaptive(c) = &self.caching {
            c.validate()
                .map_err(|(key, detail)| bad(&format!("caching.adaptive.{key}"), detail))?;
            check(m.routing == Routing::Learned, "caching", "adaptive caching requires model.routing = learned")?;
        }
        check(r.epochs > 0, "runtime.epochs", "must be positive")?;
        check(
            r.learning_rate.is_finite() && r.learning_rate > 0.0,
            "runtime.learning_rate",
            "must be positive",
        )?;
        check(r.workers != Some(0), "runtime.workers", "must be at least 1")?;
        check(r.min_interval_iterations > 0, "runtime.min_interval_iterations", "must be positive")?;
        r.cost_model.validate().map_err(|e| bad("runtime.cost_model", e))?;
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.runtime.workers.unwrap_or(self.model.n + 1)
    }

    pub fn exec_mode(&self) -> ExecMode {
        match self.runtime.executor {
            ExecutorKind::Simulated => ExecMode::Simulated(self.runtime.cost_model.clone()),
            ExecutorKind::Threaded => ExecMode::Real {
                pad: self.runtime.pad_to_cost.then(|| self.runtime.cost_model.clone()),
            },
        }
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.dataset.size / self.runtime.batch_size
    }

    fn triggers(&self) -> Vec<Box<dyn Trigger>> {
        let mut out: Vec<Box<dyn Trigger>> = Vec::new();
        if let CapacitySection::Dynamic(d) = &self.capacity {
            out.push(Box::new(CapacityTrigger::new(d.policy())));
        }
        if let CachingSection::Adaptive(c) = &self.caching {
            out.push(Box::new(CachingTrigger::new(c.clone(), 0)));
        }
        out
    }
}

/// Clustered or linearly separable samples with stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `[N × d]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Equal to the sample's row index; never changes across epochs.
    pub sample_ids: Vec<u64>,
    /// Generating cluster of each sample (the label for separable data).
    pub clusters: Vec<usize>,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn scaled_unit(rng: &mut ChaCha8Rng, d: usize, length: f64) -> Vec<f64> {
    let v = normal_vec(rng, d);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|a| a * length / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SyntheticDataset {
    /// Deterministic in `cfg.seed`.
    pub fn generate(cfg: &DatasetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.feature_dim;
        let offset = scaled_unit(&mut rng, d, cfg.offset);
        let mut x = Vec::with_capacity(cfg.size * d);
        let mut labels = Vec::with_capacity(cfg.size);
        let mut clusters = Vec::with_capacity(cfg.size);
        match cfg.kind {
            DatasetKind::Clusters => {
                let centers: Vec<Vec<f64>> = (0..cfg.cluster_count)
                    .map(|_| scaled_unit(&mut rng, d, cfg.center_scale))
                    .collect();
                let rules: Vec<Vec<f64>> = (0..cfg.cluster_count).map(|_| scaled_unit(&mut rng, d, 1.0)).collect();
                let weights: Vec<f64> = (0..cfg.cluster_count).map(|c| (1.0 - cfg.skew).powi(c as i32)).collect();
                let pick = WeightedIndex::new(&weights).expect("cluster weights are positive");
                for _ in 0..cfg.size {
                    let c = pick.sample(&mut rng);
                    let z = normal_vec(&mut rng, d);
                    let side = usize::from(dot(&rules[c], &z) > 0.0);
                    let mut label = (c + side) % cfg.classes;
                    if rng.gen::<f64>() < cfg.label_noise {
                        label = rng.gen_range(0..cfg.classes);
                    }
                    x.extend((0..d).map(|j| centers[c][j] + cfg.spread * z[j] + offset[j]));
                    labels.push(label);
                    clusters.push(c);
                }
            }
            DatasetKind::Separable => {
                let w: Vec<Vec<f64>> = (0..cfg.classes).map(|_| normal_vec(&mut rng, d)).collect();
                for _ in 0..cfg.size {
                    let z = normal_vec(&mut rng, d);
                    let scores: Vec<f64> = w.iter().map(|row| dot(row, &z)).collect();
                    let label = crate::losses::argmax(&scores);
                    x.extend((0..d).map(|j| z[j] + offset[j]));
                    labels.push(label);
                    clusters.push(label);
                }
            }
        }
        Self {
            x: Tensor::from_vec(&[cfg.size, d], x).expect("rows times features"),
            labels,
            sample_ids: (0..cfg.size as u64).collect(),
            clusters,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row order of `epoch`: identity, or a permutation seeded by `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: u64, shuffle_seed: Option<u64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn batch(&self, rows: &[usize], epoch: u64) -> Batch {
        let d = self.x.cols();
        let mut x = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            x.extend_from_slice(self.x.row(r));
        }
        Batch {
            x: Tensor::from_vec(&[rows.len(), d], x).expect("rows times features"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            epoch,
        }
    }

    /// Full batches only; a trailing partial batch is skipped every epoch.
    pub fn batches(&self, batch_size: usize, epochs: u64, shuffle_seed: Option<u64>) -> impl Iterator<Item = Batch> + '_ {
        let per_epoch = self.len() / batch_size;
        (0..epochs).flat_map(move |epoch| {
            let order = self.epoch_order(epoch, shuffle_seed);
            (0..per_epoch).map(move |i| self.batch(&order[i * batch_size..(i + 1) * batch_size], epoch))
        })
    }
}

/// Input → MoE block (gate, experts) → task loss, plus the balance term for learned gates.
pub fn build_model(cfg: &ExperimentConfig) -> GraphSpec {
    let (d, m) = (&cfg.dataset, &cfg.model);
    let batch = cfg.runtime.batch_size;
    let mut b = GraphBuilder::new(batch);
    let (x, ids) = b.input(d.feature_dim);
    let labels = b.labels(d.classes);
    let learned = m.routing == Routing::Learned;
    let gate = if learned {
        GateKind::Learned {
            hidden: m.gate_hidden.clone(),
        }
    } else {
        // Keep expert parameter ids (and thus initial weights) equal to the learned-gate variant.
        b.reserve_params(2 * (m.gate_hidden.len() + 1));
        GateKind::FixedUniform { seed: cfg.seed }
    };
    let opts = MoeOptions {
        n: m.n,
        k: m.k,
        alpha: vec![cfg.capacity.initial_alpha(); m.n],
        batch_size: batch,
        gate,
        with_cache: learned,
        cache_enabled: false,
        spec_output: cfg.loss.mode == LossMode::Specification,
        balance_lambda: learned.then_some(cfg.loss.lambda),
        pin: None,
    };
    let hidden = m.expert_hidden.clone();
    let classes = d.classes;
    let h = b.moe(x, ids, &opts, |b, e, xe| {
        b.mlp(xe, &hidden, classes, true, Role::Expert(e), Placement::Expert(e))
    });
    match cfg.loss.mode {
        LossMode::Cooperation => b.cross_entropy(h.output, labels),
        LossMode::Specification => b.spec_loss(h.spec.expect("spec output requested"), labels, h.block),
    };
    b.finish(h.output, cfg.seed, cfg.runtime.learning_rate)
}

/// Per-epoch means of the metric stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub drop_rate: f64,
    pub hit_fraction: f64,
    /// Caching was on for at least one iteration of the epoch.
    pub cache_enabled: bool,
    pub max_token_fraction: f64,
    pub mean_capacity: f64,
    /// Latest task end minus earliest task start among the epoch's tasks.
    pub makespan_us: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub recompiles: Vec<RecompileEvent>,
    pub trace: TaskTrace,
    pub final_spec: GraphSpec,
    pub idle_attributable_us: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

impl TrainOutcome {
    /// The metrics CSV: one row per iteration under [`CSV_HEADER`].
    pub fn csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.epoch,
                r.loss,
                r.task_loss,
                r.balance,
                r.accuracy,
                r.drop_rate,
                r.hit_fraction,
                r.mean_alpha,
                r.generation
            );
        }
        out
    }

    pub fn epochs(&self) -> Vec<EpochSummary> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.records.len() {
            let epoch = self.records[start].epoch;
            let end = start + self.records[start..].iter().take_while(|r| r.epoch == epoch).count();
            let rs = &self.records[start..end];
            let (lo, hi) = (rs[0].iteration, rs[rs.len() - 1].iteration);
            let entries = self.trace.entries.iter().filter(|e| (lo..=hi).contains(&e.iteration));
            let (first, last) = entries.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), e| {
                (a.min(e.start_us), b.max(e.end_us))
            });
            out.push(EpochSummary {
                epoch,
                loss: mean(rs.iter().map(|r| r.loss)),
                accuracy: mean(rs.iter().map(|r| r.accuracy)),
                drop_rate: mean(rs.iter().map(|r| r.drop_rate)),
                hit_fraction: mean(rs.iter().map(|r| r.hit_fraction)),
                cache_enabled: rs.iter().any(|r| r.cache_enabled.first().copied().unwrap_or(false)),
                max_token_fraction: mean(rs.iter().map(MetricRecord::max_token_fraction)),
                mean_capacity: mean(rs.iter().map(|r| r.mean_capacity)),
                makespan_us: if last >= first { last - first } else { 0.0 },
            });
            start = end;
        }
        out
    }

    /// Mean accuracy over the last epoch.
    pub fn final_accuracy(&self) -> f64 {
        self.epochs().last().map_or(f64::NAN, |e| e.accuracy)
    }

    /// Time-averaged mean expert capacity.
    pub fn mean_capacity(&self) -> f64 {
        mean(self.records.iter().map(|r| r.mean_capacity))
    }

    /// Time-averaged mean capacity factor.
    pub fn mean_alpha(&self) -> f64 {
        mean(self.records.iter().map(|r| r.mean_alpha))
    }

    /// Dropped pairs over routed pairs, averaged over iterations.
    pub fn drop_rate(&self) -> f64 {
        mean(self.records.iter().map(|r| r.drop_rate))
    }

    pub fn makespan_us(&self) -> f64 {
        self.trace.makespan_us()
    }
}

/// Trains per `cfg` with its triggers active.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = SyntheticDataset::generate(&cfg.dataset);
    let spec = build_model(cfg);
    let plan = compile(&spec, cfg.workers())?;
    let mut session = Session::new(plan, &cfg.exec_mode());
    let mut triggers = cfg.triggers();
    let runtime = RuntimeConfig {
        delta_launch: cfg.runtime.delta_launch,
        min_interval_iterations: cfg.runtime.min_interval_iterations,
        ..RuntimeConfig::default()
    };
    let shuffle = cfg.dataset.shuffle.then_some(cfg.seed);
    let batches = data.batches(cfg.runtime.batch_size, cfg.runtime.epochs, shuffle);
    let report = run(&mut session, batches, &mut triggers, &runtime)?;
    Ok(TrainOutcome {
        records: report.records,
        recompiles: report.recompiles,
        trace: report.trace,
        final_spec: report.final_spec,
        idle_attributable_us: report.idle_attributable_us,
    })
}

/// Runs every config on its own thread; results keep input order.
fn run_all(configs: &[ExperimentConfig]) -> Result<Vec<TrainOutcome>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_train(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("experiment thread panicked".into()))))
            .collect()
    })
}

/// One arm of the capacity sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// `static` or `dynamic`.
    pub arm: String,
    /// Capacity factor for static arms, headroom for dynamic ones.
    pub setting: f64,
    pub final_accuracy: f64,
    pub mean_capacity: f64,
    pub mean_alpha: f64,
    pub drop_rate: f64,
    pub makespan_ms: f64,
    pub recompiles: usize,
}

/// Static factors [`STATIC_ALPHAS`] against the dynamic policy at [`DYNAMIC_HEADROOMS`].
pub fn sweep_capacity(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let dynamic = match &cfg.capacity {
        CapacitySection::Dynamic(d) => d.clone(),
        CapacitySection::Static(_) => DynamicCapacity::default(),
    };
    let mut configs = Vec::new();
    let mut arms = Vec::new();
    for alpha in STATIC_ALPHAS {
        let mut c = cfg.clone();
        c.capacity = CapacitySection::Static(StaticCapacity { alpha });
        configs.push(c);
        arms.push(("static", alpha));
    }
    for headroom in DYNAMIC_HEADROOMS {
        let mut c = cfg.clone();
        c.capacity = CapacitySection::Dynamic(DynamicCapacity {
            headroom,
            ..dynamic.clone()
        });
        configs.push(c);
        arms.push(("dynamic", headroom));
    }
    let outcomes = run_all(&configs)?;
    Ok(arms
        .into_iter()
        .zip(outcomes)
        .map(|((arm, setting), o)| SweepRow {
            arm: arm.to_string(),
            setting,
            final_accuracy: o.final_accuracy(),
            mean_capacity: o.mean_capacity(),
            mean_alpha: o.mean_alpha(),
            drop_rate: o.drop_rate(),
            makespan_ms: o.makespan_us() / 1000.0,
            recompiles: o.recompiles.len(),
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("arm,setting,final_accuracy,mean_capacity,mean_alpha,drop_rate,makespan_ms,recompiles\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.arm, r.setting, r.final_accuracy, r.mean_capacity, r.mean_alpha, r.drop_rate, r.makespan_ms, r.recompiles
        );
    }
    out
}

/// Adaptive caching against caching that never engages, same seed.
#[derive(Debug, Clone)]
pub struct CachingBench {
    pub adaptive: TrainOutcome,
    pub off: TrainOutcome,
    /// Single-iteration forward makespans (ms) under the cost model.
    pub forward_makespan_off: f64,
    pub forward_makespan_on: f64,
}

impl CachingBench {
    /// Per epoch: adaptive-run metrics next to the caching-off run.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "epoch,hit_fraction,cache_enabled,accuracy,accuracy_off,makespan_us,makespan_off_us\n",
        );
        for (a, o) in self.adaptive.epochs().iter().zip(self.off.epochs()) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                a.epoch,
                a.hit_fraction,
                u8::from(a.cache_enabled),
                a.accuracy,
                o.accuracy,
                a.makespan_us,
                o.makespan_us
            );
        }
        out
    }

    /// `(epoch, enabled)` whenever caching flips.
    pub fn transitions(&self) -> Vec<(u64, bool)> {
        let mut out = Vec::new();
        let mut state = false;
        for r in &self.adaptive.records {
            let on = r.cache_enabled.first().copied().unwrap_or(false);
            if on != state {
                out.push((r.epoch, on));
                state = on;
            }
        }
        out
    }
}

pub fn bench_caching(cfg: &ExperimentConfig) -> Result<CachingBench> {
    let mut adaptive = cfg.clone();
    if adaptive.caching == CachingSection::Off {
        adaptive.caching = CachingSection::Adaptive(CachingPolicyConfig::default());
    }
    adaptive.validate()?;
    let mut off = cfg.clone();
    off.caching = CachingSection::Off;
    let mut outcomes = run_all(&[adaptive, off])?.into_iter();
    let (adaptive, off) = (outcomes.next().expect("two arms"), outcomes.next().expect("two arms"));
    let spec = build_model(cfg);
    let mut cached = spec.clone();
    cached.set_cache_enabled(0, true);
    let cost = &cfg.runtime.cost_model;
    Ok(CachingBench {
        adaptive,
        off,
        forward_makespan_off: forward_makespan(&compile(&spec, cfg.workers())?, cost),
        forward_makespan_on: forward_makespan(&compile(&cached, cfg.workers())?, cost),
    })
}

/// One `{loss} × {routing}` arm for one seed.
#[derive(Debug, Clone)]
pub struct LossArm {
    pub seed: u64,
    pub mode: LossMode,
    pub routing: Routing,
    pub epochs: Vec<EpochSummary>,
}

impl LossArm {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.accuracy)
    }
}

/// Cooperation vs specification loss, each with learned and fixed routing.
pub fn compare_loss(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<LossArm>> {
    let mut configs = Vec::new();
    let mut keys = Vec::new();
    for &seed in seeds {
        for mode in [LossMode::Cooperation, LossMode::Specification] {
            for routing in [Routing::Learned, Routing::Fixed] {
                let mut c = cfg.clone();
                c.seed = seed;
                c.loss.mode = mode;
                c.model.routing = routing;
                c.caching = CachingSection::Off;
                c.capacity = match &cfg.capacity {
                    CapacitySection::Static(s) => CapacitySection::Static(s.clone()),
                    CapacitySection::Dynamic(_) => CapacitySection::Static(StaticCapacity {
                        alpha: cfg.model.n as f64,
                    }),
                };
                c.validate()?;
                configs.push(c);
                keys.push((seed, mode, routing));
            }
        }
    }
    let outcomes = run_all(&configs)?;
    Ok(keys
        .into_iter()
        .zip(outcomes)
        .map(|((seed, mode, routing), o)| LossArm {
            seed,
            mode,
            routing,
            epochs: o.epochs(),
        })
        .collect())
}

fn mode_name(mode: LossMode) -> &'static str {
    match mode {
        LossMode::Cooperation => "cooperation",
        LossMode::Specification => "specification",
    }
}

fn routing_name(routing: Routing) -> &'static str {
    match routing {
        Routing::Learned => "learned",
        Routing::Fixed => "fixed",
    }
}

pub fn compare_loss_csv(arms: &[LossArm]) -> String {
    let mut out = String::from("seed,loss,routing,epoch,loss_value,accuracy\n");
    for a in arms {
        for e in &a.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                a.seed,
                mode_name(a.mode),
                routing_name(a.routing),
                e.epoch,
                e.loss,
                e.accuracy
            );
        }
    }
    out
}

pub fn epochs_csv(epochs: &[EpochSummary]) -> String {
    let mut out = String::from(
        "epoch,loss,accuracy,drop_rate,hit_fraction,cache_enabled,max_token_fraction,mean_capacity,makespan_us\n",
    );
    for e in epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.loss,
            e.accuracy,
            e.drop_rate,
            e.hit_fraction,
            u8::from(e.cache_enabled),
            e.max_token_fraction,
            e.mean_capacity,
            e.makespan_us
        );
    }
    out
}

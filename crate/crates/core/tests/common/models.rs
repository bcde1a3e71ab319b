//! Small model specs and batches shared by the integration tests.

#![allow(dead_code)]

use moe_core::graph::{GateKind, GraphBuilder, GraphSpec, MoeOptions, Placement, Role};
use moe_core::{Batch, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Moe {
    pub n: usize,
    pub k: usize,
    pub batch: usize,
    pub alpha: f64,
    pub features: usize,
    pub classes: usize,
    pub expert_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub with_cache: bool,
    pub cache_enabled: bool,
    pub spec_loss: bool,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub learning_rate: f64,
}

impl Default for Moe {
    fn default() -> Self {
        Self {
            n: 4,
            k: 2,
            batch: 16,
            alpha: 1.0,
            features: 5,
            classes: 3,
            expert_hidden: vec![6],
            gate_hidden: vec![],
            with_cache: true,
            cache_enabled: false,
            spec_loss: false,
            lambda: Some(0.01),
            seed: 7,
            learning_rate: 0.1,
        }
    }
}

impl Moe {
    pub fn spec(&self) -> GraphSpec {
        let mut b = GraphBuilder::new(self.batch);
        let (x, ids) = b.input(self.features);
        let labels = b.labels(self.classes);
        let opts = MoeOptions {
            n: self.n,
            k: self.k,
            alpha: vec![self.alpha; self.n],
            batch_size: self.batch,
            gate: GateKind::Learned {
                hidden: self.gate_hidden.clone(),
            },
            with_cache: self.with_cache,
            cache_enabled: self.cache_enabled,
            spec_output: self.spec_loss,
            balance_lambda: self.lambda,
            pin: None,
        };
        let (hidden, classes) = (self.expert_hidden.clone(), self.classes);
        let h = b.moe(x, ids, &opts, |b, e, xe| {
            b.mlp(xe, &hidden, classes, true, Role::Expert(e), Placement::Expert(e))
        });
        if self.spec_loss {
            b.spec_loss(h.spec.expect("spec output"), labels, h.block);
        } else {
            b.cross_entropy(h.output, labels);
        }
        b.finish(h.output, self.seed, self.learning_rate)
    }
}

/// Standard-normal-ish features, uniform labels, ids `first_id..`.
pub fn random_batch(rng: &mut ChaCha8Rng, batch: usize, features: usize, classes: usize, first_id: u64) -> Batch {
    let x: Vec<f64> = (0..batch * features).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Batch {
        x: Tensor::from_vec(&[batch, features], x).unwrap(),
        labels: (0..batch).map(|_| rng.gen_range(0..classes)).collect(),
        sample_ids: (first_id..first_id + batch as u64).collect(),
        epoch: 0,
    }
}

/// A fixed pool of batches cycled over `epochs`, so sample ids repeat per epoch.
pub fn epoch_batches(seed: u64, per_epoch: usize, epochs: u64, batch: usize, features: usize, classes: usize) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Batch> = (0..per_epoch)
        .map(|i| random_batch(&mut rng, batch, features, classes, (i * batch) as u64))
        .collect();
    (0..epochs)
        .flat_map(|e| {
            pool.iter().cloned().map(move |mut b| {
                b.epoch = e;
                b
            })
        })
        .collect()
}

//! Seeded fixtures shared by the benchmarks.

use moe_core::harness::{build_model, ExperimentConfig, SyntheticDataset};
use moe_core::{Batch, GraphSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[rows × cols]` with entries uniform in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape matches data")
}

/// Row-stochastic `[rows × n]` gate probabilities.
pub fn gate_probs(rows: usize, n: usize, seed: u64) -> Tensor {
    let logits = matrix(rows, n, seed);
    let mut out = vec![0.0; rows * n];
    moe_core::kernels::softmax_into(logits.data(), &mut out, n).expect("finite logits");
    Tensor::from_vec(&[rows, n], out).expect("shape matches data")
}

/// A default-sized MoE model and its first training batch.
pub fn model(n: usize, k: usize, batch_size: usize) -> (ExperimentConfig, GraphSpec, Batch) {
    let mut cfg = ExperimentConfig::default();
    cfg.model.n = n;
    cfg.model.k = k;
    cfg.runtime.batch_size = batch_size;
    cfg.dataset.size = cfg.dataset.size.max(batch_size);
    let spec = build_model(&cfg);
    let data = SyntheticDataset::generate(&cfg.dataset);
    let batch = data.batches(batch_size, 1, None).next().expect("one batch");
    (cfg, spec, batch)
}

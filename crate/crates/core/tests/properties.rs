//! Randomized invariants of the kernels, routing, recompilation and policies.

mod common;

use common::models::{random_batch, Moe};
use moe_core::graph::changed_edges;
use moe_core::kernels::{linear_backward, linear_into, softmax_into};
use moe_core::moe::{aggregate_bwd, groupby_fwd, topk_fwd};
use moe_core::policies::{caching_trigger, capacity_trigger, CachingPolicyConfig, CapacityPolicyConfig};
use moe_core::{compile, execute, expert_capacity, recompile, CapacityConfig, ExecMode, Phases, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sim() -> ExecMode {
    ExecMode::Simulated(Default::default())
}

fn scores(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; rows * n];
    let logits: Vec<f64> = (0..rows * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    softmax_into(&logits, &mut data, n).unwrap();
    Tensor::from_vec(&[rows, n], data).unwrap()
}

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8).prop_flat_map(|n| (Just(n), 1..=n, 1usize..=24))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..8, cols in 1usize..8, seed: u64, scale in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut out = vec![0.0; rows * cols];
        softmax_into(&logits, &mut out, cols).unwrap();
        for row in out.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let mut again = vec![0.0; rows * cols];
        softmax_into(&logits, &mut again, cols).unwrap();
        prop_assert_eq!(
            out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn topk_is_a_pure_function((n, k, rows) in shape(), seed: u64, coarse: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = scores(&mut rng, rows, n);
        if coarse {
            // Quantized scores force ties through the tie-break rule.
            s.data_mut().iter_mut().for_each(|v| *v = (*v * 4.0).round() / 4.0);
        }
        let a = topk_fwd(&s, k).unwrap();
        let b = topk_fwd(&s.clone(), k).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        prop_assert_eq!(
            a.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn routing_conserves_rows_without_drops((n, k, rows) in shape(), seed: u64, extra in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decision = topk_fwd(&scores(&mut rng, rows, n), k).unwrap();
        let x = Tensor::from_vec(&[rows, 2], (0..rows * 2).map(|i| i as f64).collect()).unwrap();
        let (_, asg) = groupby_fwd(&x, &decision, &vec![rows + extra; n]).unwrap();
        prop_assert_eq!(asg.drop_count(), 0);
        prop_assert_eq!((0..n).map(|e| asg.used(e)).sum::<usize>(), rows * k);
        prop_assert_eq!(asg.assigned_counts.iter().sum::<usize>(), rows * k);
    }

    #[test]
    fn dropped_pairs_send_no_gradient_to_their_expert((n, k, rows) in shape(), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = (3, 2);
        let decision = topk_fwd(&scores(&mut rng, rows, n), k).unwrap();
        let capacities: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=(rows * k).div_ceil(n))).collect();
        let weights: Vec<Vec<f64>> = (0..n).map(|_| (0..d * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let bias = vec![0.0; c];
        let x: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_y: Vec<f64> = (0..rows * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Expert weight gradients for one batch of inputs and upstream gradients.
        let expert_grads = |x: &[f64], grad_y: &[f64]| -> Vec<Vec<f64>> {
            let (batches, asg) = groupby_fwd(&Tensor::from_vec(&[rows, d], x.to_vec()).unwrap(), &decision, &capacities).unwrap();
            let outputs: Vec<Tensor> = batches
                .iter()
                .zip(&weights)
                .map(|(b, w)| {
                    let mut o = vec![0.0; b.rows() * c];
                    linear_into(b.data(), w, &bias, &mut o, b.rows(), d, c);
                    Tensor::from_vec(&[b.rows(), c], o).unwrap()
                })
                .collect();
            let refs: Vec<&Tensor> = outputs.iter().collect();
            let (grad_out, _) = aggregate_bwd(&refs, &decision, &asg, grad_y);
            batches
                .iter()
                .zip(&weights)
                .zip(&grad_out)
                .map(|((b, w), g)| {
                    let (mut gw, mut gb) = (vec![0.0; d * c], vec![0.0; c]);
                    linear_backward(b.data(), w, g, None, &mut gw, &mut gb, b.rows(), d, c);
                    gw
                })
                .collect()
        };

        let base = expert_grads(&x, &grad_y);
        let (_, asg) = groupby_fwd(&Tensor::from_vec(&[rows, d], x.clone()).unwrap(), &decision, &capacities).unwrap();
        for pair in &asg.dropped {
            let e = asg.routes[pair.sample * k + pair.rank];
            let (mut x2, mut g2) = (x.clone(), grad_y.clone());
            x2[pair.sample * d..(pair.sample + 1) * d].iter_mut().for_each(|v| *v += 10.0);
            g2[pair.sample * c..(pair.sample + 1) * c].iter_mut().for_each(|v| *v -= 10.0);
            let moved = expert_grads(&x2, &g2);
            prop_assert_eq!(
                base[e].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                moved[e].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "sample {} leaked into expert {}", pair.sample, e
            );
        }
    }

    #[test]
    fn balance_is_minimal_at_uniform_gate_when_tokens_are_uniform(n in 1usize..=8, seed: u64, lambda in 0.001f64..1.0) {
        use moe_core::losses::{balance_term, BatchStats};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = |g: Vec<f64>| BatchStats {
            token_fractions: vec![1.0 / n as f64; n],
            gate_fractions: g,
            drop_count: 0,
            hit_fraction: 0.0,
        };
        let uniform = balance_term(&stats(vec![1.0 / n as f64; n]), lambda, n);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        let other = balance_term(&stats(raw.iter().map(|v| v / total).collect()), lambda, n);
        prop_assert!(uniform <= other + 1e-12);
    }
}

/// Drives the capacity policy over a count trace, applying every decision
/// immediately. Returns the iterations at which it recompiled and the drops
/// each iteration would have seen.
fn drive_capacity(cfg: &CapacityPolicyConfig, mut capacity: CapacityConfig, trace: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut history: Vec<Vec<usize>> = Vec::new();
    let mut recompiles = Vec::new();
    let mut drops = Vec::new();
    for (i, counts) in trace.iter().enumerate() {
        drops.push(
            counts
                .iter()
                .enumerate()
                .map(|(e, &c)| c.saturating_sub(expert_capacity(&capacity, e)))
                .sum(),
        );
        history.push(counts.clone());
        if let Some(alpha) = capacity_trigger(cfg, &history, &capacity) {
            capacity.alpha = alpha;
            recompiles.push(i);
        }
    }
    (recompiles, drops)
}

fn random_counts(rng: &mut ChaCha8Rng, n: usize, total: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for _ in 0..total {
        counts[rng.gen_range(0..n)] += 1;
    }
    counts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stationary_counts_end_with_no_drops_and_no_recompiles(
        n in 2usize..=8,
        k in 1usize..=2,
        batch in 8usize..=64,
        transient in 0usize..60,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CapacityPolicyConfig::default();
        let capacity = CapacityConfig { batch_size: batch, k, n, alpha: vec![rng.gen_range(0.5..2.0); n] };
        let steady = random_counts(&mut rng, n, batch * k);
        let mut trace: Vec<Vec<usize>> = (0..transient).map(|_| random_counts(&mut rng, n, batch * k)).collect();
        let settle = 3 * cfg.window_w;
        trace.extend(std::iter::repeat_n(steady, settle + 100));
        let (recompiles, drops) = drive_capacity(&cfg, capacity, &trace);
        let tail = transient + settle;
        prop_assert!(recompiles.iter().all(|&i| i < tail), "{:?}", recompiles);
        prop_assert!(drops[tail..].iter().all(|&d| d == 0));
    }

    #[test]
    fn caching_never_toggles_inside_the_hysteresis_band(
        hits in prop::collection::vec(0.9000001f64..0.9599999, 1..200),
        enabled: bool,
    ) {
        let cfg = CachingPolicyConfig::default();
        for (i, h) in hits.iter().enumerate() {
            prop_assert_eq!(caching_trigger(&cfg, *h, cfg.warmup_epochs + i as u64, enabled), None);
        }
    }
}

#[test]
fn low_variance_counts_recompile_rarely() {
    let cfg = CapacityPolicyConfig::default();
    let cv = 0.99 * cfg.headroom / 2.0;
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, batch) = (4, 2, 256);
        let means: Vec<f64> = (0..n).map(|_| rng.gen_range(40.0..200.0)).collect();
        let trace: Vec<Vec<usize>> = (0..2000)
            .map(|_| {
                means
                    .iter()
                    .map(|&m| Normal::new(m, cv * m).unwrap().sample(&mut rng).round().max(0.0) as usize)
                    .collect()
            })
            .collect();
        let capacity = CapacityConfig { batch_size: batch, k, n, alpha: vec![1.0; n] };
        let (recompiles, _) = drive_capacity(&cfg, capacity, &trace);
        for window in (0..trace.len()).step_by(100) {
            let inside = recompiles.iter().filter(|&&i| (window..window + 100).contains(&i)).count();
            assert!(inside <= 5, "seed {seed}: {inside} recompiles in [{window}, {})", window + 100);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn recompile_sequences_preserve_weights_and_reallocate_minimally(
        steps in prop::collection::vec((prop::collection::vec(0.25f64..4.0, 4), any::<bool>()), 1..6),
        seed: u64,
    ) {
        let model = Moe::default();
        let mut spec = model.spec();
        let mut plan = compile(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, (alpha, cache)) in steps.into_iter().enumerate() {
            let batch = random_batch(&mut rng, model.batch, model.features, model.classes, 0);
            execute(&plan, batch, &sim(), Phases::Full).unwrap();
            let bytes = plan.param_bytes();
            spec.set_alpha(0, alpha);
            spec.set_cache_enabled(0, cache);
            let (next, report) = recompile(&plan, &spec).unwrap();
            prop_assert_eq!(next.param_bytes(), bytes);
            prop_assert_eq!(report.generation, i as u64 + 1);
            prop_assert_eq!(report.reallocated, changed_edges(&plan, &next));
            plan = next;
        }
    }
}

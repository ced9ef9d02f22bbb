use dialect_cpt::lora::{attach, LoraConfig};
use dialect_cpt::model::{
    backward, backward_checkpointed, init_model, ActivationMeter, ModelConfig, ModelState, Weights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(seed: u64, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 29,
        d_model: 16,
        n_layers,
        n_heads: 4,
        d_ff: 32,
        max_seq_len: 8,
        norm_eps: 1e-5,
        seed,
    }
}

fn random_ids(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Denominator floor of the relative error, so components that are
/// numerically zero are judged on an absolute scale of 1e-6.
const FLOOR: f64 = 1e-3;

/// Worst relative error between analytic f64 gradients and central
/// differences of the f64 loss.
fn fd_worst(w: &Weights<f64>, ids: &[u32], mask: Option<&[bool]>) -> (f64, String) {
    let (_, grads) = w.grad(ids, mask, None, None, &mut ActivationMeter::new()).unwrap();
    let eps: f64 = std::env::var("FD_EPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let mut worst = (0.0, String::new());
    let mut probe = w.clone();
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for i in 0..g.len() {
            let orig = probe.values(idx)[i];
            probe.values_mut(idx)[i] = orig + eps;
            let up = probe.loss(ids, mask, None).unwrap();
            probe.values_mut(idx)[i] = orig - eps;
            let down = probe.loss(ids, mask, None).unwrap();
            probe.values_mut(idx)[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("tensor {idx} element {i}: analytic {} numeric {num}", g[i]));
            }
        }
    }
    worst
}

#[test]
fn full_model_matches_finite_differences() {
    for seed in 0..2 {
        let state = init_model(&cfg(seed, 2)).unwrap();
        let w = state.weights::<f64>();
        let ids = random_ids(8, 29, seed + 10);
        let (rel, at) = fd_worst(&w, &ids, None);
        assert!(rel <= 1e-3, "seed {seed}: {rel} at {at}");
    }
}

#[test]
fn masked_loss_matches_finite_differences() {
    let state = init_model(&cfg(3, 2)).unwrap();
    let ids = random_ids(8, 29, 3);
    let mask = [false, false, true, false, true, true, false];
    let (rel, at) = fd_worst(&state.weights::<f64>(), &ids, Some(&mask));
    assert!(rel <= 1e-3, "{rel} at {at}");
}

fn adapted(seed: u64) -> ModelState {
    let base = init_model(&cfg(seed, 2)).unwrap();
    let mut s = attach(&base, &LoraConfig { rank: 2, alpha: 4.0, ..Default::default() }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in s.trainable_mut() {
        v.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
    }
    s
}

#[test]
fn adapters_match_finite_differences() {
    let s = adapted(4);
    let ids = random_ids(8, 29, 4);
    let (rel, at) = fd_worst(&s.weights::<f64>(), &ids, None);
    assert!(rel <= 1e-3, "{rel} at {at}");
}

#[test]
fn f32_gradients_track_f64() {
    let s = adapted(5);
    let ids = random_ids(8, 29, 5);
    let (l32, g32) = backward(&s, &ids, None).unwrap();
    let (l64, g64) = s.weights::<f64>().grad(&ids, None, None, None, &mut ActivationMeter::new()).unwrap();
    assert!((f64::from(l32) - l64).abs() < 1e-5);
    let g64 = dialect_cpt::model::GradSet::from_indexed(&s, g64);
    for (k, a) in &g32.entries {
        let b = g64.get(k).unwrap();
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-6);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-4 * scale + 1e-7, "{k}: {x} vs {y}");
        }
    }
}

#[test]
fn dropout_gradients_match_finite_differences() {
    let s = adapted(6);
    let w = s.weights::<f64>();
    let ids = random_ids(8, 29, 6);
    let key = Some(42);
    let (_, grads) = w.grad(&ids, None, key, None, &mut ActivationMeter::new()).unwrap();
    let mut probe = w.clone();
    let eps = 1e-3;
    let mut checked = 0;
    for (idx, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for i in (0..g.len()).step_by(7) {
            let orig = probe.values(idx)[i];
            probe.values_mut(idx)[i] = orig + eps;
            let up = probe.loss(&ids, None, key).unwrap();
            probe.values_mut(idx)[i] = orig - eps;
            let down = probe.loss(&ids, None, key).unwrap();
            probe.values_mut(idx)[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(FLOOR);
            assert!(rel <= 1e-3, "tensor {idx}[{i}]: {} vs {num}", g[i]);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn checkpointed_equals_plain() {
    for seed in 0..3 {
        let state = init_model(&cfg(seed, 4)).unwrap();
        let ids = random_ids(8, 29, seed);
        let (l0, g0) = backward(&state, &ids, None).unwrap();
        for segments in 1..=4 {
            let (l1, g1, meter) = backward_checkpointed(&state, &ids, None, segments).unwrap();
            assert!((l0 - l1).abs() <= 1e-6);
            for (k, a) in &g0.entries {
                let b = g1.get(k).unwrap();
                let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                assert!(diff <= 1e-5, "{k}: {diff}");
            }
            let bound = 4usize.div_ceil(segments) + segments;
            assert!(meter.peak() <= bound, "segments {segments}: {} > {bound}", meter.peak());
        }
    }
}

#[test]
fn meter_counts_peak_sets() {
    let state = init_model(&ModelConfig { n_layers: 8, ..cfg(1, 8) }).unwrap();
    let ids = random_ids(6, 29, 1);
    let (_, _, plain) = backward_checkpointed(&state, &ids, None, 8).unwrap();
    assert_eq!(plain.peak(), 8);
    let (_, _, ckpt) = backward_checkpointed(&state, &ids, None, 4).unwrap();
    assert!(ckpt.peak() <= 6);
    assert_eq!(ckpt.live(), 0);
}

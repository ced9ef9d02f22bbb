use dialect_cpt::data::{chunk_document, BatchPlan, Chunk, ChunkerConfig};
use dialect_cpt::lora::{encode_adapters, LoraConfig};
use dialect_cpt::model::{init_model, ModelConfig, ModelState};
use dialect_cpt::optim::OptimConfig;
use dialect_cpt::trainer::{accumulate_step, perplexity, pretrain, run_cpt, MicroBatch, TrainConfig, TrainData};
use dialect_cpt::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 24;

fn model_cfg() -> ModelConfig {
    ModelConfig { vocab_size: V, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 16, norm_eps: 1e-5, seed: 1 }
}

fn chunk(i: usize, len: usize, rng: &mut ChaCha8Rng) -> Chunk {
    Chunk { doc_id: format!("d{i}"), offset: 0, ids: (0..len).map(|_| rng.random_range(0..V as u32)).collect() }
}

fn data(n_train: usize, seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainData {
        train: (0..n_train).map(|i| chunk(i, 12, &mut rng)).collect(),
        dialect_val: (0..3).map(|i| chunk(100 + i, 12, &mut rng)).collect(),
        prestige_val: (0..3).map(|i| chunk(200 + i, 12, &mut rng)).collect(),
        ..Default::default()
    }
}

fn train_cfg(plan: (usize, usize, usize), epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        plan: BatchPlan { b: plan.0, a: plan.1, d: plan.2, seq_len: 12 },
        chunker: ChunkerConfig { seq_len: 12, stride: 6, min_tail: 2 },
        optim: OptimConfig { base_lr: 1e-2, ..Default::default() },
        ..Default::default()
    }
}

fn base() -> ModelState {
    init_model(&model_cfg()).unwrap()
}

#[test]
fn one_step_per_chunk() {
    let out = run_cpt(&base(), &LoraConfig::default(), &data(10, 1), &train_cfg((1, 1, 1), 1)).unwrap();
    assert_eq!(out.manifest.total_steps, 10);
    assert_eq!(out.metrics.iter().filter(|r| r.lr.is_some()).count(), 10);
    assert!(out.manifest.audits.no_replay);
    assert!(out.manifest.audits.base_immutable);
}

#[test]
fn partial_window_still_steps() {
    let out = run_cpt(&base(), &LoraConfig::default(), &data(10, 1), &train_cfg((2, 2, 1), 2)).unwrap();
    assert_eq!(out.manifest.epochs[1].steps, 3);
    assert_eq!(out.manifest.total_steps, 6);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let d = data(8, 2);
    let a = run_cpt(&base(), &LoraConfig::default(), &d, &train_cfg((2, 1, 1), 2)).unwrap();
    let b = run_cpt(&base(), &LoraConfig::default(), &d, &train_cfg((2, 1, 1), 2)).unwrap();
    assert_eq!(encode_adapters(&a.last).unwrap(), encode_adapters(&b.last).unwrap());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn sequential_matches_parallel() {
    let d = data(8, 3);
    let par = run_cpt(&base(), &LoraConfig::default(), &d, &train_cfg((2, 2, 1), 1)).unwrap();
    let seq = run_cpt(
        &base(),
        &LoraConfig::default(),
        &d,
        &TrainConfig { exec: Exec::Sequential, ..train_cfg((2, 2, 1), 1) },
    )
    .unwrap();
    assert_eq!(encode_adapters(&par.last).unwrap(), encode_adapters(&seq.last).unwrap());
}

#[test]
fn base_weights_untouched() {
    let b = base();
    let out = run_cpt(&b, &LoraConfig::default(), &data(6, 4), &train_cfg((1, 1, 1), 2)).unwrap();
    let frozen = b.clone().frozen();
    for p in frozen.params() {
        assert_eq!(out.last.param(&p.path).unwrap(), p, "{}", p.path);
    }
}

#[test]
fn selection_is_argmin_of_val_loss() {
    let out = run_cpt(&base(), &LoraConfig::default(), &data(12, 5), &train_cfg((1, 1, 1), 3)).unwrap();
    let m = &out.manifest;
    let best = m.epochs[1..]
        .iter()
        .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
        .unwrap();
    assert_eq!(m.selected_epoch, best.epoch);
    assert_eq!(out.trace.series(dialect_cpt::trainer::Split::DialectVal).len(), 4);
    assert_eq!(out.trace.series(dialect_cpt::trainer::Split::PrestigeVal).len(), 4);
}

#[test]
fn empty_targets_is_a_no_op() {
    let lora = LoraConfig { targets: vec![], ..Default::default() };
    let out = run_cpt(&base(), &lora, &data(4, 6), &train_cfg((1, 1, 1), 1)).unwrap();
    assert_eq!(out.last.params(), base().frozen().params());
}

#[test]
fn pretraining_lowers_loss() {
    let mut d = data(0, 7);
    // A deterministic cyclic language the model can learn.
    d.train = (0..16)
        .map(|i| Chunk { doc_id: format!("c{i}"), offset: 0, ids: (0..12).map(|t| ((i + t) % 6) as u32).collect() })
        .collect();
    d.dialect_val = d.train[..2].to_vec();
    let out = pretrain(&base(), &d, &TrainConfig { optim: OptimConfig { base_lr: 3e-2, ..Default::default() }, ..train_cfg((2, 1, 1), 4) }).unwrap();
    let losses: Vec<f64> = out.manifest.epochs.iter().map(|e| e.val_loss).collect();
    assert!(losses[4] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn empty_inputs_rejected() {
    let mut d = data(4, 8);
    d.dialect_val.clear();
    assert!(run_cpt(&base(), &LoraConfig::default(), &d, &train_cfg((1, 1, 1), 1)).is_err());
    assert!(run_cpt(&base(), &LoraConfig::default(), &data(0, 8), &train_cfg((1, 1, 1), 1)).is_err());
}

#[test]
fn overlapped_perplexity_equals_single_pass() {
    let state = base();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<u32> = (0..16).map(|_| rng.random_range(0..V as u32)).collect();
    let whole = perplexity(
        &state,
        &[Chunk { doc_id: "d".into(), offset: 0, ids: ids.clone() }],
        &ChunkerConfig { seq_len: 16, stride: 8, min_tail: 1 },
        true,
    )
    .unwrap();
    // Chunks of 8 with stride 4 never see more than 8 tokens of context, so
    // compare against a model whose positions beyond the window are unused:
    // a document no longer than the window is scored identically.
    let short = &ids[..8];
    let cfg = ChunkerConfig { seq_len: 8, stride: 4, min_tail: 1 };
    let chunks = chunk_document("d", short, &cfg);
    let chunked = perplexity(&state, &chunks, &cfg, true).unwrap();
    let single = perplexity(&state, &[Chunk { doc_id: "d".into(), offset: 0, ids: short.to_vec() }], &cfg, true).unwrap();
    assert!((chunked - single).abs() <= 1e-6 * single);
    assert!(whole.is_finite());
}

#[test]
fn accumulation_matches_fused_batch() {
    let state = base();
    let w = state.weights::<f32>();
    let d = data(4, 10);
    let per_seq: Vec<(f64, dialect_cpt::model::GradSet)> = d
        .train
        .iter()
        .map(|c| {
            let (l, g) = w.grad(&c.ids, None, None, None, &mut Default::default()).unwrap();
            (f64::from(l), dialect_cpt::model::GradSet::from_indexed(&state, g))
        })
        .collect();
    let mean = |items: &[(f64, dialect_cpt::model::GradSet)]| {
        let mut g = items[0].1.clone();
        for (_, o) in &items[1..] {
            for (k, v) in g.entries.iter_mut() {
                v.iter_mut().zip(o.get(k).unwrap()).for_each(|(x, y)| *x += y);
            }
        }
        g.scale(1.0 / items.len() as f64);
        MicroBatch { n_seqs: items.len(), loss: items.iter().map(|i| i.0).sum::<f64>() / items.len() as f64, grads: g }
    };
    let fused = mean(&per_seq);
    let (_, acc) = accumulate_step(&[vec![mean(&per_seq[..2]), mean(&per_seq[2..])]]).unwrap();
    for (k, v) in &fused.grads.entries {
        for (x, y) in v.iter().zip(acc.get(k).unwrap()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

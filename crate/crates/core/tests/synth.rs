use std::collections::HashSet;
use std::path::Path;

use dialect_cpt::data::{BatchPlan, ChunkerConfig};
use dialect_cpt::lora::LoraConfig;
use dialect_cpt::model::{save_model, ModelConfig};
use dialect_cpt::optim::OptimConfig;
use dialect_cpt::synth::*;
use dialect_cpt::trainer::{Split, TrainConfig};
use dialect_cpt::Error;

fn texts(docs: &[dialect_cpt::corpus::CleanDocument]) -> Vec<&str> {
    docs.iter().map(|d| d.text.as_str()).collect()
}

fn words(docs: &[dialect_cpt::corpus::CleanDocument]) -> Vec<Vec<String>> {
    docs.iter()
        .flat_map(|d| d.text.lines().map(|l| l.split(' ').map(String::from).collect()))
        .collect()
}

#[test]
fn zero_probability_dialect_equals_prestige() {
    let spec = DialectSpec::standard().with_transform_prob(0.0);
    let p = gen_corpus(&spec, 300, Variant::Prestige).unwrap();
    let d = gen_corpus(&spec, 300, Variant::Dialect).unwrap();
    assert_eq!(texts(&p), texts(&d));
}

#[test]
fn forced_substitution_removes_word() {
    let spec: DialectSpec = "start S\nlexicon la voiture roule vite .\nS -> la voiture roule . | la voiture roule vite .\nsub voiture char 1\n"
        .parse()
        .unwrap();
    let d = gen_corpus(&spec, 200, Variant::Dialect).unwrap();
    assert!(words(&d).iter().flatten().all(|w| w != "voiture"));
    assert!(words(&d).iter().flatten().any(|w| w == "char"));
}

#[test]
fn edit_rate_tracks_configured_probability() {
    let spec: DialectSpec = "seed 5\nstart S\nlexicon a b c d\nS -> W W W W W W W W W W\nW -> a | b | c | d\n\
                             sub a A 0.1\nsub b B 0.3\nsub c C 0.2\nsub d D 0.4\n"
        .parse()
        .unwrap();
    let p = words(&gen_corpus(&spec, 1000, Variant::Prestige).unwrap());
    let d = words(&gen_corpus(&spec, 1000, Variant::Dialect).unwrap());
    let prob = |w: &str| match w {
        "a" => 0.1,
        "b" => 0.3,
        "c" => 0.2,
        _ => 0.4,
    };
    let (mut edits, mut expected, mut n) = (0usize, 0.0, 0usize);
    for (ps, ds) in p.iter().zip(&d) {
        assert_eq!(ps.len(), ds.len());
        for (a, b) in ps.iter().zip(ds) {
            edits += usize::from(a != b);
            expected += prob(a);
            n += 1;
        }
    }
    assert_eq!(n, 10_000);
    let rate = edits as f64 / n as f64;
    let want = expected / n as f64;
    assert!((rate - want).abs() <= 0.02, "rate {rate} vs configured {want}");
    assert!((want - 0.25).abs() < 0.02);
}

#[test]
fn generation_is_seeded() {
    let spec = DialectSpec::standard();
    let a = gen_corpus(&spec, 120, Variant::Dialect).unwrap();
    assert_eq!(a, gen_corpus(&spec, 120, Variant::Dialect).unwrap());
    let other = DialectSpec { seed: spec.seed + 1, ..spec.clone() };
    assert_ne!(a, gen_corpus(&other, 120, Variant::Dialect).unwrap());
    assert!(gen_corpus(&spec, 0, Variant::Prestige).is_err());
}

#[test]
fn unreachable_start_is_a_grammar_error() {
    let err = "start Z\nlexicon a\nS -> a\n".parse::<DialectSpec>().unwrap_err();
    assert!(matches!(err, Error::Grammar(_)), "{err}");
}

#[test]
fn acceptability_pairs() {
    let spec = DialectSpec::standard();
    assert!(make_acceptability_task(&spec, 0, 1).is_err());
    let task = make_acceptability_task(&spec, 400, 1).unwrap();
    assert_eq!(task.items.len(), 400);
    let window = spec.corruption_window();
    let mut ones = 0;
    for it in &task.items {
        let a: Vec<&str> = it.slots["a"].split(' ').collect();
        let b: Vec<&str> = it.slots["b"].split(' ').collect();
        assert_eq!(a.len(), b.len());
        let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!((1..=window).contains(&diff), "{a:?} / {b:?}");
        ones += it.gold;
    }
    let share = ones as f64 / 400.0;
    assert!((0.43..=0.57).contains(&share), "label balance {share}");
    assert_eq!(make_acceptability_task(&spec, 400, 1).unwrap(), task);

    let plain = DialectSpec { corruptions: vec![], ..spec };
    assert!(make_acceptability_task(&plain, 10, 1).is_err());
}

#[test]
fn bundle_splits_are_disjoint_and_written() {
    let spec = DialectSpec::standard();
    let b = SynthBundle::generate(&spec, BundleSizes { train_sentences: 500, val_sentences: 60, task_items: 20 }, 3).unwrap();
    let lines = |docs: &[dialect_cpt::corpus::CleanDocument]| -> Vec<String> {
        docs.iter().flat_map(|d| d.text.lines().map(String::from)).collect()
    };
    for (train, val) in [(&b.prestige_train, &b.prestige_val), (&b.dialect_train, &b.dialect_val)] {
        let t: HashSet<String> = lines(train).into_iter().collect();
        let v = lines(val);
        assert_eq!(v.len(), 60);
        assert!(v.iter().all(|s| !t.contains(s)));
    }
    assert_eq!(lines(&b.prestige_train).len(), 500);
    let dir = tempfile::tempdir().unwrap();
    b.write(dir.path()).unwrap();
    let docs = dialect_cpt::corpus::read_documents(&dir.path().join("dialect_val.jsonl")).unwrap();
    assert_eq!(docs, b.dialect_val);
    let tasks = dialect_cpt::eval::load_tasks(&dir.path().join("tasks/tasks.toml")).unwrap();
    assert_eq!(tasks, vec![b.acceptability_task.clone(), b.prestige_task.clone()]);
}

fn micro(vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: vocab, d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_seq_len: 64, norm_eps: 1e-5, seed }
}

fn train_cfg(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        plan: BatchPlan { b: 8, a: 1, d: 1, seq_len: 64 },
        chunker: ChunkerConfig { seq_len: 64, stride: 48, min_tail: 8 },
        optim: OptimConfig { base_lr: lr, ..Default::default() },
        seed,
        ..Default::default()
    }
}

fn experiment(spec: &DialectSpec, seed: u64, dir: &Path) -> DynamicsResult {
    let spec = DialectSpec { seed: spec.seed ^ seed, ..spec.clone() };
    let b = SynthBundle::generate(&spec, BundleSizes { train_sentences: 600, val_sentences: 60, task_items: 20 }, seed).unwrap();
    let vocab = b.train_tokenizer(320).unwrap();
    let base = pretrain_base(&b, &vocab, &micro(vocab.vocab_size(), seed), &train_cfg(3, 3e-3, seed)).unwrap();
    let path = dir.join(format!("base{seed}.pcpt"));
    save_model(&base.selected, &path).unwrap();
    let lora = LoraConfig { rank: 4, alpha: 8.0, ..Default::default() };
    run_dynamics_experiment(&b, &path, &vocab, &lora, &train_cfg(2, 2e-3, seed)).unwrap()
}

#[test]
fn identical_distributions_start_level() {
    let dir = tempfile::tempdir().unwrap();
    let r = experiment(&DialectSpec::standard().with_transform_prob(0.0), 0, dir.path());
    let d = r.trace.series(Split::DialectVal);
    let p = r.trace.series(Split::PrestigeVal);
    assert_eq!(d.len(), 3);
    assert_eq!(p.len(), 3);
    assert!((d[0] / p[0] - 1.0).abs() < 0.01, "{d:?} {p:?}");
}

#[test]
fn distribution_gap_then_drop() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DialectSpec::standard();
    assert!(spec.mean_transform_prob() >= 0.2);
    for seed in 0..5 {
        let r = experiment(&spec, seed, dir.path());
        let d = r.trace.series(Split::DialectVal);
        let p = r.trace.series(Split::PrestigeVal);
        assert!(d[0] > p[0], "seed {seed}: {d:?} vs {p:?}");
        assert!(d[1] < d[0], "seed {seed}: {d:?}");
        assert_eq!(r.report.tasks.len(), 2);
        assert!(!render_dynamics(&r).is_empty());
    }
}

#[test]
fn dynamics_needs_a_base_checkpoint() {
    let spec = DialectSpec::standard();
    let b = SynthBundle::generate(&spec, BundleSizes { train_sentences: 60, val_sentences: 10, task_items: 4 }, 0).unwrap();
    let vocab = b.train_tokenizer(300).unwrap();
    let err = run_dynamics_experiment(&b, Path::new("/no/base.pcpt"), &vocab, &LoraConfig::default(), &train_cfg(1, 1e-3, 0));
    assert!(err.unwrap_err().to_string().contains("/no/base.pcpt"));
}

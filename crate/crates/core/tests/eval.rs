use std::collections::BTreeMap;

use dialect_cpt::eval::*;
use dialect_cpt::model::{init_model, ModelConfig};
use dialect_cpt::tokenizer::{Vocab, BOS, MIN_VOCAB};
use dialect_cpt::{Error, Exec, Result};
use proptest::prelude::*;

fn bytes() -> Vocab {
    Vocab::from_merges(vec![], 0).unwrap()
}

/// Next-token log-probabilities from a fixed function of the target id.
struct Stub<F: Fn(u32) -> f64 + Sync>(F);

impl<F: Fn(u32) -> f64 + Sync> LogProbModel for Stub<F> {
    fn token_logprobs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        Ok(ids[1..].iter().map(|&t| (self.0)(t)).collect())
    }
    fn max_len(&self) -> usize {
        256
    }
}

fn task(verbalizers: &[&str], items: Vec<TaskItem>) -> TaskSpec {
    TaskSpec {
        name: "t".into(),
        kind: if verbalizers.len() == 2 { TaskKind::Binary } else { TaskKind::MultiChoice(verbalizers.len()) },
        group: Group::Dialect,
        prompt_template: "Question: {q}".into(),
        verbalizers: verbalizers.iter().map(|s| s.to_string()).collect(),
        items,
    }
}

fn item(q: &str, gold: usize) -> TaskItem {
    TaskItem { slots: [("q".to_string(), q.to_string())].into(), gold }
}

#[test]
fn uniform_model_scores_minus_log_vocab() {
    let v = bytes();
    let n = MIN_VOCAB as f64;
    let m = Stub(|_| -n.ln());
    for answer in ["a", "oui", "une phrase plus longue"] {
        let s = score_choice(&m, &v, "contexte", answer).unwrap();
        assert!((s + n.ln()).abs() < 1e-12);
    }
    assert!(matches!(score_choice(&m, &v, "x", ""), Err(Error::Eval(_))));
}

#[test]
fn trailing_prompt_whitespace_is_cleaned() {
    let cfg = ModelConfig { vocab_size: MIN_VOCAB, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 64, norm_eps: 1e-5, seed: 3 };
    let w = init_model(&cfg).unwrap().weights::<f32>();
    let v = bytes();
    let a = score_choice(&w, &v, "Le chat dort", "oui").unwrap();
    let b = score_choice(&w, &v, "Le chat dort   ", "oui").unwrap();
    let c = score_choice(&w, &v, "Le chat dort \t\n", "oui").unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn two_token_answer_matches_manual_trace() {
    let cfg = ModelConfig { vocab_size: MIN_VOCAB, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 32, norm_eps: 1e-5, seed: 9 };
    let w = init_model(&cfg).unwrap().weights::<f32>();
    let v = bytes();
    let got = score_choice(&w, &v, "ab", "cd").unwrap();
    let ids = [BOS, b'a' as u32, b'b' as u32, b'c' as u32, b'd' as u32];
    let logits = w.logits(&ids, None).unwrap();
    let vsz = cfg.vocab_size;
    let logp = |pos: usize, tok: u32| {
        let row: Vec<f64> = logits[pos * vsz..(pos + 1) * vsz].iter().map(|&x| f64::from(x)).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        row[tok as usize] - lse
    };
    let want = (logp(2, b'c' as u32) + logp(3, b'd' as u32)) / 2.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn long_context_is_left_truncated() {
    struct Short;
    impl LogProbModel for Short {
        fn token_logprobs(&self, ids: &[u32]) -> Result<Vec<f64>> {
            assert!(ids.len() <= 8);
            Ok(vec![-1.0; ids.len() - 1])
        }
        fn max_len(&self) -> usize {
            8
        }
    }
    let s = score_choice(&Short, &bytes(), &"x".repeat(50), "abc").unwrap();
    assert_eq!(s, -1.0);
}

#[test]
fn predict_picks_most_likely_verbalizer() {
    let v = bytes();
    let t = task(&["a", "b", "c"], vec![item("?", 1)]);
    let m = Stub(|tok| if tok == b'b' as u32 { -0.1 } else { -5.0 });
    assert_eq!(predict(&m, &v, &t, &t.items[0]).unwrap(), 1);
}

#[test]
fn predict_ties_go_to_label_zero() {
    let v = bytes();
    let t = task(&["x", "y"], vec![item("?", 1)]);
    assert_eq!(predict(&Stub(|_| -2.0), &v, &t, &t.items[0]).unwrap(), 0);
}

#[test]
fn predict_binary_oui() {
    let v = bytes();
    let t = task(&["non", "oui"], vec![item("Est-ce vrai?", 1)]);
    let oui: Vec<u32> = v.encode("oui");
    let m = Stub(move |tok| if oui.contains(&tok) { -0.5 } else { -3.0 });
    assert_eq!(predict(&m, &v, &t, &t.items[0]).unwrap(), 1);
}

#[test]
fn verbalizer_count_must_match_labels() {
    let mut t = task(&["a", "b"], vec![item("?", 0)]);
    t.kind = TaskKind::MultiChoice(3);
    assert!(t.validate().is_err());
    t.kind = TaskKind::MultiChoice(1);
    t.verbalizers.truncate(1);
    assert!(t.validate().is_err());
}

#[test]
fn evaluate_task_parallel_matches_sequential() {
    let v = bytes();
    let cfg = ModelConfig { vocab_size: MIN_VOCAB, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 64, norm_eps: 1e-5, seed: 1 };
    let w = init_model(&cfg).unwrap().weights::<f32>();
    let items = (0..12).map(|i| item(&format!("numéro {i}"), i % 3)).collect();
    let t = task(&["rouge", "vert", "bleu"], items);
    let a = evaluate_task(&w, &v, &t, Exec::Sequential).unwrap();
    let b = evaluate_task(&w, &v, &t, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.macro_f1));
}

fn oracle_f1(preds: &[usize], golds: &[usize], n: usize) -> f64 {
    let mut cm = vec![vec![0u64; n]; n];
    for (&p, &g) in preds.iter().zip(golds) {
        cm[g][p] += 1;
    }
    let mut total = 0.0;
    for c in 0..n {
        let tp = cm[c][c] as f64;
        let predicted: f64 = (0..n).map(|g| cm[g][c] as f64).sum();
        let actual: f64 = cm[c].iter().sum::<u64>() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        total += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    total / n as f64
}

#[test]
fn macro_f1_matches_confusion_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let n = rng.random_range(2..=10);
        let len = rng.random_range(1..60);
        let golds: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let preds: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let got = macro_f1(&preds, &golds, n).unwrap();
        assert!((got - oracle_f1(&preds, &golds, n)).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn macro_f1_permutation_and_renaming(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
        rot in 0usize..4,
        shuffle_seed in any::<u64>(),
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let golds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let base = macro_f1(&preds, &golds, 4).unwrap();
        let rename = |l: usize| (l + rot) % 4;
        let rp: Vec<usize> = preds.iter().map(|&l| rename(l)).collect();
        let rg: Vec<usize> = golds.iter().map(|&l| rename(l)).collect();
        prop_assert!((macro_f1(&rp, &rg, 4).unwrap() - base).abs() < 1e-12);
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        use rand::{seq::SliceRandom, SeedableRng};
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        let sp: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let sg: Vec<usize> = idx.iter().map(|&i| golds[i]).collect();
        prop_assert!((macro_f1(&sp, &sg, 4).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn argmax_invariant_under_monotone_maps(scores in prop::collection::vec(-20.0f64..0.0, 2..10)) {
        let k = argmax_first(&scores);
        let maps: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| 3.0 * x + 1.0, |x| x.atan()];
        for f in maps {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(argmax_first(&t), k);
        }
    }
}

#[test]
fn identical_scores_give_zero_deltas() {
    let s: BTreeMap<String, f64> = [("a".to_string(), 40.0), ("b".to_string(), 12.5)].into();
    let r = delta_report(&s, &s, &[(Group::Dialect, vec!["a".into()]), (Group::Prestige, vec!["b".into()])]).unwrap();
    assert!(r.tasks.iter().all(|t| t.delta == 0.0));
    assert_eq!(fmt_delta(r.avg_delta[&Group::Dialect]), "0.00");
}

#[test]
fn label_frequencies() {
    let mut items: Vec<TaskItem> = (0..61).map(|_| item("x", 0)).collect();
    items.extend((0..139).map(|_| item("x", 1)));
    let f = label_freq(&task(&["a", "b"], items)).unwrap();
    let cells: Vec<String> = f.iter().map(|&x| fmt_percent(x)).collect();
    assert_eq!(cells, ["30.5", "69.5"]);

    let verbs: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let verbs: Vec<&str> = verbs.iter().map(String::as_str).collect();
    let uniform = task(&verbs, (0..1000).map(|i| item("x", i % 10)).collect());
    assert!(label_freq(&uniform).unwrap().iter().all(|&p| (p - 10.0).abs() < 1e-9));

    let single = label_freq(&task(&["a", "b"], vec![item("x", 1)])).unwrap();
    assert_eq!(single, [0.0, 100.0]);
    let table = render_label_freq(&[("QFrCoLA", f)]);
    assert!(table.contains("30.5") && table.contains("69.5"));
}

#[test]
fn task_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = task(&["non {q}", "oui"], vec![item("premier", 0), item("second", 1)]);
    t.name = "qa".into();
    let mut u = t.clone();
    u.name = "qb".into();
    u.group = Group::Prestige;
    write_tasks(dir.path(), &[t.clone(), u.clone()]).unwrap();
    let back = load_tasks(&dir.path().join("tasks.toml")).unwrap();
    assert_eq!(back, vec![t, u]);
}

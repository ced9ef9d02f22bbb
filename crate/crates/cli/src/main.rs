use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use dialect_cpt::config::RunConfig;
use dialect_cpt::corpus::{
    build_manifest, corpus_hash, ingest_all, load_registry, millions, read_documents, write_documents,
};
use dialect_cpt::data::{count_tokens, read_chunk_store, tokenize_documents, write_chunk_store, Chunk};
use dialect_cpt::eval::{delta_report, evaluate_task, load_tasks, EvalReport, Group, ScoreTable};
use dialect_cpt::lora::load_adapters;
use dialect_cpt::model::{init_model, load_model, save_model};
use dialect_cpt::synth::{render_dynamics, run_dynamics_experiment, pretrain_base, DialectSpec, SynthBundle};
use dialect_cpt::tokenizer::{train_tokenizer, Vocab};
use dialect_cpt::trainer::{pretrain, run_cpt, TrainData, TrainOutcome};

#[derive(Parser)]
#[command(name = "dcpt", version, about = "Continual pre-training pipeline for dialect corpora")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => Ok(RunConfig::load(p)?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Clean every source of a registry into a JSON-lines document file.
    Ingest {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the byte-level BPE vocabulary; with a registry, also write the
    /// per-source token manifest.
    Tokenize {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, required = true)]
        docs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Split, tokenize and chunk documents into chunk stores.
    Prepare {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        docs: PathBuf,
        /// Retention documents, traced during training but never trained on.
        #[arg(long)]
        prestige: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-parameter training from a fresh initialization.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// LoRA continual pre-training of a saved base model.
    Cpt {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a model on registered tasks (macro-F1 in percent).
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render delta tables and perplexity traces.
    Report {
        /// Score table in the multi-family JSON layout.
        #[arg(long, conflicts_with_all = ["base", "adapted"])]
        table: Option<PathBuf>,
        /// Scores written by `eval` for the base model.
        #[arg(long, requires_all = ["adapted", "tasks"])]
        base: Option<PathBuf>,
        #[arg(long, requires = "base")]
        adapted: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Run directory whose perplexity trace is emitted.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic prestige/dialect corpora and tasks; optionally run
    /// the pretrain-then-CPT experiment on them.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        experiment: bool,
        #[arg(long)]
        run_id: Option<String>,
    },
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn fresh_run_dir(cfg: &RunConfig, run_id: &str) -> Result<PathBuf> {
    let dir = cfg.paths.runs_dir.join(run_id);
    if dir.join("run_manifest.json").exists() {
        bail!("run directory {} already holds a finished run", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn finish_run(cfg: &RunConfig, dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let a = &outcome.manifest.audits;
    if !a.no_replay || !a.base_immutable {
        bail!("run audits failed: no_replay={} base_immutable={}", a.no_replay, a.base_immutable);
    }
    for e in &outcome.manifest.epochs {
        info!("epoch {} val_loss {:.4} {:?}", e.epoch, e.val_loss, e.perplexity);
    }
    println!("{}: selected epoch {}", dir.display(), outcome.manifest.selected_epoch);
    Ok(())
}

fn load_data(dir: &Path) -> Result<TrainData> {
    let store = |name: &str| -> Result<Vec<Chunk>> {
        let p = dir.join(name);
        if !p.exists() {
            return Ok(Vec::new());
        }
        Ok(read_chunk_store(&p)?.0)
    };
    let meta: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join("prepare.json")).with_context(|| format!("reading {}/prepare.json", dir.display()))?,
    )?;
    Ok(TrainData {
        train: store("train.chk")?,
        dialect_val: store("dialect_val.chk")?,
        prestige_val: store("prestige_val.chk")?,
        tokenizer_hash: meta["tokenizer_hash"].as_str().map(String::from),
        corpus_hash: meta["corpus_hash"].as_str().map(String::from),
    })
}

fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    for t in &report.tasks {
        out += &format!(
            "{:<24} {:<9} {:>7.2} {:>7.2} {:>8}\n",
            t.task,
            t.group.as_str(),
            t.base,
            t.adapted,
            dialect_cpt::eval::fmt_delta(t.delta)
        );
    }
    for (g, a) in &report.avg_delta {
        out += &format!("avg {:<20} {:>34}\n", g.as_str(), dialect_cpt::eval::fmt_delta(*a));
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Ingest { config, registry, out } => {
            let cfg = config.load()?;
            let reg = load_registry(&registry)?;
            let sources = reg
                .source
                .iter()
                .map(|e| Ok((e.load(&reg.base_dir)?, e.format)))
                .collect::<dialect_cpt::Result<Vec<_>>>()?;
            let outcome = ingest_all(&sources, cfg.train.exec)?;
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            write_documents(&out, &outcome.docs)?;
            for s in &outcome.skipped {
                log::warn!("skipped {}#{}: {}", s.source_id, s.index, s.reason);
            }
            println!("{} documents, {} skipped -> {}", outcome.docs.len(), outcome.skipped.len(), out.display());
        }
        Cmd::Tokenize { config, docs, out, registry } => {
            let cfg = config.load()?;
            let mut all = Vec::new();
            for p in &docs {
                all.extend(read_documents(p)?);
            }
            let vocab = train_tokenizer(all.iter().map(|d| d.text.as_str()), cfg.tokenizer.vocab_size, cfg.seeds.tokenizer)?;
            vocab.save(&out)?;
            println!("vocab of {} -> {}", vocab.vocab_size(), out.display());
            if let Some(r) = registry {
                let reg = load_registry(&r)?;
                count_tokens(&mut all, &vocab, cfg.train.exec);
                let records: Vec<_> = reg.source.iter().map(|e| e.record()).collect();
                let m = build_manifest(&all, &records)?;
                let path = out.with_file_name("corpus_manifest.json");
                write_json(&path, serde_json::to_value(&m)?)?;
                println!(
                    "total {} formal {} informal {} -> {}",
                    millions(m.total_tokens),
                    millions(m.formal_tokens),
                    millions(m.informal_tokens),
                    path.display()
                );
            }
        }
        Cmd::Prepare { config, docs, prestige, vocab, out } => {
            let cfg = config.load()?;
            let vocab = Vocab::load(&vocab)?;
            let tc = cfg.train_config(None, None);
            let documents = read_documents(&docs)?;
            let tok = tokenize_documents(&documents, &vocab, tc.exec);
            let pres = match &prestige {
                Some(p) => tokenize_documents(&read_documents(p)?, &vocab, tc.exec),
                None => Vec::new(),
            };
            let data = TrainData::from_documents(&tok, &pres, &tc)?;
            fs::create_dir_all(&out)?;
            write_chunk_store(&out.join("train.chk"), &data.train, &tc.chunker)?;
            write_chunk_store(&out.join("dialect_val.chk"), &data.dialect_val, &tc.chunker)?;
            if !data.prestige_val.is_empty() {
                write_chunk_store(&out.join("prestige_val.chk"), &data.prestige_val, &tc.chunker)?;
            }
            write_json(
                &out.join("prepare.json"),
                json!({
                    "tokenizer_hash": vocab.hash(),
                    "corpus_hash": corpus_hash(&documents),
                    "train_chunks": data.train.len(),
                    "dialect_val_chunks": data.dialect_val.len(),
                    "prestige_val_chunks": data.prestige_val.len(),
                }),
            )?;
            println!(
                "{} train / {} val / {} retention chunks -> {}",
                data.train.len(),
                data.dialect_val.len(),
                data.prestige_val.len(),
                out.display()
            );
        }
        Cmd::Pretrain { config, data, run_id, epochs } => {
            let cfg = config.load()?;
            let run_id = run_id.unwrap_or_else(|| format!("pretrain-s{}", cfg.seeds.train));
            let dir = fresh_run_dir(&cfg, &run_id)?;
            let data = load_data(&data)?;
            let init = init_model(&cfg.model_config())?;
            let outcome = pretrain(&init, &data, &cfg.train_config(epochs, Some(dir.clone())))?;
            save_model(&outcome.selected, &dir.join("model.pcpt"))?;
            finish_run(&cfg, &dir, &outcome)?;
        }
        Cmd::Cpt { config, data, base, run_id, epochs } => {
            let cfg = config.load()?;
            let tc = cfg.train_config(epochs, None);
            let run_id = run_id.unwrap_or_else(|| format!("cpt-{}ep-s{}", tc.epochs, tc.seed));
            let dir = fresh_run_dir(&cfg, &run_id)?;
            let base = load_model(&base).with_context(|| format!("loading base {}", base.display()))?;
            let data = load_data(&data)?;
            let tc = cfg.train_config(epochs, Some(dir.clone()));
            let outcome = run_cpt(&base, &cfg.lora, &data, &tc)?;
            finish_run(&cfg, &dir, &outcome)?;
        }
        Cmd::Eval { config, model, adapter, vocab, tasks, out } => {
            let cfg = config.load()?;
            let base = load_model(&model)?;
            let state = match &adapter {
                Some(a) => load_adapters(&base, a)?,
                None => base,
            };
            let vocab = Vocab::load(&vocab)?;
            let w = state.weights::<f32>();
            let mut scores = BTreeMap::new();
            for t in load_tasks(&tasks)? {
                let r = evaluate_task(&w, &vocab, &t, cfg.train.exec)?;
                println!("{:<24} {:.2}", t.name, 100.0 * r.macro_f1);
                scores.insert(t.name.clone(), 100.0 * r.macro_f1);
            }
            write_json(&out, json!(scores))?;
        }
        Cmd::Report { table, base, adapted, tasks, run, out } => {
            let mut text = String::new();
            let mut json_out = serde_json::Map::new();
            if let Some(t) = table {
                let table = ScoreTable::load(&t)?;
                text += &table.render()?;
                let reports: Vec<_> = table
                    .reports()?
                    .into_iter()
                    .map(|(family, model, report)| json!({"family": family, "model": model, "report": report}))
                    .collect();
                json_out.insert("tables".into(), json!(reports));
            }
            if let (Some(b), Some(a), Some(t)) = (base, adapted, tasks) {
                let mut grouping: BTreeMap<Group, Vec<String>> = BTreeMap::new();
                for task in load_tasks(&t)? {
                    grouping.entry(task.group).or_default().push(task.name);
                }
                let grouping: Vec<_> = grouping.into_iter().collect();
                let report = delta_report(&read_scores(&b)?, &read_scores(&a)?, &grouping)?;
                text += &render_report(&report);
                json_out.insert("report".into(), json!(report));
            }
            let mut trace_csv = None;
            if let Some(r) = run {
                let p = r.join("trace.csv");
                let csv = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                text += &csv;
                trace_csv = Some(csv);
            }
            if text.is_empty() {
                bail!("nothing to report: pass --table, --base/--adapted/--tasks or --run");
            }
            print!("{text}");
            if let Some(o) = out {
                fs::create_dir_all(&o)?;
                fs::write(o.join("report.txt"), &text)?;
                write_json(&o.join("report.json"), json_out.into())?;
                if let Some(csv) = trace_csv {
                    fs::write(o.join("trace.csv"), csv)?;
                }
            }
        }
        Cmd::Synth { config, out, experiment, run_id } => {
            let cfg = config.load()?;
            let mut spec = match &cfg.synth.spec {
                Some(p) => DialectSpec::load(p)?,
                None => DialectSpec::standard(),
            };
            spec.seed ^= cfg.seeds.synth;
            let bundle = SynthBundle::generate(&spec, cfg.synth.sizes(), cfg.seeds.synth)?;
            bundle.write(&out)?;
            let vocab = bundle.train_tokenizer(cfg.tokenizer.vocab_size)?;
            vocab.save(&out.join("vocab.json"))?;
            println!("bundle and vocab of {} -> {}", vocab.vocab_size(), out.display());
            if experiment {
                let run_id = run_id.unwrap_or_else(|| format!("synth-s{}", cfg.seeds.train));
                let dir = fresh_run_dir(&cfg, &run_id)?;
                let pre = pretrain_base(&bundle, &vocab, &cfg.model_config(), &cfg.train_config(None, Some(dir.join("base"))))?;
                let base_path = dir.join("base.pcpt");
                save_model(&pre.selected, &base_path)?;
                let result =
                    run_dynamics_experiment(&bundle, &base_path, &vocab, &cfg.lora, &cfg.train_config(None, Some(dir.join("cpt"))))?;
                let text = render_dynamics(&result);
                fs::write(dir.join("dynamics.txt"), &text)?;
                write_json(&dir.join("report.json"), json!(result.report))?;
                fs::write(dir.join("config.toml"), cfg.to_toml())?;
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

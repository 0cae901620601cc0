use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use listrank::dataset::{generate_synthetic, load_dataset, save_dataset, Dataset, Document};
use listrank::losses::LossName;
use listrank::metrics::{metrics_csv, MetricRow};
use listrank::serve::{
    benchmark_on_dataset, precompute_embeddings, rank_with_student, rank_with_student_uncached, rank_with_teacher,
    EmbeddingStore, RankResult,
};
use listrank::tokenizer::Tokenizer;
use listrank::training::{
    distill, evaluate_bi_encoder, evaluate_cross_encoder, finetune_ltr, load_checkpoint, pretrain_mlm,
    save_checkpoint, Checkpoint, ModelKind,
};
use listrank::write_atomic;

use crate::args::*;
use crate::config::{self, FileConfig, RunConfig};
use crate::UsageError;

pub fn run(command: Command) -> Result<()> {
    let common = command.common();
    let file = config::load_file_config(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let name = command.name();
    match command {
        Command::SynthData(c) => synth_data(c, &file, seed, name),
        Command::TokenizeTrain(c) => tokenize_train(c, &file, seed, name),
        Command::Pretrain(c) => pretrain(c, &file, seed, name),
        Command::Train(c) => train(c, &file, seed, name),
        Command::Eval(c) => eval(c, &file, seed, name),
        Command::Distill(c) => distill_cmd(c, &file, seed, name),
        Command::Rank(c) => rank(c, seed, name),
        Command::Bench(c) => bench(c, &file, seed, name),
    }
}

fn input(path: &Path, flag: &str) -> Result<(), UsageError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("--{flag}: no such file {}", path.display())))
    }
}

fn output(path: &Path, flag: &str) -> Result<(), UsageError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() && !path.is_dir() {
        Ok(())
    } else {
        Err(UsageError(format!("--{flag}: cannot write {}", path.display())))
    }
}

fn stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn print_history(rows: &[MetricRow]) -> Result<()> {
    for r in rows {
        eprintln!("epoch {} {} {} loss {:.6} ndcg {:.6}", r.epoch, r.split, r.loss_name, r.loss_value, r.mean_ndcg);
    }
    stdout(&metrics_csv(rows))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// One text per (query, document) pair, so that masked-LM training sees
/// both sides together.
fn pair_texts(dataset: &Dataset) -> Vec<String> {
    dataset
        .groups()
        .iter()
        .flat_map(|g| g.docs().iter().map(move |d| format!("{} {}", g.query_text(), d.text)))
        .collect()
}

fn synth_data(c: SynthDataCmd, file: &FileConfig, seed: u64, name: &str) -> Result<()> {
    output(&c.out, "out")?;
    if let Some(p) = &c.test_out {
        output(p, "test-out")?;
    }
    let spec = config::synth_spec(&c.synth, &file.synthetic, seed);
    let mut run = RunConfig::new(name, seed);
    run.path("out", Some(&c.out)).path("test_out", c.test_out.as_deref());
    run.synthetic = Some(spec.clone());
    run.echo();

    let dataset = generate_synthetic(&spec)?;
    match (&c.test_out, c.test_queries) {
        (Some(test_out), Some(n_test)) => {
            if n_test == 0 || n_test >= dataset.len() {
                return Err(UsageError(format!("--test-queries must lie in 1..{}", dataset.len())).into());
            }
            let (train, test) = dataset.split_at(dataset.len() - n_test);
            save_dataset(&train, &c.out)?;
            save_dataset(&test, test_out)?;
            stdout(&format!("{}\n{}\n", c.out.display(), test_out.display()))
        }
        _ => {
            save_dataset(&dataset, &c.out)?;
            stdout(&format!("{}\n", c.out.display()))
        }
    }
}

fn tokenize_train(c: TokenizeTrainCmd, file: &FileConfig, seed: u64, name: &str) -> Result<()> {
    if let Some(p) = &c.data {
        input(p, "data")?;
    }
    if let Some(p) = &c.corpus {
        input(p, "corpus")?;
    }
    output(&c.out, "out")?;
    let vocab_size = config::vocab_size(&c.tokenizer, &file.tokenizer);
    let mut run = RunConfig::new(name, seed);
    run.path("data", c.data.as_deref()).path("corpus", c.corpus.as_deref()).path("out", Some(&c.out));
    run.vocab_size = Some(vocab_size);
    run.echo();

    let corpus = match (&c.data, &c.corpus) {
        (Some(p), _) => load_dataset(p)?.texts(),
        (None, Some(p)) => read_lines(p)?,
        (None, None) => unreachable!("clap requires one input"),
    };
    let tok = Tokenizer::train(&corpus, vocab_size)?;
    tok.save(&c.out)?;
    eprintln!("tokenizer: {} tokens, fingerprint {}", tok.vocab_size(), tok.fingerprint());
    stdout(&format!("{}\n", c.out.display()))
}

fn pretrain(c: PretrainCmd, file: &FileConfig, seed: u64, name: &str) -> Result<()> {
    for (p, flag) in [(&c.data, "data"), (&c.corpus, "corpus"), (&c.tokenizer, "tokenizer")] {
        if let Some(p) = p {
            input(p, flag)?;
        }
    }
    output(&c.out, "out")?;
    if !(0.0..1.0).contains(&c.heldout_fraction) {
        return Err(UsageError("--heldout-fraction must lie in [0, 1)".into()).into());
    }
    let train_cfg = config::train_config(&c.train, &file.train, seed);
    train_cfg.validate()?;

    let corpus = match (&c.data, &c.corpus) {
        (Some(p), _) => pair_texts(&load_dataset(p)?),
        (None, Some(p)) => read_lines(p)?,
        (None, None) => unreachable!("clap requires one input"),
    };
    let n_heldout = (corpus.len() as f64 * c.heldout_fraction).round() as usize;
    let (train_texts, heldout) = corpus.split_at(corpus.len() - n_heldout);
    let vocab_size = config::vocab_size(&c.tokenizer_opts, &file.tokenizer);
    let tok = match &c.tokenizer {
        Some(p) => Tokenizer::load(p)?,
        None => Tokenizer::train(train_texts, vocab_size)?,
    };
    let enc = config::encoder_config(&c.encoder, &file.encoder, tok.vocab_size());
    let mut run = RunConfig::new(name, seed);
    run.path("data", c.data.as_deref())
        .path("corpus", c.corpus.as_deref())
        .path("tokenizer", c.tokenizer.as_deref())
        .path("out", Some(&c.out));
    run.vocab_size = Some(tok.vocab_size());
    run.encoder = Some(enc.clone());
    run.train = Some(train_cfg.clone());
    run.echo();

    let out = pretrain_mlm(train_texts, heldout, &tok, &enc, &train_cfg)?;
    if let (Some(first), Some(last)) = (
        out.history.iter().find(|r| r.split == "heldout"),
        out.history.iter().rev().find(|r| r.split == "heldout"),
    ) {
        eprintln!("heldout perplexity {:.3} -> {:.3}", first.loss_value.exp(), last.loss_value.exp());
    }
    save_checkpoint(&out.checkpoint, &c.out)?;
    print_history(&out.history)
}

fn train(c: TrainCmd, file: &FileConfig, seed: u64, name: &str) -> Result<()> {
    input(&c.data, "data")?;
    for (p, flag) in [(&c.eval_data, "eval-data"), (&c.init, "init"), (&c.tokenizer, "tokenizer")] {
        if let Some(p) = p {
            input(p, flag)?;
        }
    }
    output(&c.out, "out")?;
    let train_cfg = config::train_config(&c.train, &file.train, seed);
    train_cfg.validate()?;

    let data = load_dataset(&c.data)?;
    let eval_data = c.eval_data.as_deref().map(load_dataset).transpose()?;
    let init = match &c.init {
        Some(p) => load_checkpoint(p)?,
        None => {
            let tok = match &c.tokenizer {
                Some(p) => Tokenizer::load(p)?,
                None => Tokenizer::train(&data.texts(), config::vocab_size(&c.tokenizer_opts, &file.tokenizer))?,
            };
            let enc = config::encoder_config(&c.encoder, &file.encoder, tok.vocab_size());
            Checkpoint::init(&enc, tok, seed)?
        }
    };
    let mut run = RunConfig::new(name, seed);
    run.path("data", Some(&c.data))
        .path("eval_data", c.eval_data.as_deref())
        .path("init", c.init.as_deref())
        .path("tokenizer", c.tokenizer.as_deref())
        .path("out", Some(&c.out));
    run.encoder = Some(init.config().clone());
    run.train = Some(train_cfg.clone());
    run.echo();

    let out = finetune_ltr(&data, eval_data.as_ref(), &init, &train_cfg)?;
    save_checkpoint(&out.checkpoint, &c.out)?;
    print_history(&out.history)
}

fn eval(c: EvalCmd, file: &FileConfig, seed: u64, name: &str) -> Result<()> {
    input(&c.model, "model")?;
    input(&c.data, "data")?;
    if let Some(p) = &c.teacher {
        input(p, "teacher")?;
    }
    let model = load_checkpoint(&c.model)?;
    let mut train_cfg = config::train_config(&c.train, &file.train, seed);
    let model_loss = model.meta().loss_name.as_deref().and_then(|l| l.parse::<LossName>().ok());
    if c.train.loss.is_none() && file.train.loss.is_none() {
        if let Some(l) = model_loss {
            train_cfg.loss = l;
        }
    }
    train_cfg.validate()?;
    let mut run = RunConfig::new(name, seed);
    run.path("model", Some(&c.model)).path("data", Some(&c.data)).path("teacher", c.teacher.as_deref());
    run.train = Some(train_cfg.clone());
    run.echo();

    let data = load_dataset(&c.data)?;
    let (loss_name, (loss_value, mean_ndcg)) = if model.meta().kind == ModelKind::BiEncoder {
        let teacher = c.teacher.as_deref().map(load_checkpoint).transpose()?;
        ("margin_mse".to_string(), evaluate_bi_encoder(&model, &data, teacher.as_ref())?)
    } else {
        (train_cfg.loss.to_string(), evaluate_cross_encoder(&model, &data, &train_cfg)?)
    };
    let row = MetricRow { epoch: model.meta().epoch, split: "eval".into(), loss_name, loss_value, mean_ndcg };
    stdout(&metrics_csv(&[row]))
}

fn distill_cmd(c: DistillCmd, file: &FileConfig, seed: u64, name: &str) -> Result<()> {
    input(&c.teacher, "teacher")?;
    input(&c.data, "data")?;
    if let Some(p) = &c.eval_data {
        input(p, "eval-data")?;
    }
    output(&c.out, "out")?;
    let train_cfg = config::train_config(&c.train, &file.train, seed);
    train_cfg.validate()?;
    let mut run = RunConfig::new(name, seed);
    run.path("teacher", Some(&c.teacher))
        .path("data", Some(&c.data))
        .path("eval_data", c.eval_data.as_deref())
        .path("out", Some(&c.out));
    run.train = Some(train_cfg.clone());
    run.echo();

    let teacher = load_checkpoint(&c.teacher)?;
    let data = load_dataset(&c.data)?;
    let eval_data = c.eval_data.as_deref().map(load_dataset).transpose()?;
    let out = distill(&teacher, &data, eval_data.as_ref(), &train_cfg)?;
    save_checkpoint(&out.checkpoint, &c.out)?;
    print_history(&out.history)
}

fn select_docs(catalog: Vec<Document>, candidates: Option<&[String]>) -> Result<Vec<Document>> {
    let Some(ids) = candidates else { return Ok(catalog) };
    let by_id: HashMap<&str, &Document> = catalog.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut missing: Vec<String> = ids.iter().filter(|id| !by_id.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(listrank::Error::Lookup { kind: "document", missing }.into());
    }
    Ok(ids.iter().map(|id| by_id[id.as_str()].clone()).collect())
}

fn ranking_csv(result: &RankResult) -> String {
    let mut out = String::from("rank,doc_id,score\n");
    for (i, (id, score)) in result.ranking.iter().enumerate() {
        out.push_str(&format!("{},{},{:.6}\n", i + 1, id, score));
    }
    out
}

fn rank(c: RankCmd, seed: u64, name: &str) -> Result<()> {
    input(&c.model, "model")?;
    for (p, flag) in [(&c.catalog, "catalog"), (&c.store, "store")] {
        if let Some(p) = p {
            input(p, flag)?;
        }
    }
    if let Some(p) = &c.out {
        output(p, "out")?;
    }
    let mut run = RunConfig::new(name, seed);
    run.path("model", Some(&c.model))
        .path("catalog", c.catalog.as_deref())
        .path("store", c.store.as_deref())
        .path("out", c.out.as_deref());
    run.echo();

    let model = load_checkpoint(&c.model)?;
    let Some(query) = &c.query else {
        let (Some(catalog), Some(out)) = (&c.catalog, &c.out) else {
            return Err(UsageError("building a store needs --catalog and --out (or pass --query)".into()).into());
        };
        let docs = select_docs(load_dataset(catalog)?.catalog(), c.candidates.as_deref())?;
        let store = precompute_embeddings(&model, &docs)?;
        store.save(out)?;
        eprintln!("stored {} embeddings of dimension {}", store.len(), store.dim());
        return stdout(&format!("{}\n", out.display()));
    };
    let result = match (&c.store, &c.catalog) {
        (Some(store), _) => {
            let store = EmbeddingStore::load(store)?;
            let ids: Vec<&str> = match &c.candidates {
                Some(ids) => ids.iter().map(String::as_str).collect(),
                None => store.ids().iter().map(String::as_str).collect(),
            };
            rank_with_student(&model, &store, query, &ids)?
        }
        (None, Some(catalog)) => {
            let docs = select_docs(load_dataset(catalog)?.catalog(), c.candidates.as_deref())?;
            if model.meta().kind == ModelKind::BiEncoder {
                rank_with_student_uncached(&model, query, &docs)?
            } else {
                rank_with_teacher(&model, query, &docs)?
            }
        }
        (None, None) => return Err(UsageError("ranking needs --store or --catalog".into()).into()),
    };
    eprintln!("ranked {} documents in {:.3} ms", result.ranking.len(), result.latency_ms);
    let csv = ranking_csv(&result);
    if let Some(out) = &c.out {
        write_atomic(out, csv.as_bytes())?;
    }
    stdout(&csv)
}

fn bench(c: BenchCmd, file: &FileConfig, seed: u64, name: &str) -> Result<()> {
    for (p, flag) in [(&c.teacher, "teacher"), (&c.student, "student"), (&c.store, "store"), (&c.data, "data")] {
        input(p, flag)?;
    }
    if let Some(p) = &c.out {
        output(p, "out")?;
    }
    let (queries, list_size) = config::bench_sizes(&c.bench, &file.bench);
    let mut run = RunConfig::new(name, seed);
    run.path("teacher", Some(&c.teacher))
        .path("student", Some(&c.student))
        .path("store", Some(&c.store))
        .path("data", Some(&c.data))
        .path("out", c.out.as_deref());
    run.bench = Some((queries, list_size));
    run.echo();

    let teacher = load_checkpoint(&c.teacher)?;
    let student = load_checkpoint(&c.student)?;
    let store = EmbeddingStore::load(&c.store)?;
    let data = load_dataset(&c.data)?;
    let report = benchmark_on_dataset(&teacher, &student, &store, &data, queries, list_size, seed)?;
    eprintln!("student speedup {:.2}x", report.speedup());
    let csv = report.csv();
    if let Some(out) = &c.out {
        write_atomic(out, csv.as_bytes())?;
    }
    stdout(&csv)
}


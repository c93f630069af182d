use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use serde_json::json;

use pagelm::alt_layout::AeTrainConfig;
use pagelm::doc_model::{filter_page, normalize_page, read_corpus, to_jsonl, Document, FilterConfig, FilterVerdict};
use pagelm::encoder::{compose_inputs, encoder_forward, init_params, train_mlm, LogRow};
use pagelm::extraction::{f1_eval, gold_values, keyed, predictions_to_tsv, read_predictions, EvalReport, Task};
use pagelm::numerics::checkpoint::{self, write_atomic};
use pagelm::parallel::Exec;
use pagelm::pipeline::{
    evaluate, finetune as finetune_pages, mean_sd, prepare_pages, pretrain_sequences, table_cell, train_autoencoder,
    train_vocab, ModelBundle, Pretrained, RunSpec,
};
use pagelm::runconfig::RunConfig;
use pagelm::synthcorpus::gen_corpus;
use pagelm::tokenizer::BpeVocab;
use pagelm::viz::{attention_records, render_svg};
use pagelm::{Error, Result};

/// Bitmaps used to fit the neighborhood autoencoder before pretraining.
const AE_BITMAPS: usize = 1000;
const LOG_EVERY: u64 = 50;

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Create the run directory and echo the effective configuration.
fn start_run(out: &Path, cfg: &RunConfig) -> Result<()> {
    mkdir(out)?;
    cfg.validate()?;
    write(&out.join("config.txt"), &cfg.to_text())
}

fn read_docs(path: &Path) -> Result<Vec<(String, Document)>> {
    let docs = read_corpus(path)?;
    if docs.is_empty() {
        warn!("{}: no documents", path.display());
    }
    Ok(docs)
}

fn nonempty(path: &Path) -> Result<Vec<(String, Document)>> {
    let docs = read_docs(path)?;
    if docs.is_empty() {
        return Err(Error::Config(format!("{}: corpus is empty", path.display())));
    }
    Ok(docs)
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{}\n", LogRow::csv_header());
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn corpus_gen(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    start_run(out, cfg)?;
    let path = out.join("corpus.jsonl");
    let stats = gen_corpus(&cfg.gen, count, &path, cfg.seed, Exec::Parallel)?;
    info!(
        "wrote {} documents to {} (tokens {}..{}, mean {:.1})",
        stats.documents,
        path.display(),
        stats.min_tokens,
        stats.max_tokens,
        stats.mean_tokens
    );
    Ok(())
}

pub fn corpus_filter(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    start_run(out, cfg)?;
    let docs = read_docs(input)?;
    let fc = FilterConfig::default();
    let mut kept = Vec::new();
    let mut log = String::from("doc_id\treason\n");
    for (id, d) in &docs {
        match filter_page(d, &fc) {
            FilterVerdict::Accept => kept.push(d),
            FilterVerdict::Reject(r) => {
                let _ = writeln!(log, "{id}\t{}", r.as_str());
            }
        }
    }
    write(&out.join("kept.jsonl"), &to_jsonl(kept.iter().copied()))?;
    write(&out.join("rejected.tsv"), &log)?;
    info!("kept {} of {} pages", kept.len(), docs.len());
    Ok(())
}

pub fn bpe_train(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    start_run(out, cfg)?;
    let docs = nonempty(corpus)?;
    let vocab = train_vocab(&docs, cfg.encoder.vocab_size)?;
    vocab.save(&out.join("vocab.txt"))?;
    info!("vocabulary of {} tokens ({} merges)", vocab.len(), vocab.merges().len());
    Ok(())
}

pub fn train(cfg: &mut RunConfig, corpus: &Path, vocab: Option<&Path>, out: &Path) -> Result<()> {
    let docs = nonempty(corpus)?;
    let vocab = match vocab {
        Some(p) => BpeVocab::load(p)?,
        None => train_vocab(&docs, cfg.encoder.vocab_size)?,
    };
    cfg.encoder.vocab_size = vocab.len();
    start_run(out, cfg)?;
    let exec = Exec::Parallel;
    let autoencoder = if cfg.encoder.layout == pagelm::encoder::LayoutMode::Autoencoder {
        let ae_cfg = AeTrainConfig {
            seed: cfg.seed,
            ..Default::default()
        };
        let (params, losses) = train_autoencoder(&docs, AE_BITMAPS, &ae_cfg, exec)?;
        info!("autoencoder epoch losses {losses:?}");
        Some(params)
    } else {
        None
    };
    let ctx = pagelm::encoder::LayoutContext::new(cfg.encoder.layout, autoencoder.as_ref());
    let pages = prepare_pages(&docs, &vocab, &ctx, exec)?;
    let seqs = pretrain_sequences(&pages, cfg.encoder.max_len)?;
    info!("{} pages, {} sequences", pages.len(), seqs.len());
    let mlm = cfg.seeded_mlm();
    let init = init_params(&cfg.encoder, mlm.seed)?;
    let res = train_mlm(&seqs, &cfg.encoder, &mlm, init, exec, &mut |row, _| {
        if row.step % LOG_EVERY == 0 || row.step + 1 == mlm.steps {
            info!("step {} loss {:.4} lr {:.2e} q {:.3}", row.step, row.loss, row.lr, row.q);
        }
        Ok(())
    })?;
    write(&out.join("train_log.csv"), &log_csv(&res.log))?;
    let bundle = ModelBundle {
        params: res.params,
        encoder: cfg.encoder.clone(),
        vocab,
        q: pagelm::encoder::final_q(cfg.encoder.q_schedule),
        task: None,
        autoencoder,
    };
    bundle.save(&out.join("checkpoint"))?;
    info!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    ModelBundle::load(dir).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot load checkpoint {}: {source} ({})", dir.display(), path.display())),
        other => other,
    })
}

/// Fine-tune `pre` once with `seed`; returns the tagging bundle and its log.
fn finetune_once(
    cfg: &RunConfig,
    pre: &ModelBundle,
    train: &[(String, Document)],
    dev: &[(String, Document)],
    seed: u64,
) -> Result<(ModelBundle, Vec<LogRow>, Vec<f64>)> {
    let exec = Exec::Parallel;
    let task = &cfg.task;
    let ctx = pre.layout_context();
    let tr = prepare_pages(train, &pre.vocab, &ctx, exec)?;
    let dv = prepare_pages(dev, &pre.vocab, &ctx, exec)?;
    let spec = RunSpec {
        encoder: pre.encoder.clone(),
        mlm: cfg.seeded_mlm(),
        finetune: cfg.seeded_finetune(seed),
    };
    let pretrained = Pretrained {
        params: pre.params.clone(),
        log: Vec::new(),
        q: pre.q,
    };
    let ft = finetune_pages(&pretrained, &tr, &dv, &spec, task, exec)?;
    info!("seed {seed}: dev F1 by epoch {:?}, best epoch {}", ft.dev_scores, ft.best_epoch);
    let bundle = ModelBundle {
        params: ft.params,
        task: Some(task.clone()),
        ..pre.clone()
    };
    Ok((bundle, ft.log, ft.dev_scores))
}

fn scores_csv(scores: &[f64]) -> String {
    let mut s = String::from("epoch,dev_f1\n");
    for (i, f) in scores.iter().enumerate() {
        let _ = writeln!(s, "{},{f}", i + 1);
    }
    s
}

pub fn finetune(cfg: &RunConfig, checkpoint: &Path, corpus: &Path, dev: &Path, out: &Path) -> Result<()> {
    let pre = load_bundle(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.encoder = pre.encoder.clone();
    start_run(out, &cfg)?;
    let (bundle, log, dev_scores) = finetune_once(&cfg, &pre, &nonempty(corpus)?, &nonempty(dev)?, cfg.seed)?;
    write(&out.join("finetune_log.csv"), &log_csv(&log))?;
    write(&out.join("dev_scores.csv"), &scores_csv(&dev_scores))?;
    bundle.save(&out.join("checkpoint"))
}

fn tagging_task(bundle: &ModelBundle) -> Result<Task> {
    bundle
        .task
        .clone()
        .ok_or_else(|| Error::Config("checkpoint has no tagging head; run finetune first".into()))
}

fn run_extraction(bundle: &ModelBundle, docs: &[(String, Document)], out: &Path) -> Result<EvalReport> {
    let task = tagging_task(bundle)?;
    let pages = prepare_pages(docs, &bundle.vocab, &bundle.layout_context(), Exec::Parallel)?;
    let (preds, report) = evaluate(&pages, &bundle.params, &bundle.encoder, bundle.q, &task, Exec::Parallel)?;
    write(&out.join("predictions.tsv"), &predictions_to_tsv(&preds))?;
    Ok(report)
}

pub fn extract(cfg: &RunConfig, checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let bundle = load_bundle(checkpoint)?;
    start_run(out, cfg)?;
    run_extraction(&bundle, &read_docs(corpus)?, out)?;
    info!("predictions written to {}", out.join("predictions.tsv").display());
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    write(&out.join("report.json"), &report.to_json())?;
    info!(
        "P {:.4} R {:.4} F1 {:.4}",
        report.overall.precision, report.overall.recall, report.overall.f1
    );
    Ok(())
}

pub fn eval_predictions(cfg: &RunConfig, predictions: &Path, corpus: &Path, out: &Path) -> Result<()> {
    start_run(out, cfg)?;
    let docs = read_docs(corpus)?;
    let golds = gold_values(docs.iter().map(|(id, d)| (id.as_str(), d)), &cfg.task);
    let report = f1_eval(&keyed(&read_predictions(predictions)?), &golds);
    write_report(out, &report)
}

pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let bundle = load_bundle(checkpoint)?;
    start_run(out, cfg)?;
    let report = run_extraction(&bundle, &read_docs(corpus)?, out)?;
    write_report(out, &report)
}

pub fn eval_seeds(cfg: &RunConfig, pretrained: &Path, train: &Path, dev: &Path, test: &Path, out: &Path) -> Result<()> {
    let pre = load_bundle(pretrained)?;
    let mut cfg = cfg.clone();
    cfg.encoder = pre.encoder.clone();
    start_run(out, &cfg)?;
    let (train, dev, test) = (nonempty(train)?, nonempty(dev)?, read_docs(test)?);
    let mut reports = Vec::new();
    for i in 0..cfg.seeds {
        let seed = cfg.seed + i as u64;
        let dir = out.join(format!("seed{seed}"));
        mkdir(&dir)?;
        let (bundle, log, dev_scores) = finetune_once(&cfg, &pre, &train, &dev, seed)?;
        write(&dir.join("finetune_log.csv"), &log_csv(&log))?;
        write(&dir.join("dev_scores.csv"), &scores_csv(&dev_scores))?;
        let report = run_extraction(&bundle, &test, &dir)?;
        write(&dir.join("report.json"), &report.to_json())?;
        reports.push(report);
    }
    let mut keys: Vec<String> = reports.iter().flat_map(|r| r.per_key.keys().cloned()).collect();
    keys.sort();
    keys.dedup();
    let mut table = String::from("key\tf1_mean\tf1_sd\tcell\n");
    let mut summary = BTreeMap::new();
    let rows = keys
        .iter()
        .map(|k| (k.clone(), reports.iter().map(|r| r.per_key.get(k).map_or(0.0, |s| s.f1)).collect::<Vec<_>>()))
        .chain(std::iter::once(("overall".to_string(), reports.iter().map(|r| r.overall.f1).collect())));
    for (k, f1s) in rows {
        let m = mean_sd(&f1s)?;
        let _ = writeln!(table, "{k}\t{:.6}\t{:.6}\t{}", m.mean, m.sd, table_cell(m));
        summary.insert(k, json!({"f1_mean": m.mean, "f1_sd": m.sd, "f1": f1s}));
    }
    write(&out.join("table.tsv"), &table)?;
    let body = json!({"seeds": cfg.seeds, "summary": summary, "runs": reports});
    write(&out.join("report.json"), &serde_json::to_string_pretty(&body).expect("json"))?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn viz_attn(
    cfg: &RunConfig,
    checkpoint: &Path,
    doc: &Path,
    index: usize,
    layer: Option<usize>,
    head: Option<usize>,
    average: bool,
    token: usize,
    out: &Path,
) -> Result<()> {
    let bundle = load_bundle(checkpoint)?;
    let docs = nonempty(doc)?;
    let (id, raw) = docs
        .get(index)
        .ok_or_else(|| Error::Config(format!("{}: no document at index {index}", doc.display())))?;
    start_run(out, cfg)?;
    let (norm, _) = normalize_page(raw)?;
    let pages = prepare_pages(&[(id.clone(), raw.clone())], &bundle.vocab, &bundle.layout_context(), Exec::Sequential)?;
    let seq = pages[0]
        .prepared
        .sequences(bundle.encoder.max_len)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config(format!("document {id} has no tokens")))?;
    let x = compose_inputs(&seq, &bundle.params, &bundle.encoder, bundle.q)?;
    let (_, attention) = encoder_forward(&x, &bundle.params, &bundle.encoder)?;
    let tokens: Vec<String> = pages[0].prepared.enc.pieces[..seq.len()].to_vec();
    let records = attention_records(&attention, id, &tokens, &seq.boxes, layer, head, average)?;
    for r in &records {
        let stem = match r.head {
            Some(h) => format!("attention_l{}_h{h}", r.layer),
            None => format!("attention_l{}_avg", r.layer),
        };
        write(&out.join(format!("{stem}.json")), &r.to_json())?;
        write(&out.join(format!("{stem}.svg")), &render_svg(r, &norm.page, token)?)?;
    }
    info!("wrote {} attention records", records.len());
    Ok(())
}

pub fn checkpoint_inspect(dir: &Path) -> Result<()> {
    let bundle = load_bundle(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "# encoder");
    for (k, v) in bundle.encoder.to_map() {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s, "# state\nq = {}", bundle.q);
    if let Some(t) = &bundle.task {
        let _ = writeln!(s, "task = {}", t.to_spec());
    }
    let _ = writeln!(s, "vocab = {} tokens, {} merges", bundle.vocab.len(), bundle.vocab.merges().len());
    let _ = writeln!(s, "# tensors");
    for (i, (name, t)) in bundle.params.iter().enumerate() {
        let frozen = if bundle.params.is_trainable(i) { "" } else { "\tfrozen" };
        let _ = writeln!(s, "{name}\t{:?}\t{}{frozen}", t.shape(), t.numel());
    }
    let _ = writeln!(s, "total\t{}", bundle.params.numel());
    if bundle.autoencoder.is_some() {
        let _ = writeln!(s, "autoencoder\t{} tensors", checkpoint::read_manifest(&dir.join("autoencoder"))?.len());
    }
    print!("{s}");
    Ok(())
}

//! End-to-end plumbing: page normalization and encoding, auto-tagged
//! training sequences, batch prediction and scoring, and the pretrain +
//! fine-tune experiment comparing layout and suppression settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alt_layout::{autoencoder_train, render_all, AeTrainConfig, Bitmap, NeighborhoodConfig};
use crate::doc_model::{normalize_page, Document};
use crate::encoder::{
    final_q, finetune_tagger, init_params, prepare_document, tag_document, token_scores, train_mlm, EncoderConfig,
    FinetuneConfig, LayoutContext, MlmConfig, PreparedDoc, TaggedSequence,
};
use crate::error::{Error, Result};
use crate::extraction::{auto_tag, extract_document, f1_eval, gold_values, keyed, subword_labels, EvalReport, Keyed, Prediction, Task};
use crate::numerics::{checkpoint, ParamSet};
use crate::parallel::Exec;
use crate::tokenizer::{bpe_train, BpeVocab};

/// A page ready for the model: normalized coordinates plus sub-words.
#[derive(Debug, Clone)]
pub struct Page {
    pub id: String,
    pub doc: Document,
    pub prepared: PreparedDoc,
}

pub fn prepare_pages(docs: &[(String, Document)], vocab: &BpeVocab, ctx: &LayoutContext<'_>, exec: Exec) -> Result<Vec<Page>> {
    exec.map(docs, |(id, d)| {
        let (doc, _) = normalize_page(d)?;
        let prepared = prepare_document(&doc, vocab, ctx)?;
        Ok(Page {
            id: id.clone(),
            doc,
            prepared,
        })
    })
    .into_iter()
    .collect()
}

pub fn train_vocab(docs: &[(String, Document)], vocab_size: usize) -> Result<BpeVocab> {
    bpe_train(docs.iter().flat_map(|(_, d)| d.tokens.iter().map(|t| t.text.as_str())), vocab_size)
}

/// All chunks of all pages, for pretraining.
pub fn pretrain_sequences(pages: &[Page], max_len: usize) -> Result<Vec<crate::encoder::Sequence>> {
    let mut out = Vec::new();
    for p in pages {
        out.extend(p.prepared.sequences(max_len)?);
    }
    Ok(out)
}

/// Auto-tagged chunks of all pages.
pub fn tagged_sequences(pages: &[Page], task: &Task, max_len: usize) -> Result<Vec<TaggedSequence>> {
    let mut out = Vec::new();
    for p in pages {
        let labels = subword_labels(&auto_tag(&p.doc, task), &p.prepared.enc.token_of);
        let mut offset = 0;
        for seq in p.prepared.sequences(max_len)? {
            let n = seq.len();
            out.push(TaggedSequence {
                seq,
                labels: labels[offset..offset + n].to_vec(),
            });
            offset += n;
        }
    }
    Ok(out)
}

/// One selected value per key and page.
pub fn predict(pages: &[Page], params: &ParamSet, cfg: &EncoderConfig, q: f64, task: &Task, exec: Exec) -> Result<Vec<Prediction>> {
    let per_page = exec.map(pages, |p| -> Result<Vec<Prediction>> {
        if p.prepared.enc.is_empty() {
            return Ok(Vec::new());
        }
        let sub = tag_document(&p.prepared, params, cfg, q)?;
        let tok = token_scores(&sub, &p.prepared.enc.token_of, p.doc.tokens.len())?;
        let found = extract_document(&p.doc.texts(), &tok, task)?;
        Ok(found
            .into_iter()
            .map(|(key, (value, score))| Prediction {
                doc_id: p.id.clone(),
                key,
                value,
                score,
            })
            .collect())
    });
    Ok(per_page.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

pub fn golds(pages: &[Page], task: &Task) -> Keyed {
    gold_values(pages.iter().map(|p| (p.id.as_str(), &p.doc)), task)
}

pub fn evaluate(pages: &[Page], params: &ParamSet, cfg: &EncoderConfig, q: f64, task: &Task, exec: Exec) -> Result<(Vec<Prediction>, EvalReport)> {
    let preds = predict(pages, params, cfg, q, task, exec)?;
    let report = f1_eval(&keyed(&preds), &golds(pages, task));
    Ok((preds, report))
}

/// Pretraining followed by fine-tuning for one encoder configuration.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub encoder: EncoderConfig,
    pub mlm: MlmConfig,
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParamSet,
    pub log: Vec<crate::encoder::LogRow>,
    /// Positional dropout probability reached at the end of pretraining.
    pub q: f64,
}

pub fn pretrain(train: &[Page], spec: &RunSpec, exec: Exec) -> Result<Pretrained> {
    let seqs = pretrain_sequences(train, spec.encoder.max_len)?;
    let init = init_params(&spec.encoder, spec.mlm.seed)?;
    let res = train_mlm(&seqs, &spec.encoder, &spec.mlm, init, exec, &mut |_, _| Ok(()))?;
    Ok(Pretrained {
        params: res.params,
        log: res.log,
        q: final_q(spec.encoder.q_schedule),
    })
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub params: ParamSet,
    pub dev_scores: Vec<f64>,
    pub best_epoch: usize,
    pub log: Vec<crate::encoder::LogRow>,
    pub q: f64,
}

/// Fine-tune on auto-tagged `train`, early-stopping on dev F1.
pub fn finetune(pre: &Pretrained, train: &[Page], dev: &[Page], spec: &RunSpec, task: &Task, exec: Exec) -> Result<Finetuned> {
    let cfg = &spec.encoder;
    let tagged = tagged_sequences(train, task, cfg.max_len)?;
    let ft = FinetuneConfig { q: pre.q, ..spec.finetune };
    let res = finetune_tagger(&pre.params, cfg, task.num_labels(), &tagged, dev, &ft, exec, &mut |params, dev| {
        Ok(evaluate(dev, params, cfg, pre.q, task, exec)?.1.overall.f1)
    })?;
    Ok(Finetuned {
        params: res.params,
        dev_scores: res.dev_scores,
        best_epoch: res.best_epoch,
        log: res.log,
        q: pre.q,
    })
}

/// Everything needed to run a trained model: weights, architecture,
/// tokenizer, the positional dropout level used at inference, and for
/// tagging models the task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub params: ParamSet,
    pub encoder: EncoderConfig,
    pub vocab: BpeVocab,
    pub q: f64,
    pub task: Option<Task>,
    pub autoencoder: Option<ParamSet>,
}

const ENCODER_FILE: &str = "encoder.txt";
const VOCAB_FILE: &str = "vocab.txt";
const STATE_FILE: &str = "state.txt";
const AE_DIR: &str = "autoencoder";

fn kv_text(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::parse(path.display().to_string(), format!("bad line {l:?}")))
        })
        .collect()
}

impl ModelBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.params, dir)?;
        checkpoint::write_atomic(&dir.join(ENCODER_FILE), kv_text(&self.encoder.to_map()).as_bytes())?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut state = BTreeMap::from([("q".to_string(), format!("{:?}", self.q))]);
        if let Some(t) = &self.task {
            state.insert("task".into(), t.to_spec());
        }
        checkpoint::write_atomic(&dir.join(STATE_FILE), kv_text(&state).as_bytes())?;
        if let Some(ae) = &self.autoencoder {
            checkpoint::save(ae, &dir.join(AE_DIR))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(checkpoint::MANIFEST).exists() {
            return Err(Error::Config(format!("{} is not a checkpoint directory", dir.display())));
        }
        let encoder = EncoderConfig::from_map(&parse_kv(&dir.join(ENCODER_FILE))?)?;
        let mut params = checkpoint::load(dir)?;
        // frozen tensors are recognised by name from a fresh initialization
        let template = init_params(&encoder, 0)?;
        for i in 0..params.len() {
            if let Some(j) = template.id(params.name(i)) {
                params.set_trainable(i, template.is_trainable(j));
            }
        }
        let state = parse_kv(&dir.join(STATE_FILE))?;
        let q = state
            .get("q")
            .ok_or_else(|| Error::Config("checkpoint state lacks q".into()))?
            .parse()
            .map_err(|_| Error::Config("checkpoint q is not a number".into()))?;
        let task = state.get("task").map(|t| Task::from_spec(t)).transpose()?;
        let ae_dir = dir.join(AE_DIR);
        let autoencoder = ae_dir.join(checkpoint::MANIFEST).exists().then(|| checkpoint::load(&ae_dir)).transpose()?;
        Ok(Self {
            params,
            encoder,
            vocab: BpeVocab::load(&dir.join(VOCAB_FILE))?,
            q,
            task,
            autoencoder,
        })
    }

    pub fn layout_context(&self) -> LayoutContext<'_> {
        LayoutContext::new(self.encoder.layout, self.autoencoder.as_ref())
    }
}

/// Train the neighborhood autoencoder on at most `max_bitmaps` renderings
/// sampled from `docs` (page-normalized first).
pub fn train_autoencoder(docs: &[(String, Document)], max_bitmaps: usize, cfg: &AeTrainConfig, exec: Exec) -> Result<(ParamSet, Vec<f64>)> {
    let nb = NeighborhoodConfig::default();
    let mut maps: Vec<Bitmap> = Vec::new();
    for (_, d) in docs {
        maps.extend(render_all(&normalize_page(d)?.0, &nb)?);
    }
    maps.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    maps.truncate(max_bitmaps);
    let trained = autoencoder_train(&maps, cfg, exec)?;
    Ok((trained.params, trained.epoch_loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(xs: &[f64]) -> Result<MeanSd> {
    if xs.is_empty() {
        return Err(Error::contract("mean of nothing"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanSd { mean, sd })
}

/// `mean(sd)` with the sd in units of the last printed digit, e.g.
/// `0.704(15)`.
pub fn table_cell(m: MeanSd) -> String {
    format!("{:.3}({})", m.mean, (m.sd * 1000.0).round() as i64)
}

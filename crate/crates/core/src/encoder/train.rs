//! Masked-LM pretraining, tagger fine-tuning with early stopping, and
//! tagging inference.

use rand::seq::SliceRandom;

use super::config::{DropoutVariant, EncoderConfig, LayoutMode};
use super::dropout::{derive_rng, keep_mask, mlm_mask, q_schedule};
use super::input::{PreparedDoc, Sequence};
use super::model::{
    add_tagger, compose_graph, encoder_stack, mlm_loss, tag_logits, tagger_classes, Positional,
};
use crate::alt_layout::{update_running_stats, BnMode};
use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_rows_inplace;
use crate::numerics::{
    lr_schedule_with, sum_grads_scaled, AdamWConfig, BatchStats, Graph, OptimState, ParamSet, Tensor,
};
use crate::parallel::Exec;

const STREAM_ORDER: u64 = 1;
const STREAM_MLM: u64 = 2;
const STREAM_POS: u64 = 3;
const STREAM_HEAD: u64 = 4;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub q: f64,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "step,loss,lr,q"
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.lr, self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ParamSet,
    pub log: Vec<LogRow>,
}

/// Per-example outcome: loss sum, labelled count, gradients, batch stats.
type ExampleOut = (f64, usize, Vec<(usize, Vec<f32>)>, Vec<(String, BatchStats<f32>)>);

/// Deterministic batch order: a fresh seeded shuffle per pass.
struct BatchOrder {
    seed: u64,
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl BatchOrder {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            order: Vec::new(),
            cursor: n,
            epoch: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.n) {
            if self.cursor == self.n {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut derive_rng(self.seed, &[STREAM_ORDER, self.epoch]));
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn positional_mask(cfg: &EncoderConfig, len: usize, q: f64, seed: u64, step: u64, j: u64) -> Vec<bool> {
    // the dimension variant shares one mask across the whole batch
    let mut rng = match cfg.dropout_variant {
        DropoutVariant::Dimension => derive_rng(seed, &[STREAM_POS, step]),
        _ => derive_rng(seed, &[STREAM_POS, step, j]),
    };
    keep_mask(len, cfg.n, q, cfg.dropout_variant, &mut rng)
}

fn bn_mode(cfg: &EncoderConfig) -> BnMode {
    if cfg.layout == LayoutMode::Graph {
        BnMode::Train
    } else {
        BnMode::Eval
    }
}

fn apply_step(
    params: &mut ParamSet,
    opt: &mut OptimState,
    outs: Vec<ExampleOut>,
    lr: f64,
) -> Result<f64> {
    let count: usize = outs.iter().map(|o| o.1).sum();
    if count == 0 {
        return Ok(0.0);
    }
    let loss = outs.iter().map(|o| o.0).sum::<f64>() / count as f64;
    let mut stats = Vec::new();
    let mut grads = Vec::with_capacity(outs.len());
    for (_, _, g, s) in outs {
        grads.push(g);
        stats.extend(s);
    }
    let grads = sum_grads_scaled(grads, 1.0 / count as f32);
    opt.step(params, &grads, lr)?;
    if !stats.is_empty() {
        update_running_stats(params, &stats, BN_MOMENTUM)?;
    }
    Ok(loss)
}

fn mlm_example(
    seq: &Sequence,
    params: &ParamSet,
    cfg: &EncoderConfig,
    q: f64,
    seed: u64,
    step: u64,
    j: u64,
) -> Result<ExampleOut> {
    let (ids, labels) = mlm_mask(&seq.ids, cfg.vocab_size, &mut derive_rng(seed, &[STREAM_MLM, step, j]));
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Ok((0.0, 0, Vec::new(), Vec::new()));
    }
    let masked = Sequence { ids, ..seq.clone() };
    let mask = positional_mask(cfg, seq.len(), q, seed, step, j);
    let mut g = Graph::with_params(params);
    let x = compose_graph(&mut g, &masked, cfg, Positional::Masked(&mask), bn_mode(cfg))?;
    let (h, _) = encoder_stack(&mut g, x, cfg)?;
    let loss = mlm_loss(&mut g, h, &labels)?.expect("count > 0");
    let total = g.scale(loss, count as f32);
    let value = g.value(total).data()[0] as f64;
    let stats = g.batch_stats().to_vec();
    let grads = g.backward(total)?.into_param_grads();
    Ok((value, count, grads, stats))
}

/// Pretrain with masked-LM cross-entropy. `on_step` sees every log row and
/// the parameters after the update (for logging and periodic checkpoints).
pub fn train_mlm(
    seqs: &[Sequence],
    cfg: &EncoderConfig,
    tc: &MlmConfig,
    init: ParamSet,
    exec: Exec,
    on_step: &mut dyn FnMut(&LogRow, &ParamSet) -> Result<()>,
) -> Result<TrainResult> {
    if seqs.is_empty() {
        return Err(Error::contract("MLM training needs a non-empty corpus"));
    }
    if tc.steps == 0 || tc.batch_size == 0 {
        return Err(Error::contract("MLM training needs steps and batch size > 0"));
    }
    let mut params = init;
    let mut opt = OptimState::new(&params, AdamWConfig::default());
    let mut order = BatchOrder::new(tc.seed, seqs.len());
    let mut log = Vec::with_capacity(tc.steps as usize);
    for step in 0..tc.steps {
        let q = q_schedule(step, tc.steps, cfg.q_schedule)?;
        let lr = lr_schedule_with(step, tc.steps, tc.peak_lr, tc.warmup_frac)?;
        let batch = order.next_batch(tc.batch_size);
        let jobs: Vec<(u64, usize)> = batch.iter().enumerate().map(|(j, &i)| (j as u64, i)).collect();
        let outs = exec.map(&jobs, |&(j, i)| mlm_example(&seqs[i], &params, cfg, q, tc.seed, step, j));
        let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
        let loss = apply_step(&mut params, &mut opt, outs, lr)?;
        let row = LogRow { step, loss, lr, q };
        on_step(&row, &params)?;
        log.push(row);
    }
    Ok(TrainResult { params, log })
}

/// Mean masked-LM loss over `seqs` with fixed masks drawn from `seed`,
/// without updating anything.
pub fn mlm_eval(seqs: &[Sequence], params: &ParamSet, cfg: &EncoderConfig, q: f64, seed: u64, exec: Exec) -> Result<f64> {
    let jobs: Vec<usize> = (0..seqs.len()).collect();
    let outs = exec.map(&jobs, |&i| -> Result<(f64, usize)> {
        let seq = &seqs[i];
        let (ids, labels) = mlm_mask(&seq.ids, cfg.vocab_size, &mut derive_rng(seed, &[STREAM_MLM, u64::MAX, i as u64]));
        let count = labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Ok((0.0, 0));
        }
        let masked = Sequence { ids, ..seq.clone() };
        let mut g = Graph::with_params(params);
        let x = compose_graph(&mut g, &masked, cfg, Positional::Expected(q), BnMode::Eval)?;
        let (h, _) = encoder_stack(&mut g, x, cfg)?;
        let loss = mlm_loss(&mut g, h, &labels)?.expect("count > 0");
        Ok((g.value(loss).data()[0] as f64 * count as f64, count))
    });
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    let count: usize = outs.iter().map(|o| o.1).sum();
    if count == 0 {
        return Err(Error::contract("no positions selected for evaluation"));
    }
    Ok(outs.iter().map(|o| o.0).sum::<f64>() / count as f64)
}

/// A sequence with one class label per position (0 = outside).
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSequence {
    pub seq: Sequence,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub patience: usize,
    pub seed: u64,
    /// Positional dropout probability, held fixed.
    pub q: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            batch_size: 16,
            peak_lr: 5e-4,
            patience: 3,
            seed: 0,
            q: 0.0,
        }
    }
}

/// Keeps the best score; signals a stop after `patience` epochs without a
/// strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Record the score of `epoch` (1-based). Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub params: ParamSet,
    pub dev_scores: Vec<f64>,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

fn tag_example(ex: &TaggedSequence, params: &ParamSet, cfg: &EncoderConfig, ft: &FinetuneConfig, step: u64, j: u64) -> Result<ExampleOut> {
    let len = ex.seq.len();
    if ex.labels.len() != len {
        return Err(Error::contract("labels and sequence differ in length"));
    }
    let mask = positional_mask(cfg, len, ft.q, ft.seed, step, j);
    let mut g = Graph::with_params(params);
    let x = compose_graph(&mut g, &ex.seq, cfg, Positional::Masked(&mask), bn_mode(cfg))?;
    let (h, _) = encoder_stack(&mut g, x, cfg)?;
    let logits = tag_logits(&mut g, h)?;
    let labels: Vec<Option<usize>> = ex.labels.iter().map(|&c| Some(c)).collect();
    let loss = g.cross_entropy(logits, &labels)?;
    let total = g.scale(loss, len as f32);
    let value = g.value(total).data()[0] as f64;
    let stats = g.batch_stats().to_vec();
    let grads = g.backward(total)?.into_param_grads();
    Ok((value, len, grads, stats))
}

/// Fine-tune a fresh single-linear tagging head (and the encoder) on
/// token-level labels, scoring `dev` after every epoch and keeping the best
/// parameters. The learning rate decays linearly with no warm-up.
#[allow(clippy::too_many_arguments)]
pub fn finetune_tagger<D>(
    pretrained: &ParamSet,
    cfg: &EncoderConfig,
    classes: usize,
    train: &[TaggedSequence],
    dev: &[D],
    ft: &FinetuneConfig,
    exec: Exec,
    dev_score: &mut dyn FnMut(&ParamSet, &[D]) -> Result<f64>,
) -> Result<FinetuneResult> {
    if dev.is_empty() {
        return Err(Error::contract("fine-tuning needs a non-empty dev set"));
    }
    if train.is_empty() || ft.batch_size == 0 || ft.max_epochs == 0 {
        return Err(Error::contract("fine-tuning needs data, batch size and epochs"));
    }
    let mut params = add_tagger(pretrained, cfg, classes, &mut derive_rng(ft.seed, &[STREAM_HEAD]));
    let mut opt = OptimState::new(&params, AdamWConfig::default());
    let per_epoch = train.len().div_ceil(ft.batch_size) as u64;
    let total = per_epoch * ft.max_epochs as u64;
    let mut stopper = EarlyStopping::new(ft.patience.max(1));
    let mut best = params.clone();
    let (mut dev_scores, mut log) = (Vec::new(), Vec::new());
    let mut step = 0u64;
    for epoch in 1..=ft.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(ft.seed, &[STREAM_ORDER, epoch as u64]));
        for batch in order.chunks(ft.batch_size) {
            let lr = lr_schedule_with(step, total, ft.peak_lr, 0.0)?;
            let jobs: Vec<(u64, usize)> = batch.iter().enumerate().map(|(j, &i)| (j as u64, i)).collect();
            let outs = exec.map(&jobs, |&(j, i)| tag_example(&train[i], &params, cfg, ft, step, j));
            let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
            let loss = apply_step(&mut params, &mut opt, outs, lr)?;
            log.push(LogRow { step, loss, lr, q: ft.q });
            step += 1;
        }
        let score = dev_score(&params, dev)?;
        log::info!("epoch {epoch}: dev score {score:.4}");
        dev_scores.push(score);
        let (improved, stop) = stopper.observe(epoch, score);
        if improved {
            best = params.clone();
        }
        if stop {
            break;
        }
    }
    Ok(FinetuneResult {
        params: best,
        dev_scores,
        best_epoch: stopper.best().map_or(0, |b| b.0),
        log,
    })
}

/// Class probabilities (`len × classes`) for one sequence, no dropout.
pub fn tag_sequence(seq: &Sequence, params: &ParamSet, cfg: &EncoderConfig, q: f64) -> Result<Tensor> {
    let mut g = Graph::with_params(params);
    let x = compose_graph(&mut g, seq, cfg, Positional::Expected(q), BnMode::Eval)?;
    let (h, _) = encoder_stack(&mut g, x, cfg)?;
    let logits = tag_logits(&mut g, h)?;
    let mut probs = g.value(logits).clone();
    let classes = probs.as_matrix_dims().1;
    softmax_rows_inplace(probs.data_mut(), classes);
    Ok(probs)
}

/// Per-subword probabilities over the whole document, chunk by chunk.
pub fn tag_document(doc: &PreparedDoc, params: &ParamSet, cfg: &EncoderConfig, q: f64) -> Result<Tensor> {
    if doc.enc.is_empty() {
        return Err(Error::contract("document has no sub-words"));
    }
    let classes = tagger_classes(params)?;
    let mut data = Vec::with_capacity(doc.enc.len() * classes);
    for seq in doc.sequences(cfg.max_len)? {
        data.extend_from_slice(tag_sequence(&seq, params, cfg, q)?.data());
    }
    Tensor::new([doc.enc.len(), classes], data)
}

/// Original-token class scores: per class, the geometric mean of the
/// token's sub-word probabilities, renormalized to sum to one. Tokens with
/// no sub-words are certain "outside".
pub fn token_scores(subword_probs: &Tensor, token_of: &[usize], n_tokens: usize) -> Result<Tensor> {
    let (rows, classes) = subword_probs.as_matrix_dims();
    if rows != token_of.len() {
        return Err(Error::contract("sub-word rows and token map differ in length"));
    }
    let mut logsum = vec![0.0f64; n_tokens * classes];
    let mut count = vec![0usize; n_tokens];
    for (r, &t) in token_of.iter().enumerate() {
        if t >= n_tokens {
            return Err(Error::contract(format!("token index {t} out of range")));
        }
        count[t] += 1;
        for (c, &p) in subword_probs.row(r).iter().enumerate() {
            logsum[t * classes + c] += (p as f64).max(1e-30).ln();
        }
    }
    let mut out = vec![0.0f32; n_tokens * classes];
    for t in 0..n_tokens {
        let row = &mut out[t * classes..(t + 1) * classes];
        if count[t] == 0 {
            row[0] = 1.0;
            continue;
        }
        let gm: Vec<f64> = (0..classes)
            .map(|c| (logsum[t * classes + c] / count[t] as f64).exp())
            .collect();
        let z: f64 = gm.iter().sum();
        for (o, v) in row.iter_mut().zip(gm) {
            *o = (v / z) as f32;
        }
    }
    Tensor::new([n_tokens, classes], out)
}

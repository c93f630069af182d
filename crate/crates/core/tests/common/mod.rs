//! Shared helpers for the integration and acceptance tests: central finite
//! differences in double precision and a tiny full-model fixture.
#![allow(dead_code)]

use pagelm::alt_layout::{autoencoder_init, BnMode, NeighborhoodConfig};
use pagelm::doc_model::{normalize_page, BBox, Document, Token};
use pagelm::encoder::{
    add_tagger, compose_graph, encoder_stack, init_params, prepare_document, EncoderConfig, LayoutContext, LayoutMode,
    Positional, Sequence,
};
use pagelm::encoder::model::{mlm_loss, tag_logits};
use pagelm::numerics::{Graph, ParamSet, Var};
use pagelm::tokenizer::{bpe_train, BpeVocab};
use pagelm::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this norm are compared in absolute terms. Attention key
/// biases (softmax ignores them) and biases feeding straight into batch norm
/// have exact zero gradients, and the central difference of an O(1) loss
/// carries round-off near 1e-10.
pub const ABS_FLOOR: f64 = 1e-5;

/// One-sided slopes that disagree by more than this fraction (plus the
/// floor) mean the step straddles a ReLU kink.
pub const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries resampled because the step straddled a kink.
    pub kinks: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the checked entries.
    pub rel_err: f64,
    pub grad_norm: f64,
}

/// Compare backprop gradients of `loss` with central differences on up to
/// `per_tensor` entries of every trainable tensor (all entries when the
/// tensor is smaller).
pub fn fd_check(
    params: &ParamSet<f64>,
    per_tensor: usize,
    loss: &dyn Fn(&ParamSet<f64>) -> Result<(f64, Vec<(usize, Vec<f64>)>)>,
) -> Result<Vec<TensorCheck>> {
    let (f0, grads) = loss(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = Vec::new();
    for (pid, grad) in grads {
        if !params.is_trainable(pid) {
            continue;
        }
        let numel = grad.len();
        let mut pool: Vec<usize> = (0..numel).collect();
        pool.shuffle(&mut rng);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let (mut checked, mut kinks) = (0, 0);
        for k in pool {
            if checked == per_tensor {
                break;
            }
            let mut p = params.clone();
            let base = p.by_id(pid).data()[k];
            p.by_id_mut(pid).data_mut()[k] = base + FD_STEP;
            let up = loss(&p)?.0;
            p.by_id_mut(pid).data_mut()[k] = base - FD_STEP;
            let down = loss(&p)?.0;
            let (right, left) = ((up - f0) / FD_STEP, (f0 - down) / FD_STEP);
            if (right - left).abs() > KINK_TOL * (right.abs() + left.abs()) + ABS_FLOOR {
                kinks += 1;
                continue;
            }
            let num = (up - down) / (2.0 * FD_STEP);
            diff += (grad[k] - num).powi(2);
            na += grad[k].powi(2);
            nn += num.powi(2);
            checked += 1;
        }
        out.push(TensorCheck {
            name: params.name(pid).to_string(),
            checked,
            kinks,
            rel_err: diff.sqrt() / na.sqrt().max(nn.sqrt()).max(ABS_FLOOR),
            grad_norm: na.sqrt(),
        });
    }
    Ok(out)
}

/// Nine words, one per line, staggered over three columns. Enough segments
/// that the k-NN graph is not complete.
pub fn tiny_doc(seed: u64) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["Total", "income", "£1,200", "Spending", "900", "Date", "3rd", "May", "2019"];
    let tokens = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let (row, col) = (i / 3, i % 3);
            let x = 40.0 + 120.0 * col as f64 + rng.gen_range(-3.0..3.0);
            let y = 60.0 + 18.0 * (3 * row + col) as f64 + rng.gen_range(-1.0..1.0);
            Token {
                text: w.to_string(),
                bbox: BBox::new(x, y, x + 6.0 * w.chars().count() as f64, y + 10.0),
            }
        })
        .collect();
    Document {
        tokens,
        page: BBox::new(0.0, 0.0, 612.0, 792.0),
        attrs: Default::default(),
    }
}

pub fn tiny_vocab() -> BpeVocab {
    let doc = tiny_doc(0);
    bpe_train(doc.tokens.iter().map(|t| t.text.as_str()), 270).expect("vocab")
}

/// Two-layer `n = 16` model over a tiny page in the given layout mode,
/// returning the f64 parameters (with a 4-class tagging head), the
/// sequence, and the config.
pub fn tiny_model(layout: LayoutMode) -> (ParamSet<f64>, Sequence, EncoderConfig) {
    let vocab = tiny_vocab();
    let cfg = EncoderConfig {
        n: 16,
        layers: 2,
        heads: 2,
        ffn: 32,
        max_len: 64,
        vocab_size: vocab.len(),
        layout,
        adapter_sigma: 0.3,
        ..Default::default()
    };
    let ae = autoencoder_init(5);
    let ctx = LayoutContext {
        mode: layout,
        autoencoder: Some(&ae),
        neighborhood: NeighborhoodConfig::default(),
    };
    let (doc, _) = normalize_page(&tiny_doc(1)).expect("page");
    let prepared = prepare_document(&doc, &vocab, &ctx).expect("prepared");
    let seq = prepared.sequences(cfg.max_len).expect("seq").remove(0);
    let mut params = init_params(&cfg, 11).expect("init");
    params = add_tagger(&params, &cfg, 4, &mut ChaCha8Rng::seed_from_u64(12));
    // larger weights so every path carries signal; GIN biases pushed
    // positive so no batch-norm channel sits on a dead ReLU
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..params.len() {
        if !params.is_trainable(i) {
            continue;
        }
        let name = params.name(i).to_string();
        let gin = name.starts_with("gin.m");
        let shift = gin && (name.ends_with(".bias") || name.ends_with(".beta"));
        for v in params.by_id_mut(i).data_mut() {
            *v += match (gin, shift) {
                (true, true) => rng.gen_range(0.2..0.5),
                (true, false) => 0.0,
                _ => rng.gen_range(-0.2..0.2),
            };
        }
    }
    (params.cast(), seq, cfg)
}

/// Masked-LM plus tagging loss with a fixed positional keep-mask.
pub fn tiny_loss(
    params: &ParamSet<f64>,
    seq: &Sequence,
    cfg: &EncoderConfig,
    mask: &[bool],
) -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
    let mut g = Graph::with_params(params);
    let bn = if cfg.layout == LayoutMode::Graph { BnMode::Train } else { BnMode::Eval };
    let x = compose_graph(&mut g, seq, cfg, Positional::Masked(mask), bn)?;
    let (h, _) = encoder_stack(&mut g, x, cfg)?;
    let mlm: Vec<Option<usize>> = (0..seq.len()).map(|i| (i % 3 == 0).then_some(seq.ids[i] as usize)).collect();
    let l1 = mlm_loss(&mut g, h, &mlm)?.expect("labelled");
    let logits = tag_logits(&mut g, h)?;
    let tags: Vec<Option<usize>> = (0..seq.len()).map(|i| Some(i % 4)).collect();
    let l2 = g.cross_entropy(logits, &tags)?;
    let total: Var = g.add(l1, l2)?;
    let value = g.value(total).data()[0];
    Ok((value, g.backward(total)?.into_param_grads()))
}

pub fn half_mask(len: usize, n: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..len * n).map(|_| rng.gen_bool(0.5)).collect()
}

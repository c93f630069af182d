//! Parameters, input composition, and the pre-norm transformer stack.

use rand::Rng;

use super::config::{EncoderConfig, LayoutMode, PositionalMode};
use super::dropout::derive_rng;
use super::input::{SeqLayout, Sequence};
use crate::alt_layout::{gin, BnMode, GinConfig};
use crate::error::{Error, Result};
use crate::layout::{adapter_graph, adapter_init, layout_matrix, sinusoidal_positions, WindingConfig, SEQUENTIAL_M};
use crate::numerics::nn::{init_linear, init_norm, layer_norm, linear};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const TOKEN_EMB: &str = "emb.token";
pub const POS_EMB: &str = "emb.pos";
pub const MLM_BIAS: &str = "mlm.bias";
pub const TAG_HEAD: &str = "tag";

/// Fresh parameters: N(0, 0.02²) weights, zero biases, unit norms.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, &[0x1417]);
    let mut p = ParamSet::new();
    p.insert_normal(TOKEN_EMB, &[cfg.vocab_size, cfg.n], INIT_STD, &mut rng);
    match cfg.positional {
        PositionalMode::Trainable => {
            p.insert_normal(POS_EMB, &[cfg.max_len, cfg.n], INIT_STD, &mut rng);
        }
        PositionalMode::Sinusoidal => {
            p.insert_frozen(POS_EMB, sinusoidal_positions(cfg.max_len, cfg.n, SEQUENTIAL_M)?);
        }
    }
    if cfg.layout != LayoutMode::None {
        adapter_init(&mut p, cfg.n, cfg.layout_dim(), cfg.adapter_sigma, &mut rng);
    }
    if cfg.layout == LayoutMode::Graph {
        gin::gin_init(&mut p, &GinConfig::default(), INIT_STD, &mut rng);
    }
    for l in 0..cfg.layers {
        init_norm(&mut p, &format!("layer{l}.ln1"), cfg.n);
        for m in ["q", "k", "v", "o"] {
            init_linear(&mut p, &format!("layer{l}.attn.{m}"), cfg.n, cfg.n, INIT_STD, &mut rng);
        }
        init_norm(&mut p, &format!("layer{l}.ln2"), cfg.n);
        init_linear(&mut p, &format!("layer{l}.ffn.up"), cfg.n, cfg.ffn, INIT_STD, &mut rng);
        init_linear(&mut p, &format!("layer{l}.ffn.down"), cfg.ffn, cfg.n, INIT_STD, &mut rng);
    }
    init_norm(&mut p, "final.ln", cfg.n);
    p.insert(MLM_BIAS, Tensor::zeros([cfg.vocab_size]));
    Ok(p)
}

/// Add (or replace) the single-linear tagging head with `classes` outputs.
pub fn add_tagger(params: &ParamSet, cfg: &EncoderConfig, classes: usize, rng: &mut impl Rng) -> ParamSet {
    let mut head = ParamSet::new();
    init_linear(&mut head, TAG_HEAD, cfg.n, classes, INIT_STD, rng);
    let mut out = ParamSet::new();
    for (i, (name, t)) in params.iter().enumerate() {
        if !name.starts_with("tag.") {
            if params.is_trainable(i) {
                out.insert(name, t.clone());
            } else {
                out.insert_frozen(name, t.clone());
            }
        }
    }
    out.absorb(&head, "", true);
    out
}

pub fn tagger_classes(params: &ParamSet) -> Result<usize> {
    Ok(params.get(&format!("{TAG_HEAD}.weight"))?.shape()[0])
}

/// How the positional term enters the sum.
#[derive(Debug, Clone, Copy)]
pub enum Positional<'a> {
    /// Training: explicit keep-mask, survivors not rescaled.
    Masked(&'a [bool]),
    /// Inference: the expectation of the unnormalized dropout, `(1−q)·P`.
    Expected(f64),
}

/// `x_i = S[id_i] + D_q(P[i]) + L(ℓ_i)` for one sequence.
pub fn compose_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    seq: &Sequence,
    cfg: &EncoderConfig,
    pos: Positional<'_>,
    bn: BnMode,
) -> Result<Var> {
    let len = seq.len();
    if len == 0 || len > cfg.max_len {
        return Err(Error::contract(format!("sequence length {len} outside 1..={}", cfg.max_len)));
    }
    if seq.boxes.len() != len {
        return Err(Error::contract("ids and boxes differ in length"));
    }
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let table = g.param(TOKEN_EMB)?;
    let mut x = g.gather(table, &ids)?;

    let keep_all = match pos {
        Positional::Masked(mask) => mask.iter().all(|&k| k),
        Positional::Expected(q) => q <= 0.0,
    };
    let drop_all = match pos {
        Positional::Masked(mask) => !mask.iter().any(|&k| k),
        Positional::Expected(q) => q >= 1.0,
    };
    if !(drop_all && cfg.drop_positional_at_full_q) {
        let ptable = g.param(POS_EMB)?;
        let positions: Vec<usize> = (0..len).collect();
        let mut p = g.gather(ptable, &positions)?;
        if !keep_all {
            let factor: Vec<T> = match pos {
                Positional::Masked(mask) => {
                    if mask.len() != len * cfg.n {
                        return Err(Error::contract("positional mask has the wrong size"));
                    }
                    mask.iter().map(|&k| if k { T::one() } else { T::zero() }).collect()
                }
                Positional::Expected(q) => vec![T::of(1.0 - q.min(1.0)); len * cfg.n],
            };
            let f = g.constant(Tensor::new([len, cfg.n], factor)?);
            p = g.mul(p, f)?;
        }
        x = g.add(x, p)?;
    }

    if let Some(l) = layout_term(g, seq, cfg, bn)? {
        x = g.add(x, l)?;
    }
    Ok(x)
}

fn layout_term<T: Scalar>(g: &mut Graph<'_, T>, seq: &Sequence, cfg: &EncoderConfig, bn: BnMode) -> Result<Option<Var>> {
    let raw = match (cfg.layout, &seq.layout) {
        (LayoutMode::None, _) => return Ok(None),
        (LayoutMode::Winding, _) => {
            let wc = WindingConfig::new(cfg.n)?;
            g.constant(layout_matrix(&seq.boxes, &wc)?.cast())
        }
        (LayoutMode::Autoencoder, SeqLayout::Dense(t)) => {
            if t.as_matrix_dims() != (seq.len(), cfg.layout_dim()) {
                return Err(Error::contract("autoencoder features do not match the sequence"));
            }
            g.constant(t.cast())
        }
        (LayoutMode::Graph, SeqLayout::Graph { graph, seg_of }) => {
            let feats = g.constant(gin::box_features(&graph.boxes)?);
            let emb = gin::gin_forward_graph(g, &graph.nbrs, feats, &GinConfig::default(), bn)?;
            g.gather(emb, seg_of)?
        }
        (mode, _) => {
            return Err(Error::contract(format!("sequence lacks features for layout mode {mode}")));
        }
    };
    Ok(Some(adapter_graph(g, raw)?))
}

/// Pre-norm transformer stack. Returns final hidden states and the
/// attention matrices in `(layer, head)` order.
pub fn encoder_stack<T: Scalar>(g: &mut Graph<'_, T>, x: Var, cfg: &EncoderConfig) -> Result<(Var, Vec<Var>)> {
    let d = cfg.head_dim();
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut x = x;
    let mut attn = Vec::with_capacity(cfg.layers * cfg.heads);
    for l in 0..cfg.layers {
        let h = layer_norm(g, x, &format!("layer{l}.ln1"))?;
        let q = linear(g, h, &format!("layer{l}.attn.q"))?;
        let k = linear(g, h, &format!("layer{l}.attn.k"))?;
        let v = linear(g, h, &format!("layer{l}.attn.v"))?;
        let mut outs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = g.slice_cols(q, head * d, d)?;
            let kh = g.slice_cols(k, head * d, d)?;
            let vh = g.slice_cols(v, head * d, d)?;
            let s = g.matmul_t(qh, kh, false, true)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            attn.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let o = g.concat_cols(&outs)?;
        let o = linear(g, o, &format!("layer{l}.attn.o"))?;
        x = g.add(x, o)?;
        let h = layer_norm(g, x, &format!("layer{l}.ln2"))?;
        let h = linear(g, h, &format!("layer{l}.ffn.up"))?;
        let h = g.gelu(h);
        let h = linear(g, h, &format!("layer{l}.ffn.down"))?;
        x = g.add(x, h)?;
    }
    Ok((layer_norm(g, x, "final.ln")?, attn))
}

/// Masked-LM cross-entropy over the labelled positions, with the output
/// projection tied to the token embedding table. `None` if nothing is
/// labelled.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<'_, T>, hidden: Var, labels: &[Option<usize>]) -> Result<Option<Var>> {
    let positions: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if positions.is_empty() {
        return Ok(None);
    }
    let h = g.gather(hidden, &positions)?;
    let table = g.param(TOKEN_EMB)?;
    let logits = g.matmul_t(h, table, false, true)?;
    let bias = g.param(MLM_BIAS)?;
    let logits = g.add_bias(logits, bias)?;
    let targets: Vec<Option<usize>> = positions.iter().map(|&i| labels[i]).collect();
    Ok(Some(g.cross_entropy(logits, &targets)?))
}

pub fn tag_logits<T: Scalar>(g: &mut Graph<'_, T>, hidden: Var) -> Result<Var> {
    linear(g, hidden, TAG_HEAD)
}

/// Inference-mode input composition for one sequence.
pub fn compose_inputs(seq: &Sequence, params: &ParamSet, cfg: &EncoderConfig, q: f64) -> Result<Tensor> {
    let mut g = Graph::with_params(params);
    let x = compose_graph(&mut g, seq, cfg, Positional::Expected(q), BnMode::Eval)?;
    Ok(g.value(x).clone())
}

/// Contextual embeddings (`len × n`) and attention
/// (`layers × heads × len × len`) for composed inputs `x`.
pub fn encoder_forward(x: &Tensor, params: &ParamSet, cfg: &EncoderConfig) -> Result<(Tensor, Tensor)> {
    let (len, n) = x.as_matrix_dims();
    if n != cfg.n || x.shape().len() != 2 {
        return Err(Error::Shape {
            lhs: x.shape().to_vec(),
            rhs: vec![len, cfg.n],
            context: "encoder input",
        });
    }
    let mut g = Graph::with_params(params);
    let xv = g.constant(x.clone());
    let (h, attn) = encoder_stack(&mut g, xv, cfg)?;
    let data: Vec<f32> = attn.iter().flat_map(|&a| g.value(a).data().to_vec()).collect();
    let attention = Tensor::new([cfg.layers, cfg.heads, len, len], data)?;
    Ok((g.value(h).clone(), attention))
}

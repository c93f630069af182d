//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Numeric arguments select criteria (`cargo test --test acceptance -- 2 5`);
//! other arguments (libtest filters) skip the suite.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fd_check, half_mask, tiny_loss, tiny_model};
use pagelm::alt_layout::{
    autoencoder, autoencoder_embed, autoencoder_init, build_knn_graph, gin_aggregate, gin_forward, gin_init, lp_distance,
    render_all, AeTrainConfig, Bitmap, GinConfig, KnnGraph, NeighborhoodConfig, LATENT_DIM,
};
use pagelm::alt_layout::autoencoder::BITMAP_SIZE;
use pagelm::alt_layout::gin::{box_features, GIN_EPS};
use pagelm::alt_layout::{gin_forward_graph, BnMode};
use pagelm::doc_model::{normalize_page, BBox, Document, Token};
use pagelm::encoder::input::{KNN_K, KNN_P};
use pagelm::encoder::model::{POS_EMB, TOKEN_EMB};
use pagelm::encoder::{
    compose_inputs, encoder_forward, init_params, positional_dropout, prepare_document, DropoutVariant, EncoderConfig,
    FinetuneConfig, LayoutContext, LayoutMode, MlmConfig, QScheduleMode,
};
use pagelm::extraction::{aggregate_select, auto_tag, extract_document, f1_eval, gold_values, Entity, Task};
use pagelm::layout::{adapter_apply, adapter_init, layout_embedding, layout_matrix, WindingConfig};
use pagelm::numerics::{checkpoint, Graph, ParamSet, Tensor};
use pagelm::parallel::Exec;
use pagelm::pipeline::{evaluate, finetune, mean_sd, prepare_pages, pretrain, train_vocab, ModelBundle, Page, RunSpec};
use pagelm::synthcorpus::{gen_corpus, gen_documents, DocType, GenSpec, ReadingOrder};
use pagelm::tokenizer::bpe_train;
use pagelm::viz::{attention_records, render_svg, ROW_SUM_TOL};
use pagelm::Result;

// Pinned tolerances and budgets.
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const NORM_TOL: f64 = 1e-5;
const EQUIVARIANCE_TOL: f64 = 1e-4;
const DROPOUT_SIGMAS: f64 = 3.0;
const DROPOUT_DRAWS: usize = 100_000;
const GIN_EQUIVARIANCE_TOL: f64 = 1e-5;
const AE_RATIO: f64 = 0.5;
const AE_BUDGET: Duration = Duration::from_secs(20 * 60);
const TREND_GAP: f64 = 0.15;
const TREND_FLOOR: f64 = 0.85;
const TREND_BUDGET: Duration = Duration::from_secs(90 * 60);

type Outcome = Result<(bool, String)>;

/// State shared between criteria: the fine-tuned (c) model of the trend
/// run and its test pages.
#[derive(Default)]
struct Shared {
    model_c: Option<(ParamSet, EncoderConfig, f64, Vec<Page>)>,
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: BTreeSet<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if !args.is_empty() && selected.is_empty() {
        println!("acceptance: skipped (filtered)");
        return;
    }
    let want = |i: usize| selected.is_empty() || selected.contains(&i);

    let mut shared = Shared::default();
    let criteria: Vec<(usize, &str, Box<dyn Fn(&mut Shared) -> Outcome>)> = vec![
        (1, "gradient check, all layout modes", Box::new(|_| gradients())),
        (2, "winding norm and text independence", Box::new(|_| winding())),
        (3, "suppression invariants", Box::new(|_| suppression())),
        (4, "unnormalized dropout law", Box::new(|_| dropout_law())),
        (5, "GIN oracle and equivariance", Box::new(|_| gin_oracle())),
        (6, "k-NN under l^(1/2) on a grid", Box::new(|_| knn_grid())),
        (7, "autoencoder reconstruction", Box::new(|_| autoencoder_fit())),
        (8, "layout and suppression trend", Box::new(trend)),
        (9, "pipeline exactness", Box::new(|_| pipeline_exact())),
        (10, "determinism and round trips", Box::new(|_| determinism())),
        (11, "attention export", Box::new(attention_export)),
    ];
    let mut failed = 0;
    for (i, name, f) in &criteria {
        if !want(*i) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match f(&mut shared) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {i:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0, String::new());
    let mut kinks = 0;
    for layout in [LayoutMode::None, LayoutMode::Winding, LayoutMode::Autoencoder, LayoutMode::Graph] {
        let (params, seq, cfg) = tiny_model(layout);
        let mask = half_mask(seq.len(), cfg.n);
        for c in fd_check(&params, 4, &|p| tiny_loss(p, &seq, &cfg, &mask))? {
            kinks += c.kinks;
            if c.rel_err >= worst.0 {
                worst = (c.rel_err, format!("{layout}/{}", c.name));
            }
        }
    }
    let elapsed = t.elapsed();
    Ok((
        worst.0 < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("max rel err {:.2e} at {} ({kinks} kink entries resampled)", worst.0, worst.1),
    ))
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let (x, y) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.3));
    BBox::new(x, y, x + rng.gen_range(0.0..0.3), y + rng.gen_range(0.0..0.05))
}

fn winding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for n in [64usize, 128, 768] {
        let wc = WindingConfig::new(n)?;
        for _ in 0..10_000 {
            let l = layout_embedding(&random_box(&mut rng), &wc);
            let sq: f32 = l.iter().map(|v| v * v).sum();
            worst = worst.max(((sq / (n as f32 / 2.0)) - 1.0).abs() as f64);
        }
    }
    // same boxes, different words: identical layout vectors and adapter output
    let doc = gen_documents(&GenSpec::default(), 1, 3, Exec::Sequential)?.remove(0);
    let (norm, _) = normalize_page(&doc)?;
    let mut other = norm.clone();
    for t in &mut other.tokens {
        t.text = t.text.chars().rev().chain("zq".chars()).collect();
    }
    let wc = WindingConfig::new(64)?;
    let boxes = |d: &Document| d.tokens.iter().map(|t| t.bbox).collect::<Vec<_>>();
    let (a, b) = (layout_matrix(&boxes(&norm), &wc)?, layout_matrix(&boxes(&other), &wc)?);
    let mut params = ParamSet::new();
    adapter_init(&mut params, 64, 64, 0.02, &mut rng);
    let mut same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    for i in 0..norm.tokens.len() {
        let (la, lb) = (adapter_apply(a.row(i), &params)?, adapter_apply(b.row(i), &params)?);
        same &= la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok((
        worst < NORM_TOL && same,
        format!("max rel |ℓ|² error {worst:.2e} over 3×10⁴ boxes; text change bit-identical: {same}"),
    ))
}

/// A page of 50 one-character words on a loose grid, so every word is a
/// single sub-word.
fn fifty_token_doc() -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let tokens = (0..50)
        .map(|i| {
            let (x, y) = (50.0 + 50.0 * (i % 10) as f64, 80.0 + 30.0 * (i / 10) as f64);
            let (x, y) = (x + rng.gen_range(-4.0..4.0), y + rng.gen_range(-2.0..2.0));
            Token {
                text: ((b'a' + rng.gen_range(0..26u8)) as char).to_string(),
                bbox: BBox::new(x, y, x + 6.0, y + 10.0),
            }
        })
        .collect();
    Document {
        tokens,
        page: BBox::new(0.0, 0.0, 612.0, 792.0),
        attrs: Default::default(),
    }
}

fn suppression() -> Outcome {
    let (doc, _) = normalize_page(&fifty_token_doc())?;
    let vocab = bpe_train(doc.tokens.iter().map(|t| t.text.as_str()), 300)?;
    let ae = autoencoder_init(4);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = (0.0f64, LayoutMode::None);
    for layout in [LayoutMode::None, LayoutMode::Winding, LayoutMode::Autoencoder, LayoutMode::Graph] {
        let cfg = EncoderConfig {
            n: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 64,
            vocab_size: vocab.len(),
            layout,
            adapter_sigma: 0.5,
            ..Default::default()
        };
        let mut params = init_params(&cfg, 5)?;
        // untrained positional table with real magnitude, so leakage would show
        let pos = params.id(POS_EMB).expect("positional table");
        for v in params.by_id_mut(pos).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let prepared = prepare_document(&doc, &vocab, &LayoutContext::new(layout, Some(&ae)))?;
        let seq = prepared.sequences(cfg.max_len)?.remove(0);
        if seq.len() != 50 {
            return Ok((false, format!("expected 50 positions, got {}", seq.len())));
        }
        let (h, _) = encoder_forward(&compose_inputs(&seq, &params, &cfg, 1.0)?, &params, &cfg)?;
        let mut perm: Vec<usize> = (0..50).collect();
        for _ in 0..100 {
            perm.shuffle(&mut rng);
            let (hp, _) = encoder_forward(&compose_inputs(&seq.permuted(&perm), &params, &cfg, 1.0)?, &params, &cfg)?;
            for (i, &src) in perm.iter().enumerate() {
                for (a, b) in hp.row(i).iter().zip(h.row(src)) {
                    let d = (a - b).abs() as f64;
                    if d > worst.0 {
                        worst = (d, layout);
                    }
                }
            }
        }
    }
    // q = 0, no layout: exactly S[id] + P[i]
    let cfg = EncoderConfig {
        n: 64,
        layers: 1,
        heads: 4,
        ffn: 64,
        max_len: 64,
        vocab_size: vocab.len(),
        layout: LayoutMode::None,
        ..Default::default()
    };
    let params = init_params(&cfg, 6)?;
    let seq = prepare_document(&doc, &vocab, &LayoutContext::new(LayoutMode::None, None))?
        .sequences(64)?
        .remove(0);
    let x = compose_inputs(&seq, &params, &cfg, 0.0)?;
    let (s, p) = (params.get(TOKEN_EMB).expect("token table"), params.get(POS_EMB).expect("positional table"));
    let exact = seq.ids.iter().enumerate().all(|(i, &id)| {
        x.row(i)
            .iter()
            .zip(s.row(id as usize).iter().zip(p.row(i)))
            .all(|(v, (a, b))| v.to_bits() == (a + b).to_bits())
    });
    Ok((
        worst.0 < EQUIVARIANCE_TOL && exact,
        format!(
            "q=1 max deviation {:.2e} (worst {}) over 4 modes × 100 permutations; q=0 composition bit-exact: {exact}",
            worst.0, worst.1
        ),
    ))
}

fn dropout_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = Tensor::new([8, 16], (0..128).map(|_| rng.gen_range(0.1f64..2.0) * if rng.gen() { 1.0 } else { -1.0 }).collect())?;
    let norm: f64 = p.data().iter().map(|v| v * v).sum();
    let mut lines = Vec::new();
    let mut ok = true;
    for q in [0.25, 0.5, 0.75] {
        let mut stats = Vec::with_capacity(DROPOUT_DRAWS);
        let mut survivors_exact = true;
        for _ in 0..DROPOUT_DRAWS {
            let d = positional_dropout(&p, q, DropoutVariant::Element, &mut rng);
            survivors_exact &= d.data().iter().zip(p.data()).all(|(&a, &b)| a == 0.0 || a.to_bits() == b.to_bits());
            stats.push(d.data().iter().map(|v| v * v).sum::<f64>() / norm);
        }
        let m = mean_sd(&stats)?;
        let sigma = m.sd / (DROPOUT_DRAWS as f64).sqrt();
        let z = (m.mean - (1.0 - q)).abs() / sigma;
        ok &= z <= DROPOUT_SIGMAS && survivors_exact;
        lines.push(format!("q={q}: mean {:.5} ({z:.2}σ){}", m.mean, if survivors_exact { "" } else { " survivors changed" }));
    }
    Ok((ok, lines.join("; ")))
}

fn gin_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    for _ in 0..200 {
        let v = rng.gen_range(1..=30);
        let edges: Vec<Vec<usize>> = (0..v)
            .map(|a| (0..rng.gen_range(0..v.min(6))).map(|_| rng.gen_range(0..v)).filter(|&b| b != a).collect())
            .collect();
        let graph = KnnGraph { edges };
        let cols = rng.gen_range(1..5);
        let f: Vec<f64> = (0..v * cols).map(|_| rng.gen_range(-20..20) as f64).collect();
        for eps in [GIN_EPS, 0.5, 2.0] {
            let got = gin_aggregate(&graph, &Tensor::new([v, cols], f.clone())?, eps)?;
            // dense (A + (1+ε)I) f
            let mut a = vec![0.0f64; v * v];
            for (x, ws) in graph.edges.iter().enumerate() {
                for &w in ws {
                    a[x * v + w] = 1.0;
                    a[w * v + x] = 1.0;
                }
            }
            for x in 0..v {
                a[x * v + x] += 1.0 + eps;
            }
            let want: Vec<f64> = (0..v)
                .flat_map(|r| {
                    let (a, f) = (&a, &f);
                    (0..cols).map(move |c| (0..v).map(|k| a[r * v + k] * f[k * cols + c]).sum::<f64>())
                })
                .collect();
            exact &= got.data() == want.as_slice();
        }
    }
    // equivariance of the full stack
    let cfg = GinConfig::default();
    let mut params = ParamSet::new();
    gin_init(&mut params, &cfg, 0.5, &mut rng);
    let params64: ParamSet<f64> = params.cast();
    let forward64 = |boxes: &[BBox]| -> Result<Tensor<f64>> {
        let mut g = Graph::with_params(&params64);
        let x = g.constant(box_features(boxes)?);
        let y = gin_forward_graph(&mut g, &build_knn_graph(boxes, KNN_K, KNN_P)?.neighbors(), x, &cfg, BnMode::Eval)?;
        Ok(g.value(y).clone())
    };
    let (mut scale, mut worst32) = (0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let boxes: Vec<BBox> = (0..rng.gen_range(2..30)).map(|_| random_box(&mut rng)).collect();
        let out = gin_forward(&build_knn_graph(&boxes, KNN_K, KNN_P)?, &boxes, &params, &cfg)?;
        let mut perm: Vec<usize> = (0..boxes.len()).collect();
        perm.shuffle(&mut rng);
        let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
        let pout = gin_forward(&build_knn_graph(&pb, KNN_K, KNN_P)?, &pb, &params, &cfg)?;
        let (out64, pout64) = (forward64(&boxes)?, forward64(&pb)?);
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in pout64.row(i).iter().zip(out64.row(src)) {
                worst = worst.max((a - b).abs());
                scale = scale.max(b.abs());
            }
            for (a, b) in pout.row(i).iter().zip(out.row(src)) {
                worst32 = worst32.max((a - b).abs() as f64);
            }
        }
    }
    // single precision: round-off relative to the output magnitude
    let rel32 = worst32 / scale.max(1.0);
    Ok((
        exact && worst < GIN_EQUIVARIANCE_TOL && rel32 < GIN_EQUIVARIANCE_TOL,
        format!(
            "aggregate exact on 200 graphs × 3 ε: {exact}; forward permutation deviation {worst:.2e} (f64), \
             {rel32:.2e} relative (f32, outputs up to {scale:.1e})"
        ),
    ))
}

fn knn_grid() -> Outcome {
    let side = 7;
    let boxes: Vec<BBox> = (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            // dyadic spacing keeps equal distances exactly equal
            BBox::new(c * 0.125, r * 0.125, c * 0.125 + 0.0625, r * 0.125 + 0.0625)
        })
        .collect();
    let graph = build_knn_graph(&boxes, KNN_K, KNN_P)?;
    let mut ok = true;
    let mut checked = 0;
    for r in 1..side - 1 {
        for c in 1..side - 1 {
            let v = r * side + c;
            // brute force over plain grid coordinates
            let mut d: Vec<(f64, usize)> = (0..boxes.len())
                .filter(|&w| w != v)
                .map(|w| {
                    let (wr, wc) = ((w / side) as f64, (w % side) as f64);
                    (lp_distance((c as f64, r as f64), (wc, wr), KNN_P), w)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let oracle: BTreeSet<usize> = d.iter().take(KNN_K).map(|x| x.1).collect();
            let got: BTreeSet<usize> = graph.edges[v].iter().copied().collect();
            let axis = got.iter().all(|&w| w / side == r || w % side == c);
            let adjacent = [v - 1, v + 1, v - side, v + side].iter().all(|w| got.contains(w));
            ok &= got == oracle && axis && adjacent;
            checked += 1;
        }
    }
    Ok((ok, format!("{checked} interior segments: 5 nearest are axis-aligned and match the brute-force oracle")))
}

fn autoencoder_fit() -> Outcome {
    let t = Instant::now();
    let docs = gen_documents(&GenSpec::default(), 40, 70, Exec::Parallel)?;
    let nb = NeighborhoodConfig::default();
    let mut maps: Vec<Bitmap> = Vec::new();
    for d in &docs {
        maps.extend(render_all(&normalize_page(d)?.0, &nb)?);
    }
    maps.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    maps.truncate(1000);
    if maps.len() < 1000 {
        return Ok((false, format!("only {} neighborhoods rendered", maps.len())));
    }
    let cfg = AeTrainConfig::default();
    let initial = autoencoder::autoencoder_loss(&maps, &autoencoder_init(cfg.seed), Exec::Parallel)?;
    let trained = pagelm::alt_layout::autoencoder_train(&maps, &cfg, Exec::Parallel)?;
    let fin = autoencoder::autoencoder_loss(&maps, &trained.params, Exec::Parallel)?;
    let input = maps[0].to_tensor::<f32>();
    let z = autoencoder_embed(&maps[0], &trained.params)?;
    let recon = autoencoder::autoencoder_reconstruct(&maps[0], &trained.params)?;
    let shapes = input.shape() == [1, BITMAP_SIZE, BITMAP_SIZE]
        && z.len() == LATENT_DIM
        && recon.shape() == [1, BITMAP_SIZE, BITMAP_SIZE];
    let elapsed = t.elapsed();
    Ok((
        fin < AE_RATIO * initial && shapes && elapsed < AE_BUDGET,
        format!(
            "BCE {initial:.4} -> {fin:.4} (ratio {:.3}); shapes {:?} -> {} -> {:?}",
            fin / initial,
            input.shape(),
            z.len(),
            recon.shape()
        ),
    ))
}

/// Desk-scale model used for the trend run.
fn trend_encoder(vocab_size: usize, layout: LayoutMode, q_schedule: QScheduleMode) -> EncoderConfig {
    EncoderConfig {
        n: 64,
        layers: 2,
        heads: 4,
        ffn: 128,
        max_len: 256,
        vocab_size,
        layout,
        q_schedule,
        ..Default::default()
    }
}

fn trend(shared: &mut Shared) -> Outcome {
    let t = Instant::now();
    let exec = Exec::Parallel;
    let spec = GenSpec {
        doc_type: DocType::KvTable,
        reading_order: ReadingOrder::ColumnMajor,
        ..Default::default()
    };
    let named = |docs: Vec<Document>, p: &str| -> Vec<(String, Document)> {
        docs.into_iter().enumerate().map(|(i, d)| (format!("{p}{i}"), d)).collect()
    };
    let train = named(gen_documents(&spec, 2000, 0, exec)?, "train");
    let dev = named(gen_documents(&spec, 100, 1_000_000, exec)?, "dev");
    let test = named(gen_documents(&spec, 200, 2_000_000, exec)?, "test");
    let vocab = train_vocab(&train, 600)?;
    let task = Task::financial();
    let keys = ["income", "spending"];
    let mut means = Vec::new();
    let mut lines = Vec::new();
    for (name, layout, sched) in [
        ("a", LayoutMode::None, QScheduleMode::None),
        ("b", LayoutMode::Winding, QScheduleMode::None),
        ("c", LayoutMode::Winding, QScheduleMode::LinearHalf),
    ] {
        let ctx = LayoutContext::new(layout, None);
        let tr = prepare_pages(&train, &vocab, &ctx, exec)?;
        let dv = prepare_pages(&dev, &vocab, &ctx, exec)?;
        let te = prepare_pages(&test, &vocab, &ctx, exec)?;
        let mut run = RunSpec {
            encoder: trend_encoder(vocab.len(), layout, sched),
            mlm: MlmConfig {
                steps: 1500,
                batch_size: 16,
                peak_lr: 1e-3,
                seed: 0,
                ..Default::default()
            },
            finetune: FinetuneConfig {
                max_epochs: 15,
                batch_size: 16,
                peak_lr: 1e-3,
                patience: 3,
                ..Default::default()
            },
        };
        let pre = pretrain(&tr, &run, exec)?;
        let mut f1s = Vec::new();
        for seed in 1..=3 {
            run.finetune.seed = seed;
            let ft = finetune(&pre, &tr, &dv, &run, &task, exec)?;
            let (_, report) = evaluate(&te, &ft.params, &run.encoder, ft.q, &task, exec)?;
            f1s.push(report.subset(&keys).f1);
            if name == "c" && shared.model_c.is_none() {
                shared.model_c = Some((ft.params, run.encoder.clone(), ft.q, te.clone()));
            }
        }
        let m = mean_sd(&f1s)?;
        lines.push(format!("({name}) {:.3}±{:.3}", m.mean, m.sd));
        means.push(m.mean);
    }
    let (a, b, c) = (means[0], means[1], means[2]);
    let elapsed = t.elapsed();
    Ok((
        c >= b && b >= a && c - a >= TREND_GAP && c >= TREND_FLOOR && elapsed < TREND_BUDGET,
        format!("income/spending F1 {}; {:.1} min", lines.join(" "), elapsed.as_secs_f64() / 60.0),
    ))
}

fn pipeline_exact() -> Outcome {
    let task = Task::financial();
    let mut docs = Vec::new();
    for (i, dt) in [DocType::KvTable, DocType::TwoColumnTable, DocType::PlainText, DocType::Form].into_iter().enumerate() {
        for ro in [ReadingOrder::RowMajor, ReadingOrder::ColumnMajor] {
            let spec = GenSpec {
                doc_type: dt,
                reading_order: ro,
                ..Default::default()
            };
            for (j, d) in gen_documents(&spec, 10, 900 + 10 * i as u64, Exec::Parallel)?.into_iter().enumerate() {
                docs.push((format!("{dt}-{ro}-{j}"), d));
            }
        }
    }
    // oracle tagger: one-hot scores from the auto-tagged labels
    let mut preds = pagelm::extraction::Keyed::new();
    for (id, d) in &docs {
        let labels = auto_tag(d, &task);
        let mut probs = vec![0.0f32; labels.len() * task.num_labels()];
        for (i, &l) in labels.iter().enumerate() {
            probs[i * task.num_labels() + l] = 1.0;
        }
        let probs = Tensor::new([labels.len(), task.num_labels()], probs)?;
        for (key, (value, _)) in extract_document(&d.texts(), &probs, &task)? {
            preds.insert((id.clone(), key), value);
        }
    }
    let report = f1_eval(&preds, &gold_values(docs.iter().map(|(i, d)| (i.as_str(), d)), &task));
    let entity = |text: &str, score: f64, start: usize| Entity {
        key: "income".into(),
        text: text.into(),
        normalized: Some(text.into()),
        score,
        span: start..start + 1,
    };
    let picked = aggregate_select(&[entity("1200.00", 0.6, 0), entity("900.00", 0.8, 5), entity("1200.00", 0.5, 9)]);
    let dup_ok = matches!(&picked, Some((v, s)) if v == "1200.00" && (s - 1.1).abs() < 1e-12);
    Ok((
        report.overall.f1 == 1.0 && dup_ok,
        format!(
            "oracle F1 {} over {} pages; aggregate picks {:?}",
            report.overall.f1,
            docs.len(),
            picked.map(|p| p.0)
        ),
    ))
}

fn io_err(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> pagelm::Error {
    pagelm::Error::Io {
        path: path.into(),
        source,
    }
}

fn dir_bytes(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if p.is_dir() {
            out.extend(dir_bytes(&p)?.into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((name, fs::read(&p).map_err(|e| io_err(&p, e))?));
        }
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| io_err("tempdir", e))?;
    let spec = GenSpec {
        reading_order: ReadingOrder::ColumnMajor,
        ..Default::default()
    };
    // corpus regeneration
    let (c1, c2) = (tmp.path().join("c1.jsonl"), tmp.path().join("c2.jsonl"));
    gen_corpus(&spec, 30, &c1, 11, Exec::Parallel)?;
    gen_corpus(&spec, 30, &c2, 11, Exec::Sequential)?;
    let read = |p: &std::path::Path| fs::read(p).map_err(|e| io_err(p, e));
    let corpus_same = read(&c1)? == read(&c2)?;

    // two identical training runs, one per execution mode
    let docs: Vec<(String, Document)> = gen_documents(&spec, 30, 11, Exec::Parallel)?
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("d{i}"), d))
        .collect();
    let vocab = train_vocab(&docs, 400)?;
    let task = Task::financial();
    let run = RunSpec {
        encoder: EncoderConfig {
            n: 32,
            layers: 1,
            heads: 2,
            ffn: 64,
            max_len: 128,
            vocab_size: vocab.len(),
            layout: LayoutMode::Graph,
            ..Default::default()
        },
        mlm: MlmConfig {
            steps: 12,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        },
        finetune: FinetuneConfig {
            max_epochs: 1,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        },
    };
    let mut saved = Vec::new();
    for (k, exec) in [Exec::Parallel, Exec::Sequential].into_iter().enumerate() {
        let pages = prepare_pages(&docs, &vocab, &LayoutContext::new(LayoutMode::Graph, None), exec)?;
        let pre = pretrain(&pages, &run, exec)?;
        let ft = finetune(&pre, &pages[..20], &pages[20..], &run, &task, exec)?;
        let bundle = ModelBundle {
            params: ft.params,
            encoder: run.encoder.clone(),
            vocab: vocab.clone(),
            q: ft.q,
            task: Some(task.clone()),
            autoencoder: None,
        };
        let dir = tmp.path().join(format!("run{k}"));
        bundle.save(&dir)?;
        saved.push((dir, bundle));
    }
    let runs_same = dir_bytes(&saved[0].0)? == dir_bytes(&saved[1].0)?;

    // save -> load -> save
    let loaded = ModelBundle::load(&saved[0].0)?;
    let again = tmp.path().join("again");
    loaded.save(&again)?;
    let params_same = loaded.params.len() == saved[0].1.params.len()
        && loaded.params.iter().zip(saved[0].1.params.iter()).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && (0..loaded.params.len()).all(|i| loaded.params.is_trainable(i) == saved[0].1.params.is_trainable(i));
    let round_trip = params_same && loaded == saved[0].1 && dir_bytes(&again)? == dir_bytes(&saved[0].0)?;
    let blob = checkpoint::load(&saved[0].0)?;
    let blob_same = blob.numel() == saved[0].1.params.numel();
    Ok((
        corpus_same && runs_same && round_trip && blob_same,
        format!("corpus regenerated identically: {corpus_same}; same-seed checkpoints identical: {runs_same}; save/load bit-exact: {round_trip}"),
    ))
}

fn attention_export(shared: &mut Shared) -> Outcome {
    let Some((params, cfg, q, pages)) = &shared.model_c else {
        return Ok((false, "needs the configuration (c) model from criterion 8".into()));
    };
    let page = &pages[0];
    let seq = page.prepared.sequences(cfg.max_len)?.remove(0);
    let (_, attention) = encoder_forward(&compose_inputs(&seq, params, cfg, *q)?, params, cfg)?;
    let tokens = page.prepared.enc.pieces[..seq.len()].to_vec();
    let records = attention_records(&attention, &page.id, &tokens, &seq.boxes, None, None, false)?;
    let averaged = attention_records(&attention, &page.id, &tokens, &seq.boxes, None, None, true)?;
    let worst = records.iter().chain(&averaged).map(|r| r.max_row_error()).fold(0.0, f64::max);
    let mut svg_ok = true;
    for r in records.iter().chain(&averaged) {
        let svg = render_svg(r, &page.doc.page, seq.len() / 2)?;
        svg_ok &= roxmltree::Document::parse(&svg)
            .map(|d| d.root_element().has_tag_name("svg") && d.descendants().filter(|n| n.has_tag_name("rect")).count() == seq.len() + 1)
            .unwrap_or(false);
    }
    Ok((
        worst < ROW_SUM_TOL && svg_ok,
        format!(
            "{} records on {} ({} positions): max row-sum error {worst:.2e}, SVG valid: {svg_ok}",
            records.len() + averaged.len(),
            page.id,
            seq.len()
        ),
    ))
}

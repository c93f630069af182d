//! k-NN segment graphs and the GIN stack that embeds them.

use rand::Rng;

use crate::doc_model::{segment_lines, BBox, Document};
use crate::error::{Error, Result};
use crate::numerics::graph::gin_apply;
use crate::numerics::nn::{init_linear, linear};
use crate::numerics::{BatchStats, Graph, ParamSet, Scalar, Tensor, Var};

pub const GIN_EPS: f64 = 0.0;
const BN_EPS: f64 = 1e-5;

/// `(|Δx|^p + |Δy|^p)^(1/p)`.
pub fn lp_distance(a: (f64, f64), b: (f64, f64), p: f64) -> f64 {
    ((a.0 - b.0).abs().powf(p) + (a.1 - b.1).abs().powf(p)).powf(1.0 / p)
}

/// Directed graph: `edges[v]` lists the K nearest neighbors of `v`, nearest
/// first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub edges: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Undirected neighbor lists: `w ∼ v` iff an edge joins them in either
    /// direction.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (v, ws) in self.edges.iter().enumerate() {
            for &w in ws {
                out[v].push(w);
                out[w].push(v);
            }
        }
        for ns in &mut out {
            ns.sort_unstable();
            ns.dedup();
        }
        out
    }
}

/// Upper-left corners with x rescaled by mean height / mean width so the
/// average box is square.
fn square_corners(boxes: &[BBox]) -> Vec<(f64, f64)> {
    let n = boxes.len().max(1) as f64;
    let mw = boxes.iter().map(BBox::width).sum::<f64>() / n;
    let mh = boxes.iter().map(BBox::height).sum::<f64>() / n;
    let sx = if mw > 0.0 && mh > 0.0 { mh / mw } else { 1.0 };
    boxes.iter().map(|b| (b.x1 * sx, b.y1)).collect()
}

/// Join every segment to its `k` nearest others under the ℓ^p distance
/// between upper-left corners; ties go to the lower index.
pub fn build_knn_graph(boxes: &[BBox], k: usize, p: f64) -> Result<KnnGraph> {
    if !(p > 0.0) {
        return Err(Error::contract(format!("lp exponent {p} must be positive")));
    }
    let pts = square_corners(boxes);
    let edges = (0..pts.len())
        .map(|v| {
            let mut others: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&w| w != v)
                .map(|w| (lp_distance(pts[v], pts[w], p), w))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, w)| w).collect()
        })
        .collect();
    Ok(KnnGraph { edges })
}

/// `(1+eps)·f(v) + Σ_{w∼v} f(w)` over the symmetrized graph.
pub fn gin_aggregate<T: Scalar>(graph: &KnnGraph, f: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (rows, cols) = f.as_matrix_dims();
    if rows != graph.len() {
        return Err(Error::contract(format!("{rows} feature rows for {} vertices", graph.len())));
    }
    Tensor::new(f.shape().to_vec(), gin_apply(f.data(), cols, &graph.neighbors(), eps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GinConfig {
    pub input: usize,
    pub hidden: usize,
    pub module_out: usize,
    pub output: usize,
    pub modules: usize,
    pub blocks: usize,
}

impl Default for GinConfig {
    fn default() -> Self {
        Self {
            input: 4,
            hidden: 64,
            module_out: 128,
            output: 128,
            modules: 2,
            blocks: 3,
        }
    }
}

impl GinConfig {
    fn block_dims(&self, m: usize, b: usize) -> (usize, usize) {
        let d_in = match (m, b) {
            (0, 0) => self.input,
            (_, 0) => self.module_out,
            _ => self.hidden,
        };
        let d_out = if b + 1 == self.blocks { self.module_out } else { self.hidden };
        (d_in, d_out)
    }
}

fn block_prefix(m: usize, b: usize) -> String {
    format!("gin.m{m}.b{b}")
}

/// He-initialized linears, unit/zero batch-norm affine, running statistics
/// at mean 0 and variance 1. `final_std` sets the output layer's init.
pub fn gin_init(params: &mut ParamSet, cfg: &GinConfig, final_std: f64, rng: &mut impl Rng) {
    for m in 0..cfg.modules {
        for b in 0..cfg.blocks {
            let pre = block_prefix(m, b);
            let (d_in, d_out) = cfg.block_dims(m, b);
            init_linear(params, &format!("{pre}.lin1"), d_in, cfg.hidden, (2.0 / d_in as f64).sqrt(), rng);
            init_linear(params, &format!("{pre}.lin2"), cfg.hidden, d_out, (2.0 / cfg.hidden as f64).sqrt(), rng);
            params.insert(format!("{pre}.bn.gamma"), Tensor::full([d_out], 1.0));
            params.insert(format!("{pre}.bn.beta"), Tensor::zeros([d_out]));
            params.insert_frozen(format!("{pre}.bn.running_mean"), Tensor::zeros([d_out]));
            params.insert_frozen(format!("{pre}.bn.running_var"), Tensor::full([d_out], 1.0));
        }
    }
    init_linear(params, "gin.out", cfg.module_out, cfg.output, final_std, rng);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current graph's statistics and record them.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// GIN stack over `features` (`|V| × 4`) with symmetric neighbor lists.
pub fn gin_forward_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    nbrs: &[Vec<usize>],
    features: Var,
    cfg: &GinConfig,
    mode: BnMode,
) -> Result<Var> {
    let mut h = features;
    for m in 0..cfg.modules {
        for b in 0..cfg.blocks {
            let pre = block_prefix(m, b);
            h = g.gin_aggregate(h, nbrs, T::of(GIN_EPS))?;
            h = linear(g, h, &format!("{pre}.lin1"))?;
            h = g.relu(h);
            h = linear(g, h, &format!("{pre}.lin2"))?;
            h = g.relu(h);
            let gamma = g.param(&format!("{pre}.bn.gamma"))?;
            let beta = g.param(&format!("{pre}.bn.beta"))?;
            h = match mode {
                BnMode::Train => g.batch_norm(h, gamma, beta, T::of(BN_EPS), &format!("{pre}.bn"))?,
                BnMode::Eval => {
                    let mean = g.param(&format!("{pre}.bn.running_mean"))?;
                    let var = g.param(&format!("{pre}.bn.running_var"))?;
                    let stats = BatchStats {
                        mean: g.value(mean).data().to_vec(),
                        var: g.value(var).data().to_vec(),
                    };
                    g.batch_norm_frozen(h, gamma, beta, &stats, T::of(BN_EPS))?
                }
            };
        }
    }
    linear(g, h, "gin.out")
}

/// Inference-mode per-vertex embeddings, `|V| × output`.
pub fn gin_forward(graph: &KnnGraph, boxes: &[BBox], params: &ParamSet, cfg: &GinConfig) -> Result<Tensor> {
    if boxes.len() != graph.len() {
        return Err(Error::contract(format!("{} boxes for {} vertices", boxes.len(), graph.len())));
    }
    let mut g = Graph::with_params(params);
    let x = g.constant(box_features(boxes)?);
    let y = gin_forward_graph(&mut g, &graph.neighbors(), x, cfg, BnMode::Eval)?;
    Ok(g.value(y).clone())
}

pub fn box_features<T: Scalar>(boxes: &[BBox]) -> Result<Tensor<T>> {
    let data = boxes.iter().flat_map(|b| b.to_array()).map(T::of).collect();
    Tensor::new([boxes.len(), 4], data)
}

/// `running ← momentum·running + (1−momentum)·batch`, averaging the batch
/// statistics recorded under each tag.
pub fn update_running_stats(params: &mut ParamSet, stats: &[(String, BatchStats<f32>)], momentum: f32) -> Result<()> {
    let mut by_tag: std::collections::BTreeMap<&str, (Vec<f32>, Vec<f32>, usize)> = Default::default();
    for (tag, s) in stats {
        let e = by_tag
            .entry(tag.as_str())
            .or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()], 0));
        e.0.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
        e.1.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b);
        e.2 += 1;
    }
    for (tag, (mean, var, n)) in by_tag {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let id = params
                .id(&format!("{tag}.{suffix}"))
                .ok_or_else(|| Error::contract(format!("no running statistics for {tag}")))?;
            let run = params.by_id_mut(id).data_mut();
            for (r, b) in run.iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b / n as f32;
            }
        }
    }
    Ok(())
}

/// Segment boxes and the segment index of every token.
pub fn token_segments(doc: &Document) -> (Vec<BBox>, Vec<usize>) {
    let segs = segment_lines(doc);
    let mut of_token = vec![0; doc.tokens.len()];
    for (s, seg) in segs.iter().enumerate() {
        for &t in &seg.tokens {
            of_token[t] = s;
        }
    }
    (segs.into_iter().map(|s| s.bbox).collect(), of_token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt_box(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 0.1, y + 0.1)
    }

    #[test]
    fn lp_examples() {
        assert!((lp_distance((0.0, 0.0), (1.0, 4.0), 0.5) - 9.0).abs() < 1e-12);
        assert!((lp_distance((0.0, 0.0), (2.0, 2.0), 0.5) - 8.0).abs() < 1e-12);
        assert!((lp_distance((0.0, 0.0), (5.0, 0.0), 0.5) - 5.0).abs() < 1e-12);
        assert!((lp_distance((0.0, 0.0), (3.0, 4.0), 2.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_k1() {
        let boxes = [pt_box(0.0, 0.0), pt_box(1.0, 0.0), pt_box(2.0, 0.0)];
        let g = build_knn_graph(&boxes, 1, 0.5).unwrap();
        assert_eq!(g.edges, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn degree_and_completeness() {
        let boxes: Vec<BBox> = (0..6).map(|i| pt_box(i as f64 * 0.3, (i % 2) as f64)).collect();
        let g = build_knn_graph(&boxes, 10, 0.5).unwrap();
        for (v, es) in g.edges.iter().enumerate() {
            assert_eq!(es.len(), 5);
            assert!(!es.contains(&v));
        }
        let g = build_knn_graph(&boxes[..1], 5, 0.5).unwrap();
        assert_eq!(g.edges, vec![Vec::<usize>::new()]);
        assert!(build_knn_graph(&boxes, 2, 0.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let tri = KnnGraph {
            edges: vec![vec![1, 2], vec![0, 2], vec![0, 1]],
        };
        let f = Tensor::new([3, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(gin_aggregate(&tri, &f, 0.0).unwrap().data(), &[6.0, 6.0, 6.0]);
        let path = KnnGraph {
            edges: vec![vec![1], vec![2], vec![]],
        };
        assert_eq!(gin_aggregate(&path, &f, 0.0).unwrap().data(), &[3.0, 6.0, 5.0]);
        let iso = KnnGraph { edges: vec![vec![]] };
        let f = Tensor::new([1, 1], vec![5.0f64]).unwrap();
        assert_eq!(gin_aggregate(&iso, &f, 1.0).unwrap().data(), &[10.0]);
    }

    #[test]
    fn forward_shape_and_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GinConfig::default();
        let mut p = ParamSet::new();
        gin_init(&mut p, &cfg, 0.0, &mut rng);
        let boxes: Vec<BBox> = (0..7).map(|i| pt_box(0.1 * i as f64, 0.05 * (i % 3) as f64)).collect();
        let g = build_knn_graph(&boxes, 5, 0.5).unwrap();
        let out = gin_forward(&g, &boxes, &p, &cfg).unwrap();
        assert_eq!(out.shape(), &[7, 128]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GinConfig::default();
        let mut p = ParamSet::new();
        gin_init(&mut p, &cfg, 0.02, &mut rng);
        let stats = vec![(
            "gin.m0.b0.bn".to_string(),
            BatchStats {
                mean: vec![1.0; 64],
                var: vec![3.0; 64],
            },
        )];
        update_running_stats(&mut p, &stats, 0.9).unwrap();
        assert!((p.get("gin.m0.b0.bn.running_mean").unwrap().data()[0] - 0.1).abs() < 1e-7);
        assert!((p.get("gin.m0.b0.bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-6);
        let bad = vec![("nope".to_string(), stats[0].1.clone())];
        assert!(update_running_stats(&mut p, &bad, 0.9).is_err());
    }

    #[test]
    fn segments_cover_tokens() {
        let doc = Document {
            tokens: ["a", "b", "c"]
                .iter()
                .zip([pt_box(0.0, 0.0), pt_box(0.2, 0.0), pt_box(0.0, 0.5)])
                .map(|(t, b)| crate::doc_model::Token {
                    text: t.to_string(),
                    bbox: b,
                })
                .collect(),
            page: BBox::new(0.0, 0.0, 1.0, 1.0),
            attrs: Default::default(),
        };
        let (boxes, of) = token_segments(&doc);
        assert_eq!(boxes.len(), 2);
        assert_eq!(of, vec![0, 0, 1]);
    }
}

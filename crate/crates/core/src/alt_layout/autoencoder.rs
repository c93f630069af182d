//! Neighborhood bitmaps and the convolutional autoencoder that compresses
//! them into 64-dimensional layout embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::doc_model::Document;
use crate::error::{Error, Result};
use crate::numerics::{mean_grads, AdamWConfig, Graph, OptimState, ParamSet, Scalar, Tensor, Var};
use crate::parallel::Exec;

pub const BITMAP_SIZE: usize = 64;
pub const LATENT_DIM: usize = 64;
const CHANNELS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
const LAYERS: usize = CHANNELS.len() - 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborhoodConfig {
    /// Side of the neighborhood in line heights.
    pub n_mult: f64,
    pub size: usize,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            n_mult: 22.0,
            size: BITMAP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    size: usize,
    pixels: Vec<u8>,
}

impl Bitmap {
    pub fn new(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size || pixels.iter().any(|&p| p > 1) {
            return Err(Error::contract("bitmap must be square and binary"));
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.size + col]
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&p| T::of(p as f64)).collect();
        Tensor::new([1, self.size, self.size], data).expect("square bitmap")
    }
}

/// Rasterize the `N·h` square around token `idx`: a pixel is set iff its
/// center lies inside some token box.
pub fn render_neighborhood(doc: &Document, idx: usize, cfg: &NeighborhoodConfig) -> Result<Bitmap> {
    let h = line_height(doc)?;
    if idx >= doc.tokens.len() {
        return Err(Error::contract(format!("token {idx} out of range")));
    }
    Ok(render_with(doc, idx, cfg, h))
}

/// One bitmap per token.
pub fn render_all(doc: &Document, cfg: &NeighborhoodConfig) -> Result<Vec<Bitmap>> {
    let h = line_height(doc)?;
    Ok((0..doc.tokens.len()).map(|i| render_with(doc, i, cfg, h)).collect())
}

fn line_height(doc: &Document) -> Result<f64> {
    let h = doc.mean_line_height();
    if !(h > 0.0) {
        return Err(Error::contract("document has zero mean line height"));
    }
    Ok(h)
}

fn render_with(doc: &Document, idx: usize, cfg: &NeighborhoodConfig, h: f64) -> Bitmap {
    let n = cfg.size;
    let side = cfg.n_mult * h;
    let px = side / n as f64;
    let (cx, cy) = doc.tokens[idx].bbox.center();
    let (left, top) = (cx - side / 2.0, cy - side / 2.0);
    let span = |lo: f64, hi: f64, origin: f64| -> Option<(usize, usize)> {
        let a = ((lo - origin) / px - 0.5).ceil().max(0.0);
        let b = ((hi - origin) / px - 0.5).floor().min((n - 1) as f64);
        (a <= b).then_some((a as usize, b as usize))
    };
    let mut pixels = vec![0u8; n * n];
    for tok in &doc.tokens {
        let b = &tok.bbox;
        let (Some((c0, c1)), Some((r0, r1))) = (span(b.x1, b.x2, left), span(b.y1, b.y2, top)) else {
            continue;
        };
        for r in r0..=r1 {
            pixels[r * n + c0..=r * n + c1].fill(1);
        }
    }
    Bitmap { size: n, pixels }
}

/// Encoder `ae.enc{i}` convolutions and decoder `ae.dec{i}` transposed
/// convolutions, He-initialized with zero biases.
pub fn autoencoder_init(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for i in 0..LAYERS {
        let (ci, co) = (CHANNELS[i], CHANNELS[i + 1]);
        p.insert_normal(format!("ae.enc{i}.weight"), &[co, ci, 3, 3], (2.0 / (ci * 9) as f64).sqrt(), &mut rng);
        p.insert(format!("ae.enc{i}.bias"), Tensor::zeros([co]));
    }
    for i in 0..LAYERS {
        let (ci, co) = (CHANNELS[LAYERS - i], CHANNELS[LAYERS - i - 1]);
        p.insert_normal(format!("ae.dec{i}.weight"), &[ci, co, 3, 3], (8.0 / (ci * 9) as f64).sqrt(), &mut rng);
        p.insert(format!("ae.dec{i}.bias"), Tensor::zeros([co]));
    }
    p
}

/// `1×64×64 → 64×1×1`, ReLU between layers, linear latent.
pub fn encode<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..LAYERS {
        let w = g.param(&format!("ae.enc{i}.weight"))?;
        let b = g.param(&format!("ae.enc{i}.bias"))?;
        h = g.conv2d(h, w, 2)?;
        h = g.add_channel_bias(h, b)?;
        if i + 1 < LAYERS {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// `64×1×1 → 1×64×64` logits.
pub fn decode<T: Scalar>(g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
    let mut h = z;
    for i in 0..LAYERS {
        let w = g.param(&format!("ae.dec{i}.weight"))?;
        let b = g.param(&format!("ae.dec{i}.bias"))?;
        h = g.conv2d_transpose(h, w, 2)?;
        h = g.add_channel_bias(h, b)?;
        if i + 1 < LAYERS {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn check_shape(b: &Bitmap) -> Result<()> {
    if b.size != BITMAP_SIZE {
        return Err(Error::contract(format!(
            "autoencoder expects {BITMAP_SIZE}x{BITMAP_SIZE}, got {0}x{0}",
            b.size
        )));
    }
    Ok(())
}

pub fn autoencoder_embed(bitmap: &Bitmap, params: &ParamSet) -> Result<Vec<f32>> {
    check_shape(bitmap)?;
    let mut g = Graph::with_params(params);
    let x = g.constant(bitmap.to_tensor());
    let z = encode(&mut g, x)?;
    Ok(g.value(z).data().to_vec())
}

/// Decoder output probabilities for a bitmap.
pub fn autoencoder_reconstruct(bitmap: &Bitmap, params: &ParamSet) -> Result<Tensor> {
    check_shape(bitmap)?;
    let mut g = Graph::with_params(params);
    let x = g.constant(bitmap.to_tensor());
    let z = encode(&mut g, x)?;
    let y = decode(&mut g, z)?;
    let p = g.sigmoid(y);
    Ok(g.value(p).clone())
}

fn bce_and_grads(bitmap: &Bitmap, params: &ParamSet) -> Result<(f64, Vec<(usize, Vec<f32>)>)> {
    let mut g = Graph::with_params(params);
    let x = g.constant(bitmap.to_tensor());
    let z = encode(&mut g, x)?;
    let y = decode(&mut g, z)?;
    let targets: Vec<f32> = bitmap.pixels.iter().map(|&p| p as f32).collect();
    let loss = g.bce_with_logits(y, &targets)?;
    let value = g.value(loss).data()[0] as f64;
    Ok((value, g.backward(loss)?.into_param_grads()))
}

/// Mean per-pixel reconstruction BCE over `bitmaps`.
pub fn autoencoder_loss(bitmaps: &[Bitmap], params: &ParamSet, exec: Exec) -> Result<f64> {
    let losses = exec.map(bitmaps, |b| -> Result<f64> {
        check_shape(b)?;
        let mut g = Graph::with_params(params);
        let x = g.constant(b.to_tensor());
        let z = encode(&mut g, x)?;
        let y = decode(&mut g, z)?;
        let targets: Vec<f32> = b.pixels.iter().map(|&p| p as f32).collect();
        let loss = g.bce_with_logits(y, &targets)?;
        Ok(g.value(loss).data()[0] as f64)
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AeTrained {
    pub params: ParamSet,
    pub epoch_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
}

/// Minimize reconstruction BCE with AdamW at a constant learning rate.
pub fn autoencoder_train(bitmaps: &[Bitmap], cfg: &AeTrainConfig, exec: Exec) -> Result<AeTrained> {
    if bitmaps.is_empty() {
        return Err(Error::contract("autoencoder training needs at least one bitmap"));
    }
    bitmaps.iter().try_for_each(check_shape)?;
    let mut params = autoencoder_init(cfg.seed);
    let mut opt = OptimState::new(&params, AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..bitmaps.len()).collect();
    let (mut epoch_loss, mut step_loss) = (Vec::new(), Vec::new());
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let results = exec.map(batch, |&i| bce_and_grads(&bitmaps[i], &params));
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            let loss = results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
            let grads = mean_grads(results.into_iter().map(|r| r.1).collect());
            opt.step(&mut params, &grads, cfg.lr)?;
            step_loss.push(loss);
            total += loss * batch.len() as f64;
        }
        epoch_loss.push(total / bitmaps.len() as f64);
    }
    Ok(AeTrained {
        params,
        epoch_loss,
        step_loss,
    })
}

/// Per-token autoencoder embeddings, `tokens × 64`.
pub fn embed_document(doc: &Document, params: &ParamSet, cfg: &NeighborhoodConfig) -> Result<Tensor> {
    let maps = render_all(doc, cfg)?;
    let mut data = Vec::with_capacity(maps.len() * LATENT_DIM);
    for m in &maps {
        data.extend(autoencoder_embed(m, params)?);
    }
    Tensor::new([maps.len(), LATENT_DIM], data)
}

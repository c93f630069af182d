//! Winding-function layout embeddings and the adapter that maps them into
//! the input embedding space.

use rand::Rng;

use crate::doc_model::BBox;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};

pub const THETA_MIN: f64 = 0.25;
pub const THETA_MAX: f64 = 500.0;
pub const SEQUENTIAL_M: f64 = 10_000.0;
pub const ADAPTER_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct WindingConfig {
    pub n: usize,
    pub theta: Vec<f64>,
}

impl WindingConfig {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Self { n, theta: make_theta(n)? })
    }
}

/// Geometric progression from 0.25 to 500 of length `n / 8`.
pub fn make_theta(n: usize) -> Result<Vec<f64>> {
    if n < 8 || n % 8 != 0 {
        return Err(Error::contract(format!("embedding dim {n} is not a positive multiple of 8")));
    }
    Ok(geometric(THETA_MIN, THETA_MAX, n / 8))
}

fn geometric(lo: f64, hi: f64, len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![lo];
    }
    let ratio = hi / lo;
    (0..len)
        .map(|r| {
            if r + 1 == len {
                hi
            } else {
                lo * ratio.powf(r as f64 / (len - 1) as f64)
            }
        })
        .collect()
}

/// `out[2r] = cos(theta[r] t)`, `out[2r + 1] = sin(theta[r] t)`.
pub fn winding<T: Scalar>(t: T, theta: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(theta.len() * 2);
    winding_into(t, theta, &mut out);
    out
}

fn winding_into<T: Scalar>(t: T, theta: &[T], out: &mut Vec<T>) {
    for &th in theta {
        let (s, c) = (th * t).sin_cos();
        out.push(c);
        out.push(s);
    }
}

/// `[F(x1) | F(y1) | F(x2) | F(y2)]`, computed in double precision.
pub fn layout_embedding(b: &BBox, cfg: &WindingConfig) -> Vec<f32> {
    let mut out = Vec::with_capacity(cfg.n);
    for t in b.to_array() {
        winding_into(t, &cfg.theta, &mut out);
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Row-stacked layout embeddings for a box sequence, shape `len × n`.
pub fn layout_matrix(boxes: &[BBox], cfg: &WindingConfig) -> Result<Tensor> {
    let data: Vec<f32> = boxes.iter().flat_map(|b| layout_embedding(b, cfg)).collect();
    Tensor::new([boxes.len(), cfg.n], data)
}

/// Fixed sinusoidal position table, `len × n`, with wavelengths growing
/// geometrically from 2π to 2πM.
pub fn sinusoidal_positions(len: usize, n: usize, m: f64) -> Result<Tensor> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::contract(format!("sinusoidal dim {n} must be even")));
    }
    let theta: Vec<f64> = geometric(1.0, m, n / 2).into_iter().map(|w| 1.0 / w).collect();
    let data: Vec<f32> = (0..len)
        .flat_map(|i| winding(i as f64, &theta))
        .map(|v| v as f32)
        .collect();
    Tensor::new([len, n], data)
}

pub const ADAPTER_WEIGHT: &str = "adapter.weight";
pub const ADAPTER_BIAS: &str = "adapter.bias";

/// Register `adapter.weight` (`n × k`, N(0, sigma²)) and a zero
/// `adapter.bias` of length `n`.
pub fn adapter_init(params: &mut ParamSet, n: usize, k: usize, sigma: f64, rng: &mut impl Rng) {
    crate::numerics::nn::init_linear(params, "adapter", k, n, sigma, rng);
}

/// `weight · l + bias` for a single layout vector.
pub fn adapter_apply(l: &[f32], params: &ParamSet) -> Result<Vec<f32>> {
    let w = params.get(ADAPTER_WEIGHT)?;
    let b = params.get(ADAPTER_BIAS)?;
    let (n, k) = (w.shape()[0], w.shape()[1]);
    if l.len() != k {
        return Err(Error::contract(format!("adapter expects length {k}, got {}", l.len())));
    }
    Ok((0..n)
        .map(|i| {
            let row = &w.data()[i * k..(i + 1) * k];
            row.iter().zip(l).map(|(a, b)| a * b).sum::<f32>() + b.data()[i]
        })
        .collect())
}

/// Differentiable adapter over a `len × k` layout matrix.
pub fn adapter_graph<T: Scalar>(g: &mut Graph<'_, T>, layout: Var) -> Result<Var> {
    crate::numerics::nn::linear(g, layout, "adapter")
}

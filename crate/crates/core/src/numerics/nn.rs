//! Named-parameter building blocks shared by the models.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Register `{prefix}.weight` (`out × in`, N(0, std²)) and a zero
/// `{prefix}.bias`.
pub fn init_linear(params: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) {
    params.insert_normal(format!("{prefix}.weight"), &[d_out, d_in], std, rng);
    params.insert(format!("{prefix}.bias"), Tensor::zeros([d_out]));
}

/// `x · Wᵀ + b` over the rows of `x`.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let y = g.matmul_t(x, w, false, true)?;
    g.add_bias(y, b)
}

/// Unit gain, zero shift.
pub fn init_norm(params: &mut ParamSet, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full([d], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros([d]));
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, T::of(1e-5))
}

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(params: &ParamSet<f32>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            (0..params.len())
                .map(|i| vec![0.0; params.by_id(i).numel()])
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One AdamW update. `grads` pairs parameter ids with flat gradients;
    /// parameters without a gradient still receive weight decay. A
    /// non-finite gradient rejects the whole step and leaves everything
    /// untouched.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[(usize, Vec<f32>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.len() != params.by_id(*id).numel() {
                return Err(Error::Shape {
                    lhs: params.by_id(*id).shape().to_vec(),
                    rhs: vec![g.len()],
                    context: "adamw gradient",
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(params.name(*id).to_string()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = (1.0 - lr * weight_decay) as f32;

        let mut grad_of: Vec<Option<&[f32]>> = vec![None; params.len()];
        for (id, g) in grads {
            grad_of[*id] = Some(g);
        }
        for (id, grad) in grad_of.into_iter().enumerate() {
            if !params.is_trainable(id) {
                continue;
            }
            let p = params.by_id_mut(id).data_mut();
            if decay != 1.0 {
                p.iter_mut().for_each(|x| *x *= decay);
            }
            let Some(g) = grad else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p[i] -= update as f32;
            }
        }
        Ok(())
    }
}

/// Element-wise mean of per-example gradients.
pub fn mean_grads(per_example: Vec<Vec<(usize, Vec<f32>)>>) -> Vec<(usize, Vec<f32>)> {
    let n = per_example.len().max(1) as f32;
    sum_grads_scaled(per_example, 1.0 / n)
}

/// `scale · Σ` of per-example gradients, accumulated in input order so the
/// result does not depend on how the examples were scheduled.
pub fn sum_grads_scaled(per_example: Vec<Vec<(usize, Vec<f32>)>>, scale: f32) -> Vec<(usize, Vec<f32>)> {
    let mut acc: std::collections::BTreeMap<usize, Vec<f32>> = std::collections::BTreeMap::new();
    for grads in per_example {
        for (id, g) in grads {
            match acc.get_mut(&id) {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    acc.insert(id, g);
                }
            }
        }
    }
    acc.into_iter()
        .map(|(id, mut g)| {
            g.iter_mut().for_each(|v| *v *= scale);
            (id, g)
        })
        .collect()
}

/// Linear warmup over the first `warmup_frac` of training, then linear decay
/// to zero at `total`.
pub fn lr_schedule_with(step: u64, total: u64, peak: f64, warmup_frac: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("lr schedule needs total > 0"));
    }
    if step > total {
        return Err(Error::contract(format!("step {step} beyond total {total}")));
    }
    let warmup = (warmup_frac * total as f64).ceil() as u64;
    let lr = if step < warmup {
        peak * step as f64 / warmup as f64
    } else if warmup == total {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    };
    Ok(lr)
}

/// Schedule with a 10% warmup.
pub fn lr_schedule(step: u64, total: u64, peak: f64) -> Result<f64> {
    lr_schedule_with(step, total, peak, 0.1)
}

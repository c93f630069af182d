//! Suppression schedule, unnormalized positional dropout, MLM masking, and
//! seed derivation for per-example randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DropoutVariant, QScheduleMode};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::{MASK, NUM_SPECIALS};

pub const MLM_SELECT: f64 = 0.15;
pub const MLM_MASK_SHARE: f64 = 0.8;
pub const MLM_RANDOM_SHARE: f64 = 0.1;

/// `min(1, 2·step/total)` for `linear_half`; 0 for `none`.
pub fn q_schedule(step: u64, total: u64, mode: QScheduleMode) -> Result<f64> {
    if total == 0 {
        return Err(Error::contract("q schedule needs total > 0"));
    }
    if step > total {
        return Err(Error::contract(format!("step {step} beyond total {total}")));
    }
    Ok(match mode {
        QScheduleMode::None => 0.0,
        QScheduleMode::LinearHalf => (2.0 * step as f64 / total as f64).min(1.0),
    })
}

/// Final value of the schedule, used for fine-tuning and inference.
pub fn final_q(mode: QScheduleMode) -> f64 {
    match mode {
        QScheduleMode::None => 0.0,
        QScheduleMode::LinearHalf => 1.0,
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, parts...)`, so results do not depend on
/// which worker handles an example.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Keep-mask for a `len × n` positional block. `token` drops whole rows,
/// `dimension` draws one column mask shared by all rows, `element` draws
/// every entry independently.
pub fn keep_mask(len: usize, n: usize, q: f64, variant: DropoutVariant, rng: &mut impl Rng) -> Vec<bool> {
    if q <= 0.0 {
        return vec![true; len * n];
    }
    if q >= 1.0 {
        return vec![false; len * n];
    }
    let mut keep = || rng.gen::<f64>() >= q;
    match variant {
        DropoutVariant::Element => (0..len * n).map(|_| keep()).collect(),
        DropoutVariant::Token => (0..len).flat_map(|_| std::iter::repeat(keep()).take(n)).collect(),
        DropoutVariant::Dimension => {
            let cols: Vec<bool> = (0..n).map(|_| keep()).collect();
            (0..len).flat_map(|_| cols.iter().copied()).collect()
        }
    }
}

/// Zero dropped entries without rescaling the survivors.
pub fn positional_dropout<T: Scalar>(p: &Tensor<T>, q: f64, variant: DropoutVariant, rng: &mut impl Rng) -> Tensor<T> {
    if !(q > 0.0) {
        return p.clone();
    }
    let (len, n) = p.as_matrix_dims();
    let mask = keep_mask(len, n, q, variant, rng);
    let data = p
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &k)| if k { v } else { T::zero() })
        .collect();
    Tensor::new(p.shape().to_vec(), data).expect("same shape")
}

/// BERT-style corruption: each position is selected with probability 0.15;
/// selected positions become `MASK` (80%), a random non-special id (10%),
/// or stay unchanged (10%). Labels hold the original id at selected
/// positions.
pub fn mlm_mask(ids: &[u32], vocab_size: usize, rng: &mut impl Rng) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut out = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if rng.gen::<f64>() >= MLM_SELECT {
            continue;
        }
        labels[i] = Some(id as usize);
        let r = rng.gen::<f64>();
        if r < MLM_MASK_SHARE {
            out[i] = MASK;
        } else if r < MLM_MASK_SHARE + MLM_RANDOM_SHARE {
            out[i] = rng.gen_range(NUM_SPECIALS..vocab_size as u32);
        }
    }
    (out, labels)
}

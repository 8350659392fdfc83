//! Seeded randomness. ChaCha8 streams are identical across platforms, which
//! keeps every init, data sample and training run bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic sub-stream seed: mixes a base seed with two tags (layer
/// index, task index, ...) through a splitmix64 finalizer so distinct tags
/// give independent-looking streams.
pub fn derive_seed(base: u64, tag_a: u64, tag_b: u64) -> u64 {
    let mut z = base
        ^ tag_a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ tag_b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gaussian-filled tensor with the given mean and standard deviation.
pub fn randn_tensor<T: Scalar>(
    shape: &[usize],
    mean: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let normal = rand_distr::Normal::new(mean, std)
        .map_err(|e| Error::invalid("randn_tensor", format!("bad normal parameters: {e}")))?;
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::fr(rng.sample(normal))).collect();
    Tensor::new(shape, data)
}

/// Uniformly-filled tensor on [lo, hi).
pub fn uniform_tensor<T: Scalar>(
    shape: &[usize],
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::fr(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, data)
}

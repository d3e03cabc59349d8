//! Deterministic randomness helpers.
//!
//! Every stochastic choice in the crate (parameter init, mask sampling,
//! shuffling, synthetic graphs) flows through a seeded [`ChaCha8Rng`] so
//! runs reproduce bit-exactly across platforms. The generator state can be
//! captured and restored, which is what makes checkpoint resume exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// The crate-wide RNG. A concrete type (rather than `impl Rng`) so its
/// position can be serialized into checkpoints.
pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Captured generator state: seed words plus stream position.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

pub fn capture(rng: &Prng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(state: &RngState) -> Prng {
    let mut rng = Prng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}

/// Standard normal via Box-Muller, so we stay independent of distribution
/// crates and get identical streams for every `Scalar` width.
pub fn standard_normal<F: Scalar>(rng: &mut Prng) -> F {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        return F::from_f64(z);
    }
}

/// Normal(0, sigma) truncated to ±2 sigma by resampling.
pub fn trunc_normal<F: Scalar>(rng: &mut Prng, sigma: f64) -> F {
    loop {
        let z: f64 = standard_normal::<f64>(rng);
        if z.abs() <= 2.0 {
            return F::from_f64(z * sigma);
        }
    }
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Prng, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Uniform sample of `k` distinct values from `0..n`, returned sorted.
/// Partial Fisher-Yates: the first `k` entries of a shuffle are a uniform
/// k-subset.
pub fn sample_indices(rng: &mut Prng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

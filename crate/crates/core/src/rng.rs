//! Named, reproducible random streams.
//!
//! Every stochastic step in the crate (world generation, splits, bootstrap
//! resampling, weight init) draws from xoshiro256** seeded through
//! splitmix64, keyed by a tuple of integers so any single stream can be
//! regenerated on its own.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type Prng = Xoshiro256StarStar;

/// splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single seed.
pub fn stream_seed(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x5341_524c_4300_0000, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// xoshiro256** whose state is filled by splitmix64 from `seed`.
pub fn prng(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

pub fn keyed_prng(key: &[u64]) -> Prng {
    prng(stream_seed(key))
}

/// Unbiased integer in `0..n` (Lemire's multiply-shift with rejection).
pub fn uniform_below<R: RngCore + ?Sized>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0, "uniform_below: empty range");
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = (rng.next_u64() as u128) * (n as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Uniform float in `[0, 1)` from the top 53 bits.
pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher–Yates permutation of `0..n`, iterating from the back.
pub fn permutation<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_below(rng, i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

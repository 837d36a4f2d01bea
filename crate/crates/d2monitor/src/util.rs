//! Small shared helpers: seed derivation and the step-major matrix.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent child seed from a base seed, a stream tag, and an
/// index. Uses splitmix64 so nearby (tag, index) pairs decorrelate.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags for [`derive_seed`]; keeping them in one place avoids
/// accidental stream collisions between subsystems.
pub mod tag {
    pub const SYNTH_BASIS: u64 = 1;
    pub const SYNTH_SAMPLE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const FOLD: u64 = 7;
    pub const GRID: u64 = 8;
    pub const OOF: u64 = 9;
    pub const BASE_PROBE: u64 = 10;
    pub const EXPERT: u64 = 11;
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y += a * x
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

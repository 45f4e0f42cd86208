//! Seeded random streams. Every consumer draws from its own ChaCha stream so
//! that, for example, the perturbation draws of one mode cannot shift the
//! batch order of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

/// Stream identifiers.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const EXPLAINER_INIT: u64 = 2;
    pub const AUDIENCE_INIT: u64 = 3;
    pub const ARCH_INIT: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const PERTURBATION: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const BASELINE: u64 = 8;
    pub const SPLIT: u64 = 9;
}

pub fn seeded(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The `index`-th independent sibling of a stream, for consumers that need
/// several parallel draws from one role.
pub fn substream(seed: u64, stream: u64, index: u32) -> StreamRng {
    seeded(seed, stream | (u64::from(index) << 32))
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| if lo == hi { lo } else { rng.random_range(lo..hi) })
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

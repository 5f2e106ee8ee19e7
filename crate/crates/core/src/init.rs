//! Weight initialization and seeded random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Glorot (Xavier) uniform: i.i.d. samples on `[-L, L]` with
/// `L = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut R) -> Tensor {
    let limit = glorot_limit(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// FNV-1a, used to give each named parameter its own stream.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent stream for `(seed, label)`. Streams for different labels
/// never overlap, so the value drawn for a parameter does not depend on
/// what else the model contains.
pub fn stream(seed: u64, label: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    stream(seed, name_hash(name))
}

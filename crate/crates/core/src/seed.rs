//! Labeled seed derivation.
//!
//! Every stochastic component draws from its own ChaCha8 stream whose seed is
//! `derive_seed(global, label)`: the FNV-1a hash of the label is xor-ed into
//! the global seed and the result passed through the SplitMix64 finalizer.
//! Indexed streams (per step, per utterance) mix the index in the same way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn derive_seed(global: u64, label: &str) -> u64 {
    splitmix(global ^ fnv1a(label.as_bytes()))
}

pub fn derive_indexed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn labeled_rng(global: u64, label: &str, index: u64) -> Rng {
    rng(derive_indexed(derive_seed(global, label), index))
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

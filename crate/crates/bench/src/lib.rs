//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xnet_core::data::{synth_sequence, SynthSpec};
use xnet_core::{SequenceRecord, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<R: xnet_core::Real>(shape: &[usize], seed: u64) -> Tensor<R> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// A short default synthetic sequence.
pub fn short_sequence(n_frames: usize) -> SequenceRecord<f32> {
    synth_sequence(&SynthSpec { n_frames, ..SynthSpec::default() }).expect("default spec is valid")
}

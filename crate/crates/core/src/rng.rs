//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha8 stream derived from the user seed, so adding draws in one place
//! never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub(crate) const GAUSSIAN: u64 = 0;
pub(crate) const ACCEPT: u64 = 1;
pub(crate) const INIT: u64 = 10;
pub(crate) const SHUFFLE: u64 = 11;
pub(crate) const MONTE_CARLO: u64 = 12;
pub(crate) const SPLIT: u64 = 20;
pub(crate) const SYNTH: u64 = 21;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_standard_normal(rng, &mut v);
    v
}

//! Deterministic random streams shared by the simulator and the envelope
//! coverage checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha8 stream `stream` under a master `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform size-`m` subset of `0..n`, sorted.
pub fn srswor<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Vec<usize> {
    let mut units = rand::seq::index::sample(rng, n, m).into_vec();
    units.sort_unstable();
    units
}

/// Stream tags keep the different consumers of one seed apart.
pub(crate) mod tag {
    pub const MASTER: u64 = 1;
    pub const ASSIGNMENT: u64 = 2;
    pub const RESIDUAL: u64 = 3;
    pub const ENVELOPE: u64 = 4;
}

/// Seed for a labelled sub-experiment, e.g. `[tag, replicate, gamma_index]`.
///
/// SplitMix64 finalizer folded over the parts.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)))
}

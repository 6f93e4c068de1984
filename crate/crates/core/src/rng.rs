//! Seed derivation. Every random stream in a run is keyed by
//! `(run seed, client, round, stream)` so parallel scheduling and
//! checkpoint/resume cannot perturb results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tag mixed into a derived seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Init = 3,
    Sampling = 4,
    Training = 5,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, client: u64, round: u64, stream: Stream) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ client);
    h = splitmix64(h ^ round);
    splitmix64(h ^ stream as u64)
}

pub fn rng_for(seed: u64, client: usize, round: usize, stream: Stream) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, client as u64, round as u64, stream))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

//! Named random streams derived from one experiment seed.
//!
//! Every subsystem draws from its own ChaCha stream so adding draws in one
//! place never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LOOP_STREAM: &str = "loop";
pub const MOCK_STREAM: &str = "mock";
pub const SIMULATION_STREAM: &str = "simulation";

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Derive a child seed, e.g. the mock backend's seed from the experiment seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    stream(seed, name).next_u64()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

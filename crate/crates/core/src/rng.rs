//! Seeded random streams.
//!
//! All sampling goes through ChaCha20 (`rand_chacha::ChaCha20Rng`), a
//! counter-based generator. Parallel work uses one stream per task index so
//! results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StosymRng = ChaCha20Rng;

/// Name of the generator, recorded in reports.
pub const GENERATOR_NAME: &str = "ChaCha20 (rand_chacha, seed_from_u64 + set_stream)";

pub fn rng_from_seed(seed: u64) -> StosymRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under the same seed.
pub fn substream(seed: u64, stream: u64) -> StosymRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

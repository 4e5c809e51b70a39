//! Minimal neural-network plumbing shared by every trainable model.

mod adam;
pub mod ops;
mod params;

pub use adam::Adam;
pub(crate) use params::hex;
pub use params::{scalar, tensor_to_vec, tensor_to_vec64, Init, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for one `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

//! Factor-disentangled music similarity on top of a frozen audio encoder.
//!
//! Everything here operates on cached encoder embeddings: a binary
//! embedding store, factor-controlled triplet manifests, shallow projection
//! heads trained with Circle Loss, a disentanglement evaluation protocol,
//! per-factor retrieval with score fusion and first-layer attribution.
//!
//! The pipeline is testable end to end without audio through the
//! [`synth`] module, which plants known factor structure in synthetic
//! embeddings.
//!
//! ```text
//! store + manifests -> train (per factor) -> heads -> eval / index / query
//! ```

pub mod attribution;
pub mod cli;
mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod factor;
pub mod head;
pub mod linalg;
pub mod loss;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod train;

pub use error::{MeritError, Result};
pub use factor::Factor;

/// Mixes a base seed with a stream index into an independent 64-bit seed
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

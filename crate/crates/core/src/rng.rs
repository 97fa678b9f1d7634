//! Keyed random streams.
//!
//! Every random draw in training comes from a ChaCha stream keyed by
//! `(seed, purpose, index)`, so a draw never depends on how many other
//! draws happened before it or on which thread made it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    /// Minibatch selection, indexed by iteration.
    Batch,
    /// Gaussian perturbation of sufficient statistics, indexed by iteration.
    Noise,
    /// Word subsampling of over-long documents, indexed by document id.
    Truncate,
    /// Topic matrix initialization.
    Init,
    /// Synthetic corpus generation.
    Synthetic,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Batch => 0x6261_7463_6800_0001,
            StreamPurpose::Noise => 0x6e6f_6973_6500_0002,
            StreamPurpose::Truncate => 0x7472_756e_6300_0003,
            StreamPurpose::Init => 0x696e_6974_0000_0004,
            StreamPurpose::Synthetic => 0x7379_6e74_6800_0005,
        }
    }
}

/// Returns the stream keyed by `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: StreamPurpose, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.tag().to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

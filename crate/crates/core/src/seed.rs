//! Seeded randomness with a stable, versioned construction.
//!
//! All shuffling and sampling in this crate goes through [`stream_rng`] and
//! [`shuffle`]. The generator is ChaCha8 (pinned algorithm, stable output
//! across releases), and the Fisher-Yates shuffle is implemented here rather
//! than borrowed from `rand` so that partitions and demo selections reproduce
//! bit-for-bit even if the `rand` crate changes its slice algorithms.
//!
//! Distinct purposes (splitting, mini-batching, demo sampling, trials,
//! permutation replicates) draw from distinct streams derived by hashing a
//! label into the ChaCha stream id, so one seed can safely drive the whole
//! pipeline without correlated draws.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Construction version. Bump only with a migration note in the changelog;
/// outputs for a given (version, seed, label) are frozen.
pub const RNG_SCHEME_VERSION: u32 = 1;

/// An independent RNG for `(seed, label)`.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_stream(label));
    rng
}

fn label_stream(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}

/// In-place Fisher-Yates shuffle, fixed iteration order (n-1 down to 1).
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// A seeded permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl RngCore) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    shuffle(&mut indices, rng);
    indices
}

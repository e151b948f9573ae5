//! Seed derivation.
//!
//! Every random stream in the pipeline is derived from a master seed plus a
//! path of labels, so results do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Hash a master seed and a sequence of string/integer parts into a new seed.
pub fn derive_seed(master: u64, parts: &[&dyn SeedPart]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in parts {
        part.feed(&mut hasher);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// RNG for the `index`-th independent stream under `master`.
pub fn stream(master: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, &[&label, &index]))
}

pub trait SeedPart {
    fn feed(&self, hasher: &mut Sha256);
}

impl SeedPart for &str {
    fn feed(&self, hasher: &mut Sha256) {
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update(self.as_bytes());
    }
}

impl SeedPart for String {
    fn feed(&self, hasher: &mut Sha256) {
        self.as_str().feed(hasher)
    }
}

impl SeedPart for u64 {
    fn feed(&self, hasher: &mut Sha256) {
        hasher.update([0xA5]);
        hasher.update(self.to_le_bytes());
    }
}

impl SeedPart for u32 {
    fn feed(&self, hasher: &mut Sha256) {
        (*self as u64).feed(hasher)
    }
}

impl SeedPart for usize {
    fn feed(&self, hasher: &mut Sha256) {
        (*self as u64).feed(hasher)
    }
}

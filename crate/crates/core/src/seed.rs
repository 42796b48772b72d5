//! Seed derivation.
//!
//! Every random draw descends from the experiment's root seed through a
//! labelled split tree: `root → run → user → instance → request`. A child
//! seed is the first eight bytes of SHA-256 over the parent seed and the
//! child label, so sibling streams never overlap and the tree is stable
//! across platforms and thread schedules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self(root)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn child(self, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.0.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Self(u64::from_le_bytes(bytes))
    }

    pub fn child_index(self, label: &str, index: u64) -> Self {
        self.child(&format!("{label}#{index}"))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

//! Hierarchical seed derivation.
//!
//! A master seed is expanded into named child streams by hashing the parent
//! key with the child label. Every consumer draws from its own ChaCha stream,
//! so adding a new consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Names of the standard child streams.
pub mod streams {
    pub const ENV: &str = "env";
    pub const POLICY_INIT: &str = "policy-init";
    pub const REPLAY: &str = "replay-sampling";
    pub const GROUPS: &str = "group-draws";
    pub const EXPLORE: &str = "exploration";
    pub const EVAL: &str = "evaluation";
    pub const PROBE: &str = "probe";
}

#[derive(Clone, PartialEq, Eq)]
pub struct Seeder {
    key: [u8; 32],
}

impl std::fmt::Debug for Seeder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Seeder({:02x}{:02x}{:02x}{:02x}..)", self.key[0], self.key[1], self.key[2], self.key[3])
    }
}

impl Seeder {
    pub fn new(master: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"drmarl/master");
        h.update(master.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"/");
        h.update(label.as_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn child_index(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"#");
        h.update(index.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::from_seed(self.key)
    }

    /// Shorthand for `self.child(label).rng()`.
    pub fn stream(&self, label: &str) -> StreamRng {
        self.child(label).rng()
    }
}

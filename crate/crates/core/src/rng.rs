//! Named random streams.
//!
//! Every source of randomness in a run descends from one 64-bit seed. A
//! [`SeedStream`] is a 256-bit key; children are derived by hashing the parent
//! key with a label, so streams for unrelated purposes (data, init, training,
//! sampling) never share state and adding draws to one leaves the others
//! untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: [u8; 32],
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"cpolab/seed");
        h.update(seed.to_le_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"/");
        h.update(label.as_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    pub fn index(&self, i: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"#");
        h.update(i.to_le_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.key)
    }

    /// A 64-bit digest of the key, for handing to APIs that take a plain seed.
    pub fn as_u64(&self) -> u64 {
        u64::from_le_bytes(self.key[..8].try_into().expect("32-byte key"))
    }
}

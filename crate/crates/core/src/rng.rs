//! Counter-based random streams keyed by `(seed, purpose, index)`.
//!
//! Every consumer derives its own stream from the key, so reordering
//! workers or skipping items never shifts anyone else's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep unrelated streams apart even for equal seeds/indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ParamInit = 1,
    SceneTrain = 2,
    SceneVal = 3,
    SceneTest = 4,
    Resample = 5,
    Warmup = 6,
    FiniteDiff = 7,
    Verify = 8,
}

pub type KeyedRng = ChaCha8Rng;

pub fn keyed_rng(seed: u64, purpose: Purpose, index: u64) -> KeyedRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"mtvit\0\0\0");
    ChaCha8Rng::from_seed(key)
}

/// FNV-1a, used to turn parameter names into stream indices.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

//! Seeded randomness and hashing helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a named stream from the master seed.
///
/// Streams used by the pipeline: `"background"`, `"train"` (indexed by epoch),
/// `"inference"` (indexed by run), `"init"`.
pub fn substream(master: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn substream_rng(master: u64, name: &str, index: u64) -> SeededRng {
    rng_from_seed(substream(master, name, index))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of a value.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config values serialize to json");
    sha256_hex(v.to_string().as_bytes())
}

/// Config hash and master seed stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

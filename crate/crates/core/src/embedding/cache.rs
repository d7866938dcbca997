//! Binary cache of pattern vectors keyed by checkpoint and patch set.

use std::path::Path;

use super::{PatternVector, LATENT_DIM};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::patches::PatchSpec;
use crate::util::{json_hash, sha256_hex};

const MAGIC: &[u8; 4] = b"PDPV";

pub fn patchset_hash(specs: &[PatchSpec]) -> String {
    json_hash(&specs)
}

pub fn cache_key(checkpoint_hash: &str, patchset_hash: &str) -> String {
    sha256_hex(format!("{checkpoint_hash}:{patchset_hash}").as_bytes())
}

/// Layout: magic, count (u64), dim (u64), then z_mean rows, then sigma rows.
pub fn save_vectors(path: &Path, vectors: &[PatternVector]) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + vectors.len() * LATENT_DIM * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(vectors.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(LATENT_DIM as u64).to_le_bytes());
    for v in vectors {
        v.z_mean.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    }
    for v in vectors {
        v.sigma.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    }
    write_atomic(path, &buf)
}

pub fn load_vectors(path: &Path) -> Result<Vec<PatternVector>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::parse("pattern cache", path, m);
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad("bad header"));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if dim != LATENT_DIM || bytes.len() != 20 + 2 * n * dim * 4 {
        return Err(bad("size mismatch"));
    }
    let floats: Vec<f32> = bytes[20..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let (mu, sigma) = floats.split_at(n * dim);
    Ok(mu
        .chunks(dim)
        .zip(sigma.chunks(dim))
        .map(|(m, s)| PatternVector {
            z_mean: m.to_vec(),
            sigma: s.to_vec(),
        })
        .collect())
}

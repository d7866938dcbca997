use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loss::LossBreakdown;
use super::model::Vae;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::nn::{Adam, Parameterized};
use crate::util::{rng_from_seed, sha256_hex};

const MAGIC: &[u8; 4] = b"PDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub batches: usize,
    pub pairs: usize,
    /// Population mean used for the histogram-score offset this epoch.
    pub hscore_mean: f64,
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub train: TrainConfig,
    /// Loss of the first batch before any update.
    pub initial: Option<LossBreakdown>,
    pub history: Vec<EpochRecord>,
    /// Path of the background model used during training, if any.
    pub background_model: Option<PathBuf>,
    /// sha256 of the binary weights file.
    pub weights_sha256: String,
}

impl CheckpointMeta {
    pub fn new(train: TrainConfig, seed: u64, config_hash: String) -> Self {
        Self {
            config_hash,
            seed,
            epoch: 0,
            train,
            initial: None,
            history: Vec::new(),
            background_model: None,
            weights_sha256: String::new(),
        }
    }
}

/// Model weights, optimiser state, and the histogram-score window.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub vae: Vae,
    pub optimizer: Adam,
    pub hscore_window: Vec<f64>,
    pub meta: CheckpointMeta,
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::parse("checkpoint", self.path, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, expected: usize) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::parse("checkpoint", self.path, format!("tensor of {n} values, expected {expected}")));
        }
        Ok(self.take(4 * n)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn weights_path(stem: &Path) -> PathBuf {
        stem.with_extension("bin")
    }

    pub fn meta_path(stem: &Path) -> PathBuf {
        stem.with_extension("json")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.vae.width as u64).to_le_bytes());
        let mut vae = self.vae.clone();
        vae.visit_params(&mut |p| put_f32s(&mut buf, &p.value));
        buf.extend_from_slice(&self.optimizer.t.to_le_bytes());
        buf.extend_from_slice(&(self.optimizer.m.len() as u64).to_le_bytes());
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put_f32s(&mut buf, m);
            put_f32s(&mut buf, v);
        }
        buf.extend_from_slice(&(self.hscore_window.len() as u64).to_le_bytes());
        for h in &self.hscore_window {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        buf
    }

    /// Writes `<stem>.bin` then `<stem>.json`, each atomically; returns the weights hash.
    pub fn save(&mut self, stem: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        let hash = sha256_hex(&bytes);
        write_atomic(&Self::weights_path(stem), &bytes)?;
        self.meta.weights_sha256 = hash.clone();
        write_json(&Self::meta_path(stem), &self.meta)?;
        Ok(hash)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let meta: CheckpointMeta = read_json(&Self::meta_path(stem))?;
        let path = Self::weights_path(stem);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if !meta.weights_sha256.is_empty() && sha256_hex(&bytes) != meta.weights_sha256 {
            return Err(Error::parse("checkpoint", &path, "weights hash does not match metadata"));
        }
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: &path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::parse("checkpoint", &path, "bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::parse("checkpoint", &path, format!("unsupported version {version}")));
        }
        let width = r.u64()? as usize;
        if width != meta.train.base_width {
            return Err(Error::parse("checkpoint", &path, "width disagrees with metadata"));
        }
        let mut vae = Vae::new(width, &mut rng_from_seed(0));
        let mut err = None;
        vae.visit_params(&mut |p| {
            if err.is_none() {
                match r.f32s(p.value.len()) {
                    Ok(v) => p.value = v,
                    Err(e) => err = Some(e),
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut optimizer = Adam::new(meta.train.optimizer);
        optimizer.t = r.u64()?;
        let slots = r.u64()? as usize;
        let mut sizes = Vec::new();
        vae.visit_params(&mut |p| sizes.push(p.value.len()));
        if slots != 0 && slots != sizes.len() {
            return Err(Error::parse("checkpoint", &path, "optimizer state does not match parameters"));
        }
        for &len in sizes.iter().take(slots) {
            optimizer.m.push(r.f32s(len)?);
            optimizer.v.push(r.f32s(len)?);
        }
        let nh = r.u64()? as usize;
        let hscore_window = r
            .take(8 * nh)?
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            vae,
            optimizer,
            hscore_window,
            meta,
        })
    }
}

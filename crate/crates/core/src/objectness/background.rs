//! Dominant background patterns: k-means over flattened 32x32x3 patches.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::PixelPatch;
use crate::util::Provenance;

pub const BACKGROUND_DIM: usize = 32 * 32 * 3;
const MAGIC: &[u8; 4] = b"PSBG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Relative to the mean per-feature variance of the pool.
    pub tol: f64,
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_iter: 300,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    /// `k` vectors of length 3072, channels in [0, 1].
    pub centers: Vec<Vec<f32>>,
    pub maxscore: f64,
    pub fit_seed: u64,
    pub pool_size: usize,
    /// Run identity recorded in the sidecar.
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    k: usize,
    dim: usize,
    maxscore: f64,
    fit_seed: u64,
    pool_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

fn nearest(x: &[f32], centers: &[Vec<f32>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(x, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

struct KMeansFit {
    centers: Vec<Vec<f32>>,
    inertia: f64,
}

fn kmeans_pp_init<R: Rng + ?Sized>(data: &[Vec<f32>], k: usize, rng: &mut R) -> Vec<Vec<f32>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut pick = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[idx].clone();
        for (x, d) in data.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd<R: Rng + ?Sized>(data: &[Vec<f32>], cfg: &KMeansConfig, tol_abs: f64, rng: &mut R) -> KMeansFit {
    let dim = data[0].len();
    let mut centers = kmeans_pp_init(data, cfg.k, rng);
    let mut labels = vec![0usize; data.len()];
    let mut dists = vec![0f64; data.len()];
    for _ in 0..cfg.max_iter {
        for (i, x) in data.iter().enumerate() {
            let (l, d) = nearest(x, &centers);
            labels[i] = l;
            dists[i] = d;
        }
        let mut sums = vec![vec![0f64; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(x) {
                *s += v as f64;
            }
        }
        let mut new_centers: Vec<Vec<f32>> = sums
            .iter()
            .zip(&counts)
            .zip(&centers)
            .map(|((s, &n), old)| {
                if n == 0 {
                    old.clone()
                } else {
                    s.iter().map(|v| (v / n as f64) as f32).collect()
                }
            })
            .collect();
        // an empty cluster takes the point farthest from its centre
        for c in 0..cfg.k {
            if counts[c] == 0 {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
                new_centers[c] = data[far].clone();
                dists[far] = 0.0;
            }
        }
        let shift: f64 = centers.iter().zip(&new_centers).map(|(a, b)| sq_dist(a, b)).sum();
        centers = new_centers;
        if shift <= tol_abs {
            break;
        }
    }
    let inertia = data.iter().map(|x| nearest(x, &centers).1).sum();
    KMeansFit { centers, inertia }
}

/// Fits `k` background centres with k-means++ seeding, keeping the best of
/// `n_init` restarts by inertia, and records the pool's largest nearest-centre
/// distance as `maxscore`.
pub fn fit_background_model<R: Rng + ?Sized>(
    pool: &[PixelPatch],
    cfg: &KMeansConfig,
    fit_seed: u64,
    rng: &mut R,
) -> Result<BackgroundModel> {
    if pool.len() < cfg.k || cfg.k == 0 {
        return Err(Error::PoolTooSmall {
            pool: pool.len(),
            k: cfg.k,
        });
    }
    let data: Vec<Vec<f32>> = pool.iter().map(PixelPatch::to_unit_vec).collect();
    let dim = data[0].len();
    let n = data.len() as f64;
    let mut mean = vec![0f64; dim];
    for x in &data {
        for (m, &v) in mean.iter_mut().zip(x) {
            *m += v as f64 / n;
        }
    }
    let var: f64 = data
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n * dim as f64);
    let tol_abs = cfg.tol * var;

    let best = (0..cfg.n_init.max(1))
        .map(|_| lloyd(&data, cfg, tol_abs, rng))
        .fold(None::<KMeansFit>, |best, fit| match best {
            Some(b) if b.inertia <= fit.inertia => Some(b),
            _ => Some(fit),
        })
        .expect("n_init >= 1");

    let maxscore = data
        .iter()
        .map(|x| nearest(x, &best.centers).1.sqrt())
        .fold(0.0, f64::max);
    if maxscore <= 0.0 {
        return Err(Error::DegenerateBackground);
    }
    Ok(BackgroundModel {
        centers: best.centers,
        maxscore,
        fit_seed,
        pool_size: pool.len(),
        provenance: None,
    })
}

impl BackgroundModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Euclidean distance from the flattened patch to its nearest centre.
    pub fn bscore(&self, patch: &PixelPatch) -> f64 {
        self.bscore_vec(&patch.to_unit_vec())
    }

    pub fn bscore_vec(&self, v: &[f32]) -> f64 {
        nearest(v, &self.centers).1.sqrt()
    }

    /// `bscore / maxscore`, clamped to [0, 1] for patches outside the fitting pool.
    pub fn bscore_norm(&self, patch: &PixelPatch) -> f64 {
        (self.bscore(patch) / self.maxscore).clamp(0.0, 1.0)
    }

    /// Writes `<stem>.bin` (centres) and `<stem>.json` (metadata).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let dim = self.centers.first().map_or(0, Vec::len);
        let mut bytes = Vec::with_capacity(12 + self.k() * dim * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.k() as u32).to_le_bytes());
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        for c in &self.centers {
            for v in c {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = stem.with_extension("bin");
        crate::io::write_atomic(&bin, &bytes)?;
        let side = Sidecar {
            k: self.k(),
            dim,
            maxscore: self.maxscore,
            fit_seed: self.fit_seed,
            pool_size: self.pool_size,
            provenance: self.provenance.clone(),
        };
        let json = stem.with_extension("json");
        crate::io::write_atomic(&json, serde_json::to_string_pretty(&side).expect("sidecar").as_bytes())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json = stem.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: json.clone(),
            source: e,
        })?;
        let bin = stem.with_extension("bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::parse("background model", &bin, "bad magic"));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if k != side.k || dim != side.dim || bytes.len() != 12 + k * dim * 4 {
            return Err(Error::parse("background model", &bin, "size does not match sidecar"));
        }
        let floats: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            centers: floats.chunks(dim).map(<[f32]>::to_vec).collect(),
            maxscore: side.maxscore,
            fit_seed: side.fit_seed,
            pool_size: side.pool_size,
            provenance: side.provenance,
        })
    }
}

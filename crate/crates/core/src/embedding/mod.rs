//! Pattern-space embedding: a convolutional VAE over gradient patches trained
//! with a modulated contrastive loss.

mod cache;
mod checkpoint;
mod loss;
mod model;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Tensor};
use crate::objectness::ModulationMode;
use crate::patches::{GradientPatch, PATCH_SIZE};

pub use cache::{cache_key, load_vectors, patchset_hash, save_vectors};
pub use checkpoint::{Checkpoint, CheckpointMeta, EpochRecord};
pub use loss::{
    kld, modulated_batch_loss, mse, nce_loss, nce_loss_grad, pair_weight, LossBreakdown, LossWeights, NceOutput,
};
pub use model::{split_head, BasicBlock, Decoder, Encoder, Vae, INPUT_CHANNELS, LATENT_DIM};
pub use train::{batch_loss, batch_loss_and_grad, train, EpochReport, TrainBatch, TrainInputs};

const INPUT_LEN: usize = INPUT_CHANNELS * (PATCH_SIZE as usize) * (PATCH_SIZE as usize);
const INFER_BATCH: usize = 256;

/// Latent mean and standard deviation of one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternVector {
    pub z_mean: Vec<f32>,
    pub sigma: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Positive pairs per batch.
    pub batch_size: usize,
    pub tau: f64,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Patches drawn per image per epoch; each pair contributes two.
    pub patches_per_image_per_epoch: usize,
    pub modulation: ModulationMode,
    /// Channel count of the first residual stage; later stages double it.
    pub base_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            tau: 0.2,
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            epochs: 200,
            patches_per_image_per_epoch: 40,
            modulation: ModulationMode::Both,
            base_width: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        let l = &self.loss;
        if !(l.contrastive >= 0.0 && l.recon >= 0.0 && l.kld >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        if self.patches_per_image_per_epoch < 2 {
            return bad("patches_per_image_per_epoch must be at least 2".into());
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        Ok(())
    }

    pub fn pairs_per_epoch(&self, images: usize) -> usize {
        (images * self.patches_per_image_per_epoch).div_ceil(2)
    }
}

fn check_patch(p: &GradientPatch) -> Result<()> {
    if p.grads.len() != INPUT_LEN {
        return Err(Error::shape(format!("{INPUT_LEN} gradient values"), p.grads.len()));
    }
    Ok(())
}

/// Stacks gradient patches into a `[n, 2, 32, 32]` tensor.
pub fn stack_patches<'a>(patches: impl IntoIterator<Item = &'a GradientPatch>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for p in patches {
        check_patch(p)?;
        data.extend_from_slice(&p.grads);
        n += 1;
    }
    let s = PATCH_SIZE as usize;
    Ok(Tensor::from_vec(n, INPUT_CHANNELS, s, s, data))
}

fn vectors_from_head(out: &Tensor) -> Vec<PatternVector> {
    let (mu, logvar) = split_head(out);
    mu.chunks(LATENT_DIM)
        .zip(logvar.chunks(LATENT_DIM))
        .map(|(m, lv)| PatternVector {
            z_mean: m.to_vec(),
            sigma: lv.iter().map(|v| (0.5 * v).exp()).collect(),
        })
        .collect()
}

pub fn encode(vae: &Vae, patch: &GradientPatch) -> Result<PatternVector> {
    let x = stack_patches([patch])?;
    Ok(vectors_from_head(&vae.encoder.infer(&x)).remove(0))
}

/// `z = z_mean + sigma * eps` with `eps` standard normal.
pub fn reparameterize<R: Rng + ?Sized>(v: &PatternVector, rng: &mut R) -> Vec<f32> {
    v.z_mean
        .iter()
        .zip(&v.sigma)
        .map(|(m, s)| {
            let e: f32 = rng.sample(StandardNormal);
            m + s * e
        })
        .collect()
}

/// Reconstructs a `2 x 32 x 32` gradient patch from a latent sample.
pub fn decode(vae: &Vae, z: &[f32]) -> Result<Vec<f32>> {
    if z.len() != LATENT_DIM {
        return Err(Error::shape(LATENT_DIM, z.len()));
    }
    Ok(vae.decoder.infer(&Tensor::matrix(1, LATENT_DIM, z.to_vec())).data)
}

/// Batched inference; returns one vector per input in order.
pub fn embed_patches(vae: &Vae, patches: &[GradientPatch]) -> Result<Vec<PatternVector>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFER_BATCH) {
        let x = stack_patches(chunk)?;
        out.extend(vectors_from_head(&vae.encoder.infer(&x)));
    }
    Ok(out)
}

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::checkpoint::{Checkpoint, CheckpointMeta, EpochRecord};
use super::loss::{kld, modulated_batch_loss, mse, nce_loss_grad, pair_weight, LossBreakdown};
use super::model::{logvar_active, split_head, Vae, LATENT_DIM};
use super::{stack_patches, TrainConfig};
use crate::dataset::ScaledImage;
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::nn::{Adam, Parameterized, Tensor};
use crate::objectness::{
    hscore_adjusted, BackgroundModel, HScorePopulation, ImageScorer, ObjectnessConfig, ObjectnessScores,
};
use crate::patches::{extract, sample_pair, sobel, GradientPatch, PatchSpec, SamplerConfig};
use crate::util::{rng_from_seed, substream, substream_rng};

/// One optimisation batch: `x` holds `B` anchors followed by their `B`
/// partners, `g` the per-pair modulation weights.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: Tensor,
    pub g: Vec<f64>,
}

impl TrainBatch {
    pub fn pairs(&self) -> usize {
        self.x.n / 2
    }
}

/// Everything training reads besides its own config.
pub struct TrainInputs<'a> {
    pub images: &'a [ScaledImage],
    pub sampler: &'a SamplerConfig,
    pub objectness: &'a ObjectnessConfig,
    /// Required when modulation uses background scores.
    pub background: Option<&'a BackgroundModel>,
    pub seed: u64,
    pub config_hash: String,
    /// Where to write a JSON dump of a non-finite batch.
    pub dump_dir: Option<&'a Path>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: LossBreakdown,
}

struct Forward {
    mu: Vec<f32>,
    logvar: Vec<f32>,
    raw_logvar: Vec<f32>,
    z: Vec<f32>,
}

fn reparam(head: &Tensor, eps: &[f32]) -> Forward {
    let (mu, logvar) = split_head(head);
    let raw_logvar = head.data.chunks(2 * LATENT_DIM).flat_map(|r| r[LATENT_DIM..].to_vec()).collect();
    let z = mu
        .iter()
        .zip(&logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Forward {
        mu,
        logvar,
        raw_logvar,
        z,
    }
}

fn check_batch(batch: &TrainBatch, eps: &[f32]) -> Result<usize> {
    Vae::check_input(&batch.x)?;
    let n = batch.x.n;
    if !n.is_multiple_of(2) || batch.g.len() != n / 2 {
        return Err(Error::shape(format!("{} pair weights for {n} patches", n / 2), batch.g.len()));
    }
    if eps.len() != n * LATENT_DIM {
        return Err(Error::shape(n * LATENT_DIM, eps.len()));
    }
    Ok(n / 2)
}

/// Forward-only batch loss for fixed noise `eps` (`[2B, 100]`).
pub fn batch_loss(vae: &Vae, batch: &TrainBatch, eps: &[f32], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let b = check_batch(batch, eps)?;
    let f = reparam(&vae.encoder.infer(&batch.x), eps);
    let d = b * LATENT_DIM;
    let nce = nce_loss_grad(&f.z[..d], &f.z[d..], LATENT_DIM, cfg.tau, None)?;
    let recon = vae.decoder.infer(&Tensor::matrix(2 * b, LATENT_DIM, f.z));
    let (rec, _) = mse(&recon.data, &batch.x.data);
    let (kl, _, _) = kld(&f.mu, &f.logvar);
    Ok(modulated_batch_loss(&nce.per_pair, &batch.g, rec, kl, &cfg.loss))
}

/// Batch loss with gradients accumulated into `vae`'s parameters.
///
/// Non-finite terms are reported before any gradient is propagated.
pub fn batch_loss_and_grad(vae: &mut Vae, batch: &TrainBatch, eps: &[f32], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let b = check_batch(batch, eps)?;
    let w = &cfg.loss;
    let head = vae.encoder.forward(&batch.x, true);
    let f = reparam(&head, eps);
    let d = b * LATENT_DIM;
    let pair_w: Vec<f64> = batch.g.iter().map(|g| g * w.contrastive / b as f64).collect();
    let nce = nce_loss_grad(&f.z[..d], &f.z[d..], LATENT_DIM, cfg.tau, Some(&pair_w))?;
    let recon = vae.decoder.forward(&Tensor::matrix(2 * b, LATENT_DIM, f.z.clone()), true);
    let (rec, drec) = mse(&recon.data, &batch.x.data);
    let (kl, dmu_kl, dlv_kl) = kld(&f.mu, &f.logvar);
    let loss = modulated_batch_loss(&nce.per_pair, &batch.g, rec, kl, w);
    if let Some(term) = loss.non_finite_term() {
        return Err(Error::NonFinite {
            term,
            epoch: 0,
            batch: 0,
            dump: None,
        });
    }

    let drec = Tensor::from_vec(recon.n, recon.c, recon.h, recon.w, drec.iter().map(|g| g * w.recon as f32).collect());
    let dz_dec = vae.decoder.backward(&drec);
    let mut dhead = Tensor::zeros(2 * b, 2 * LATENT_DIM, 1, 1);
    for i in 0..2 * b {
        let row = &mut dhead.data[i * 2 * LATENT_DIM..(i + 1) * 2 * LATENT_DIM];
        for j in 0..LATENT_DIM {
            let k = i * LATENT_DIM + j;
            let dz_nce = if i < b { nce.grad_a[k] } else { nce.grad_b[k - d] };
            let dz = dz_nce + dz_dec.data[k];
            row[j] = dz + w.kld as f32 * dmu_kl[k];
            row[LATENT_DIM + j] = if logvar_active(f.raw_logvar[k]) {
                let sigma = (0.5 * f.logvar[k]).exp();
                dz * eps[k] * 0.5 * sigma + w.kld as f32 * dlv_kl[k]
            } else {
                0.0
            };
        }
    }
    vae.encoder.backward(&dhead);
    Ok(loss)
}

struct SampledPair {
    a: GradientPatch,
    b: GradientPatch,
    sa: ObjectnessScores,
    sb: ObjectnessScores,
}

#[derive(Serialize)]
struct BatchDump<'a> {
    epoch: usize,
    batch: usize,
    term: &'static str,
    pairs: Vec<(&'a PatchSpec, &'a PatchSpec)>,
    g: &'a [f64],
}

struct Sampler<'a> {
    inputs: &'a TrainInputs<'a>,
    scorers: Vec<ImageScorer>,
}

impl<'a> Sampler<'a> {
    fn new(inputs: &'a TrainInputs<'a>) -> Self {
        let scorers = inputs.images.iter().map(|img| ImageScorer::new(img, inputs.objectness)).collect();
        Self { inputs, scorers }
    }

    fn scores(&self, image: usize, spec: &PatchSpec) -> Result<(GradientPatch, ObjectnessScores)> {
        let img = &self.inputs.images[image];
        let pixels = extract(img, spec)?;
        let hscore_raw = self.scorers[image].hscore_raw(spec).value;
        let bscore_norm = self.inputs.background.map_or(0.0, |m| m.bscore_norm(&pixels));
        Ok((
            sobel(&pixels),
            ObjectnessScores {
                hscore_raw,
                hscore_adj: hscore_raw,
                bscore_norm,
            },
        ))
    }

    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<SampledPair>> {
        let images = self.inputs.images;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let i = rng.random_range(0..images.len());
            let img = &images[i];
            let (a, b) = sample_pair(&img.image_id, img.width(), img.height(), self.inputs.sampler, rng)?;
            let (ga, sa) = self.scores(i, &a)?;
            let (gb, sb) = self.scores(i, &b)?;
            out.push(SampledPair { a: ga, b: gb, sa, sb });
        }
        Ok(out)
    }
}

/// Trains from a fresh initialisation or continues `resume`.
///
/// Each epoch draws its pairs from the `(seed, "train", epoch)` substream, so a
/// resumed run follows the same trajectory as an uninterrupted one. A
/// non-finite loss aborts with [`Error::Diverged`] carrying the checkpoint of
/// the last finite epoch.
pub fn train(
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<Checkpoint> {
    cfg.validate()?;
    inputs.sampler.validate()?;
    if inputs.images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.modulation.uses_background() && inputs.background.is_none() {
        return Err(Error::Config("background modulation requires a fitted background model".into()));
    }
    let mut ckpt = match resume {
        Some(c) => {
            if c.meta.train.base_width != cfg.base_width {
                return Err(Error::Config(format!(
                    "checkpoint width {} differs from configured {}",
                    c.meta.train.base_width, cfg.base_width
                )));
            }
            let mut c = c;
            c.meta.train = cfg.clone();
            c.optimizer.cfg = cfg.optimizer;
            c
        }
        None => initial_checkpoint(inputs, cfg),
    };

    let sampler = Sampler::new(inputs);
    let mut population = HScorePopulation::new(inputs.objectness.mean_window);
    population.extend(ckpt.hscore_window.iter().copied());
    let n_pairs = cfg.pairs_per_epoch(inputs.images.len());
    let (k1, k2) = (inputs.objectness.k1, inputs.objectness.k2);

    for epoch in ckpt.meta.epoch..cfg.epochs {
        let last_good = ckpt.clone();
        let mut rng = substream_rng(inputs.seed, "train", epoch as u64);
        let mut pairs = sampler.sample(n_pairs, &mut rng)?;
        population.extend(pairs.iter().flat_map(|p| [p.sa.hscore_raw, p.sb.hscore_raw]));
        let pop_mean = population.mean();
        for p in &mut pairs {
            for s in [&mut p.sa, &mut p.sb] {
                s.hscore_adj = hscore_adjusted(s.hscore_raw, pop_mean, inputs.objectness.hscore_k);
            }
        }

        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (bi, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = TrainBatch {
                x: stack_patches(chunk.iter().map(|p| &p.a).chain(chunk.iter().map(|p| &p.b)))?,
                g: chunk.iter().map(|p| pair_weight(&p.sa, &p.sb, cfg.modulation, k1, k2)).collect(),
            };
            let eps: Vec<f32> = (0..batch.x.n * LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect();
            if ckpt.meta.initial.is_none() {
                ckpt.meta.initial = Some(batch_loss(&ckpt.vae, &batch, &eps, cfg)?);
            }
            ckpt.vae.zero_grad();
            let loss = match batch_loss_and_grad(&mut ckpt.vae, &batch, &eps, cfg) {
                Ok(l) => l,
                Err(Error::NonFinite { term, .. }) => {
                    let dump = inputs.dump_dir.map(|dir| dir.join(format!("nonfinite_e{epoch}_b{bi}.json")));
                    if let Some(path) = &dump {
                        let rec = BatchDump {
                            epoch,
                            batch: bi,
                            term,
                            pairs: chunk.iter().map(|p| (&p.a.spec, &p.b.spec)).collect(),
                            g: &batch.g,
                        };
                        write_json(path, &rec)?;
                    }
                    let last_finite_epoch = last_good.meta.epoch;
                    return Err(Error::Diverged {
                        cause: Box::new(Error::NonFinite {
                            term,
                            epoch,
                            batch: bi,
                            dump,
                        }),
                        last_finite_epoch,
                        checkpoint: Box::new(last_good),
                    });
                }
                Err(e) => return Err(e),
            };
            ckpt.optimizer.step(&mut ckpt.vae);
            sum.total += loss.total;
            sum.contrastive += loss.contrastive;
            sum.nce += loss.nce;
            sum.recon += loss.recon;
            sum.kld += loss.kld;
            batches += 1;
        }
        let scale = 1.0 / batches.max(1) as f64;
        let mean = LossBreakdown {
            total: sum.total * scale,
            contrastive: sum.contrastive * scale,
            nce: sum.nce * scale,
            recon: sum.recon * scale,
            kld: sum.kld * scale,
        };
        ckpt.meta.history.push(EpochRecord {
            epoch,
            loss: mean,
            batches,
            pairs: pairs.len(),
            hscore_mean: pop_mean,
        });
        ckpt.meta.epoch = epoch + 1;
        ckpt.hscore_window = population.values();
        progress(&EpochReport {
            epoch: epoch + 1,
            epochs: cfg.epochs,
            loss: mean,
        });
    }
    Ok(ckpt)
}

fn initial_checkpoint(inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Checkpoint {
    let mut rng = rng_from_seed(substream(inputs.seed, "init", 0));
    Checkpoint {
        vae: Vae::new(cfg.base_width, &mut rng),
        optimizer: Adam::new(cfg.optimizer),
        hscore_window: Vec::new(),
        meta: CheckpointMeta::new(cfg.clone(), inputs.seed, inputs.config_hash.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::LossWeights;
    use crate::nn::gradcheck::random_tensor;

    fn tiny_batch(pairs: usize, g: f64, seed: u64) -> (TrainBatch, Vec<f32>) {
        let x = random_tensor([2 * pairs, 2, 32, 32], seed);
        let eps = random_tensor([2 * pairs, LATENT_DIM, 1, 1], seed + 1).data;
        (TrainBatch { x, g: vec![g; pairs] }, eps)
    }

    fn grads(vae: &mut Vae) -> Vec<f32> {
        let mut out = Vec::new();
        vae.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    fn contrastive_only() -> TrainConfig {
        TrainConfig {
            loss: LossWeights {
                contrastive: 1.0,
                recon: 0.0,
                kld: 0.0,
            },
            ..Default::default()
        }
    }

    #[test]
    fn train_and_eval_losses_agree() {
        let mut vae = Vae::new(1, &mut rng_from_seed(1));
        let (batch, eps) = tiny_batch(3, 0.7, 2);
        let cfg = TrainConfig::default();
        let a = batch_loss(&vae, &batch, &eps, &cfg).unwrap();
        let b = batch_loss_and_grad(&mut vae, &batch, &eps, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((a.contrastive - 0.7 * a.nce).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_directional_difference() {
        let mut vae = Vae::shallow(2, &[2], &mut rng_from_seed(3));
        let (batch, eps) = tiny_batch(3, 0.8, 4);
        let cfg = TrainConfig::default();
        vae.zero_grad();
        batch_loss_and_grad(&mut vae, &batch, &eps, &cfg).unwrap();
        let g = grads(&mut vae);
        // Direction along the gradient itself keeps the signal far above noise.
        let norm = g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let h = 1e-3 / norm;
        let step = |vae: &mut Vae, sign: f64| {
            let mut k = 0;
            vae.visit_params(&mut |p| {
                for v in &mut p.value {
                    *v += (sign * h * g[k] as f64) as f32;
                    k += 1;
                }
            });
        };
        step(&mut vae, 1.0);
        let lp = batch_loss(&vae, &batch, &eps, &cfg).unwrap().total;
        step(&mut vae, -2.0);
        let lm = batch_loss(&vae, &batch, &eps, &cfg).unwrap().total;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = norm * norm;
        assert!((numeric - analytic).abs() / analytic < 2e-2, "{numeric} vs {analytic}");
    }

    #[test]
    fn constant_modulation_scales_contrastive_gradient() {
        let cfg = contrastive_only();
        let base = Vae::shallow(2, &[2], &mut rng_from_seed(5));
        let (mut batch, eps) = tiny_batch(4, 1.0, 6);

        let mut v1 = base.clone();
        v1.zero_grad();
        let l1 = batch_loss_and_grad(&mut v1, &batch, &eps, &cfg).unwrap();
        let g1 = grads(&mut v1);

        let c = 0.37;
        batch.g = vec![c; 4];
        let mut vc = base.clone();
        vc.zero_grad();
        let lc = batch_loss_and_grad(&mut vc, &batch, &eps, &cfg).unwrap();
        let gc = grads(&mut vc);
        assert!((lc.total - c * l1.total).abs() < 1e-9);
        let scale = g1.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (a, b) in gc.iter().zip(&g1) {
            assert!((a - c as f32 * b).abs() <= 1e-5 * scale);
        }

        // Finite differences of both losses along the unmodulated gradient direction.
        let norm = g1.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let h = 1e-3 / norm;
        let directional = |g: &[f64]| {
            let (mut up, mut down) = (base.clone(), base.clone());
            let mut k = 0;
            up.visit_params(&mut |p| {
                for v in &mut p.value {
                    *v += (h * g1[k] as f64) as f32;
                    k += 1;
                }
            });
            k = 0;
            down.visit_params(&mut |p| {
                for v in &mut p.value {
                    *v -= (h * g1[k] as f64) as f32;
                    k += 1;
                }
            });
            let b = TrainBatch { x: batch.x.clone(), g: g.to_vec() };
            let lp = batch_loss(&up, &b, &eps, &cfg).unwrap().total;
            let lm = batch_loss(&down, &b, &eps, &cfg).unwrap().total;
            (lp - lm) / (2.0 * h)
        };
        let fd_unmod = directional(&[1.0; 4]);
        let fd_mod = directional(&[c; 4]);
        assert!((fd_mod - c * fd_unmod).abs() < 1e-3 * fd_mod.abs(), "{fd_mod} vs {}", c * fd_unmod);
        let analytic: f64 = gc.iter().zip(&g1).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
        assert!((fd_mod - analytic).abs() < 2e-2 * analytic.abs(), "{fd_mod} vs {analytic}");
    }

    #[test]
    fn zero_modulation_gives_zero_contrastive_gradient() {
        let cfg = contrastive_only();
        let mut vae = Vae::new(1, &mut rng_from_seed(8));
        let (batch, eps) = tiny_batch(3, 0.0, 9);
        vae.zero_grad();
        let l = batch_loss_and_grad(&mut vae, &batch, &eps, &cfg).unwrap();
        assert_eq!(l.contrastive, 0.0);
        assert!(grads(&mut vae).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn rejects_malformed_batches() {
        let mut vae = Vae::new(1, &mut rng_from_seed(10));
        let (mut batch, eps) = tiny_batch(2, 1.0, 11);
        batch.g.pop();
        assert!(batch_loss_and_grad(&mut vae, &batch, &eps, &TrainConfig::default()).is_err());
        let (batch, _) = tiny_batch(2, 1.0, 11);
        assert!(batch_loss(&vae, &batch, &[0.0; 3], &TrainConfig::default()).is_err());
    }

    #[test]
    #[ignore]
    fn bench_parts() {
        let width = 8;
        let mut vae = Vae::new(width, &mut rng_from_seed(1));
        let (batch, _) = tiny_batch(64, 1.0, 2);
        let t = std::time::Instant::now();
        let out = vae.encoder.forward(&batch.x, true);
        println!("enc fwd {:.3}", t.elapsed().as_secs_f64());
        let t = std::time::Instant::now();
        vae.encoder.backward(&out);
        println!("enc bwd {:.3}", t.elapsed().as_secs_f64());
        let z = random_tensor([128, LATENT_DIM, 1, 1], 3);
        let t = std::time::Instant::now();
        let r = vae.decoder.forward(&z, true);
        println!("dec fwd {:.3}", t.elapsed().as_secs_f64());
        let t = std::time::Instant::now();
        vae.decoder.backward(&r);
        println!("dec bwd {:.3}", t.elapsed().as_secs_f64());
        let t = std::time::Instant::now();
        let _ = vae.encoder.infer(&batch.x);
        println!("enc infer {:.3}", t.elapsed().as_secs_f64());
    }

    #[test]
    #[ignore]
    fn bench_train_step() {
        for width in [4usize, 8, 16, 32] {
            let mut vae = Vae::new(width, &mut rng_from_seed(1));
            let mut opt = Adam::new(Default::default());
            let (batch, eps) = tiny_batch(64, 1.0, 2);
            let cfg = TrainConfig::default();
            let t = std::time::Instant::now();
            for _ in 0..3 {
                vae.zero_grad();
                batch_loss_and_grad(&mut vae, &batch, &eps, &cfg).unwrap();
                opt.step(&mut vae);
            }
            println!("width {width}: {:.3} s/step (64 pairs)", t.elapsed().as_secs_f64() / 3.0);
        }
    }
}

//! Contrastive, reconstruction and KL terms with their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectness::{combine_g, pair_hscore, ModulationMode, ObjectnessScores};

/// Per-pair InfoNCE losses and the gradient of `sum_i w_i * l_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NceOutput {
    pub per_pair: Vec<f64>,
    pub grad_a: Vec<f32>,
    pub grad_b: Vec<f32>,
}

fn normalize_rows(z: &[f32], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = Vec::with_capacity(z.len());
    let mut norms = Vec::with_capacity(z.len() / dim);
    for row in z.chunks(dim) {
        let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        unit.extend(row.iter().map(|&v| v as f64 / n));
        norms.push(n);
    }
    (unit, norms)
}

fn check_batch(a: &[f32], b: &[f32], dim: usize, tau: f64) -> Result<usize> {
    if dim == 0 || a.len() != b.len() || !a.len().is_multiple_of(dim) {
        return Err(Error::shape(format!("two [B, {dim}] matrices"), format!("{} and {}", a.len(), b.len())));
    }
    let pairs = a.len() / dim;
    if pairs < 2 {
        return Err(Error::Config(format!("contrastive batch needs at least 2 pairs, got {pairs}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(pairs)
}

/// Symmetric cross-view InfoNCE on cosine similarity.
///
/// Row `i` of `a` and row `i` of `b` form a positive pair. For anchor `a_i` the
/// candidates are every `b_k`; for `b_i` they are every `a_k`. The pair loss
/// is the mean of the two directions:
/// `l_i = 1/2 [(-s_ii/tau + lse_k s_ik/tau) + (-s_ii/tau + lse_k s_ki/tau)]`.
pub fn nce_loss(a: &[f32], b: &[f32], dim: usize, tau: f64) -> Result<Vec<f64>> {
    Ok(nce_loss_grad(a, b, dim, tau, None)?.per_pair)
}

/// [`nce_loss`] plus the gradient of `sum_i weights_i * l_i` (weights default to 1).
pub fn nce_loss_grad(a: &[f32], b: &[f32], dim: usize, tau: f64, weights: Option<&[f64]>) -> Result<NceOutput> {
    let n = check_batch(a, b, dim, tau)?;
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == n => w.to_vec(),
        Some(w) => return Err(Error::shape(format!("{n} pair weights"), w.len())),
        None => vec![1.0; n],
    };
    let (ua, na) = normalize_rows(a, dim);
    let (ub, nb) = normalize_rows(b, dim);

    let mut s = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            let (x, y) = (&ua[i * dim..(i + 1) * dim], &ub[k * dim..(k + 1) * dim]);
            s[i * n + k] = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / tau;
        }
    }
    // Row softmax (a -> b) and column softmax (b -> a), each with its log-sum-exp.
    let mut p_row = vec![0.0; n * n];
    let mut p_col = vec![0.0; n * n];
    let mut lse_row = vec![0.0; n];
    let mut lse_col = vec![0.0; n];
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        lse_row[i] = m + sum.ln();
        for k in 0..n {
            p_row[i * n + k] = (row[k] - lse_row[i]).exp();
        }
    }
    for k in 0..n {
        let m = (0..n).map(|i| s[i * n + k]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).map(|i| (s[i * n + k] - m).exp()).sum();
        lse_col[k] = m + sum.ln();
        for i in 0..n {
            p_col[i * n + k] = (s[i * n + k] - lse_col[k]).exp();
        }
    }
    let per_pair: Vec<f64> = (0..n)
        .map(|i| 0.5 * ((lse_row[i] - s[i * n + i]) + (lse_col[i] - s[i * n + i])))
        .collect();

    // dJ/ds_ik (with s already divided by tau, so the 1/tau factor is applied below).
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let delta = if i == k { 1.0 } else { 0.0 };
            g[i * n + k] = 0.5 * (w[i] * (p_row[i * n + k] - delta) + w[k] * (p_col[i * n + k] - delta)) / tau;
        }
    }
    let mut du = vec![0.0f64; n * dim];
    let mut dv = vec![0.0f64; n * dim];
    for i in 0..n {
        for k in 0..n {
            let gik = g[i * n + k];
            if gik == 0.0 {
                continue;
            }
            for d in 0..dim {
                du[i * dim + d] += gik * ub[k * dim + d];
                dv[k * dim + d] += gik * ua[i * dim + d];
            }
        }
    }
    Ok(NceOutput {
        per_pair,
        grad_a: through_normalization(&du, &ua, &na, dim),
        grad_b: through_normalization(&dv, &ub, &nb, dim),
    })
}

/// Chain rule through `u = z / |z|`: `dz = (du - u (u . du)) / |z|`.
fn through_normalization(du: &[f64], u: &[f64], norms: &[f64], dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(du.len());
    for ((g, v), &n) in du.chunks(dim).zip(u.chunks(dim)).zip(norms) {
        let dot: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
        out.extend(g.iter().zip(v).map(|(a, b)| ((a - b * dot) / n) as f32));
    }
    out
}

/// KL divergence from `N(mu, exp(logvar))` to `N(0, I)`, averaged over
/// samples and latent dimensions, with gradients in `(mu, logvar)`.
pub fn kld(mu: &[f32], logvar: &[f32]) -> (f64, Vec<f32>, Vec<f32>) {
    let count = mu.len().max(1) as f64;
    let mut total = 0.0f64;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let (m, lv) = (m as f64, lv as f64);
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
        dmu.push((m / count) as f32);
        dlv.push((0.5 * (lv.exp() - 1.0) / count) as f32);
    }
    (total / count, dmu, dlv)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    let count = pred.len().max(1) as f64;
    let mut total = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            total += d * d;
            (2.0 * d / count) as f32
        })
        .collect();
    (total / count, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub contrastive: f64,
    pub recon: f64,
    pub kld: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            recon: 1.0,
            kld: 0.1,
        }
    }
}

/// Loss terms of one batch or the mean over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `mean_i g_i * l_i`, before the contrastive weight.
    pub contrastive: f64,
    /// `mean_i l_i`, unmodulated.
    pub nce: f64,
    pub recon: f64,
    pub kld: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.contrastive, self.nce, self.recon, self.kld].iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("contrastive", self.contrastive),
            ("nce", self.nce),
            ("recon", self.recon),
            ("kld", self.kld),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `lambda_c * mean_i(g_i l_i) + lambda_r * recon + lambda_k * kld`.
pub fn modulated_batch_loss(pair_losses: &[f64], g: &[f64], recon: f64, kld: f64, w: &LossWeights) -> LossBreakdown {
    let n = pair_losses.len().max(1) as f64;
    let contrastive = pair_losses.iter().zip(g).map(|(l, g)| l * g).sum::<f64>() / n;
    let nce = pair_losses.iter().sum::<f64>() / n;
    LossBreakdown {
        total: w.contrastive * contrastive + w.recon * recon + w.kld * kld,
        contrastive,
        nce,
        recon,
        kld,
    }
}

/// Per-pair modulation weight `g`; 1 when modulation is off.
pub fn pair_weight(a: &ObjectnessScores, b: &ObjectnessScores, mode: ModulationMode, k1: f64, k2: f64) -> f64 {
    match mode.weights(k1, k2) {
        None => 1.0,
        Some((k1, k2)) => combine_g(
            pair_hscore(a.hscore_adj, b.hscore_adj),
            0.5 * (a.bscore_norm + b.bscore_norm),
            k1,
            k2,
        ),
    }
}

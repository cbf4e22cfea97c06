//! Training objectives. Every function takes and returns tensors so the
//! same code drives training, gradient checks and the scalar oracles.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::diffusion::all_finite;
use crate::error::{ensure, Error, Result};
use crate::perception::{FaceMask, IdentityEmbedder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the clean-latent reconstruction term (times `ᾱ_t`).
    pub recon: f64,
    /// Weight of the multi-scale region term.
    pub region: f64,
    /// Weight of the KL term.
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 0.1,
            region: 0.1,
            kl: 1e-5,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure(a.dims() == b.dims(), || {
        format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())
    })
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean squared error between true and predicted noise.
pub fn diff_noise(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(eps, eps_hat, "noise loss")?;
    mse(eps, eps_hat)
}

/// Mean squared error between the clean latent and its recovery.
pub fn diff_recon(z0: &Tensor, z0_hat: &Tensor) -> Result<Tensor> {
    same_shape(z0, z0_hat, "reconstruction loss")?;
    mse(z0, z0_hat)
}

/// Batch mean of `1 − cos(a_i, b_i)` over rows of `(B, d)` tensors.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(per_sample_cosine_distance(a, b)?.mean_all()?)
}

/// Per-row mean squared error of `(B, …)` tensors, shape `(B)`.
pub fn per_sample_mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "per-sample error")?;
    Ok((a - b)?.sqr()?.flatten_from(1)?.mean(D::Minus1)?)
}

/// Per-row `1 − cos(a_i, b_i)`, shape `(B)`.
pub fn per_sample_cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "cosine distance")?;
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((1.0 - (dot / (na * nb)?.maximum(1e-12)?)?)?)
}

/// Collapse per-sample terms drawn at different timesteps into one term
/// and one `ᾱ` such that `ᾱ · term = mean_i(ᾱ_i · term_i)`: the term is
/// the `ᾱ`-weighted average and `ᾱ` the batch mean. With a shared timestep
/// this is the plain mean.
pub fn alpha_weighted(per_sample: &Tensor, alpha_bars: &[f64]) -> Result<(Tensor, f64)> {
    ensure(per_sample.dims() == [alpha_bars.len()], || {
        format!("{:?} per-sample terms for {} timesteps", per_sample.dims(), alpha_bars.len())
    })?;
    let sum: f64 = alpha_bars.iter().sum();
    ensure(sum > 0.0, || "alpha_bar weights sum to zero".into())?;
    let w: Vec<f64> = alpha_bars.iter().map(|a| a / sum).collect();
    let w = Tensor::from_vec(w, alpha_bars.len(), per_sample.device())?.to_dtype(per_sample.dtype())?;
    Ok(((per_sample * w)?.sum_all()?, sum / alpha_bars.len() as f64))
}

/// `1 − cos(embed(x_hat), e_ctrl)`, averaged over the batch; `x_hat` is
/// `(B, C, H, W)`, `e_ctrl` is `(B, d)`.
pub fn id_sim(x_hat: &Tensor, e_ctrl: &Tensor, embedder: &dyn IdentityEmbedder) -> Result<Tensor> {
    let e_hat = embedder.embed_tensor(x_hat)?;
    cosine_distance(&e_hat, e_ctrl)
}

/// Ground-truth region maps per scale: area-average downsampling of each
/// face mask followed by a 0.5 threshold, stacked to `(B, 1, g, g)`.
pub fn region_targets(masks: &[FaceMask], grids: &[usize], dtype: DType, device: &Device) -> Result<Vec<Tensor>> {
    ensure(!masks.is_empty(), || "no masks for region targets".into())?;
    grids
        .iter()
        .map(|&g| {
            let mut flat = Vec::with_capacity(masks.len() * g * g);
            for m in masks {
                flat.extend(m.downsample(g, g)?);
            }
            Ok(Tensor::from_vec(flat, (masks.len(), 1, g, g), device)?.to_dtype(dtype)?)
        })
        .collect()
}

/// `softplus(x) = max(x, 0) + ln(1 + e^{−|x|})`.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + ((x.abs()?.neg()?.exp()? + 1.0)?.log()?))?)
}

/// Mean binary cross-entropy of `σ(logits)` against binary `targets`,
/// computed from logits: `softplus(x) − x·m`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    same_shape(logits, targets, "region loss")?;
    Ok((softplus(logits)? - (logits * targets)?)?.mean_all()?)
}

/// Per-scale mean cross-entropy of the gate logits against the
/// downsampled masks, averaged over scales.
pub fn id_region(logits: &[Tensor], targets: &[Tensor]) -> Result<Tensor> {
    ensure(!logits.is_empty() && logits.len() == targets.len(), || {
        format!("{} logit maps for {} target scales", logits.len(), targets.len())
    })?;
    let mut acc: Option<Tensor> = None;
    for (l, t) in logits.iter().zip(targets) {
        let term = bce_with_logits(l, t)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok((acc.expect("nonempty") / logits.len() as f64)?)
}

/// Squared L2 distance between the target and control embeddings, and the
/// Gaussian KL to the standard normal, each averaged over the batch.
pub fn vae(e_y: &Tensor, e_ctrl: &Tensor, mu: &Tensor, log_var: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape(e_y, e_ctrl, "embedding reconstruction")?;
    same_shape(mu, log_var, "posterior parameters")?;
    if !all_finite(log_var)? {
        return Err(Error::Validation("non-finite log-variance".into()));
    }
    let recon = (e_y - e_ctrl)?.sqr()?.sum(D::Minus1)?.mean_all()?;
    let inner = ((log_var + 1.0)? - mu.sqr()?)?;
    let inner = (inner - log_var.exp()?)?;
    let kl = (inner.sum(D::Minus1)? * -0.5)?.mean_all()?;
    Ok((recon, kl))
}

/// The six loss terms as scalar tensors.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub diff_noise: Tensor,
    pub diff_recon: Tensor,
    pub id_sim: Tensor,
    pub id_region: Tensor,
    pub vae_recon: Tensor,
    pub kl: Tensor,
}

/// `noise + λ_r·ᾱ·recon + ᾱ·id_sim + λ_g·region + vae_recon + λ_kl·kl`.
pub fn total(parts: &LossParts, alpha_bar_t: f64, w: &LossWeights) -> Result<Tensor> {
    let diff = (&parts.diff_noise + (&parts.diff_recon * (w.recon * alpha_bar_t))?)?;
    let id = ((&parts.id_sim * alpha_bar_t)? + (&parts.id_region * w.region)?)?;
    let vae = (&parts.vae_recon + (&parts.kl * w.kl)?)?;
    Ok(((diff + id)? + vae)?)
}

/// Scalar record of one step's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch timestep; the rounded mean when samples draw their own.
    pub t: usize,
    /// Batch `ᾱ`; the mean when samples draw their own, in which case
    /// `diff_recon` and `id_sim` are `ᾱ`-weighted averages.
    pub alpha_bar_t: f64,
    pub diff_noise: f64,
    pub diff_recon: f64,
    pub id_sim: f64,
    pub id_region: f64,
    pub vae_recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(parts: &LossParts, total: &Tensor, t: usize, alpha_bar_t: f64) -> Result<Self> {
        let s = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(Self {
            t,
            alpha_bar_t,
            diff_noise: s(&parts.diff_noise)?,
            diff_recon: s(&parts.diff_recon)?,
            id_sim: s(&parts.id_sim)?,
            id_region: s(&parts.id_region)?,
            vae_recon: s(&parts.vae_recon)?,
            kl: s(&parts.kl)?,
            total: s(total)?,
        })
    }

    /// Recompute the weighted total from the stored terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.diff_noise
            + w.recon * self.alpha_bar_t * self.diff_recon
            + self.alpha_bar_t * self.id_sim
            + w.region * self.id_region
            + self.vae_recon
            + w.kl * self.kl
    }

    pub fn is_finite(&self) -> bool {
        [
            self.diff_noise,
            self.diff_recon,
            self.id_sim,
            self.id_region,
            self.vae_recon,
            self.kl,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn terms(&self) -> String {
        format!(
            "diff_noise={} diff_recon={} id_sim={} id_region={} vae_recon={} kl={} total={}",
            self.diff_noise, self.diff_recon, self.id_sim, self.id_region, self.vae_recon, self.kl, self.total
        )
    }
}

pub const LOG_HEADER: &str = "step,t,alpha_bar_t,diff_noise,diff_recon,id_sim,id_region,vae_recon,kl,total";

/// Appends one CSV row per training step.
pub struct LossLog {
    path: std::path::PathBuf,
    file: std::fs::File,
}

impl LossLog {
    /// Opens for appending, writing the header when the file is new.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path, file })
    }

    pub fn append(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        writeln!(
            self.file,
            "{step},{},{},{},{},{},{},{},{},{}",
            b.t, b.alpha_bar_t, b.diff_noise, b.diff_recon, b.id_sim, b.id_region, b.vae_recon, b.kl, b.total
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn noise_loss_cases() {
        let a = t(&[0.5, -1.0, 2.0, 0.0], &[1, 1, 2, 2]);
        assert_eq!(s(&diff_noise(&a, &a).unwrap()), 0.0);
        let z = a.zeros_like().unwrap();
        assert_eq!(s(&diff_noise(&z, &z.ones_like().unwrap()).unwrap()), 1.0);
        // (0.25 + 1 + 4 + 0) / 4
        assert!((s(&diff_noise(&z, &a).unwrap()) - 1.3125).abs() < 1e-15);
        assert!(diff_noise(&a, &t(&[1.0, 2.0], &[2])).is_err());
    }

    #[test]
    fn constant_offset_recon() {
        let a = t(&[0.3, -0.2, 0.9], &[3]);
        let b = (&a + 0.25).unwrap();
        assert!((s(&diff_recon(&a, &b).unwrap()) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_cases() {
        let e = t(&[0.6, 0.8], &[1, 2]);
        assert!(s(&cosine_distance(&e, &e).unwrap()).abs() < 1e-12);
        let o = t(&[-0.8, 0.6], &[1, 2]);
        assert!((s(&cosine_distance(&e, &o).unwrap()) - 1.0).abs() < 1e-12);
        assert!((s(&cosine_distance(&e, &e.neg().unwrap()).unwrap()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bce_saturation_and_half() {
        let m = t(&[1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let l = t(&[20.0, -20.0, -20.0, 20.0], &[1, 1, 2, 2]);
        assert!(s(&id_region(&[l], &[m.clone()]).unwrap()) <= 1e-8);
        let z = m.zeros_like().unwrap();
        let two = id_region(&[z.clone(), z], &[m.clone(), m.ones_like().unwrap()]).unwrap();
        assert!((s(&two) - std::f64::consts::LN_2).abs() <= 1e-9);
    }

    #[test]
    fn bce_by_hand() {
        // logits (ln 3, 0, -ln 3, 2) against (1, 1, 0, 0):
        // −ln σ(ln3) = ln(4/3); −ln ½ = ln 2; −ln(1 − σ(−ln3)) = ln(4/3);
        // −ln(1 − σ(2)) = ln(1 + e²).
        let l = t(&[3f64.ln(), 0.0, -(3f64.ln()), 2.0], &[1, 1, 2, 2]);
        let m = t(&[1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2]);
        let want = (2.0 * (4.0f64 / 3.0).ln() + 2f64.ln() + (1.0 + 2f64.exp()).ln()) / 4.0;
        assert!((s(&bce_with_logits(&l, &m).unwrap()) - want).abs() < 1e-14);
        assert!(id_region(&[l.clone()], &[]).is_err());
        assert!(id_region(&[l], &[t(&[1.0], &[1, 1, 1, 1])]).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let zero = t(&[0.0, 0.0], &[1, 2]);
        let (_, kl) = vae(&zero, &zero, &zero, &zero).unwrap();
        assert_eq!(s(&kl), 0.0);
        let (recon, kl) = vae(&zero, &zero, &t(&[1.0], &[1, 1]), &t(&[0.0], &[1, 1])).unwrap();
        assert_eq!(s(&recon), 0.0);
        assert!((s(&kl) - 0.5).abs() <= 1e-12);
        let bad = t(&[f64::NAN], &[1, 1]);
        assert!(matches!(vae(&zero, &zero, &bad, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn embedding_recon_is_squared_distance() {
        let a = t(&[1.0, 0.0], &[1, 2]);
        let b = t(&[0.0, 1.0], &[1, 2]);
        let z = t(&[0.0], &[1, 1]);
        let (recon, _) = vae(&a, &b, &z, &z).unwrap();
        assert!((s(&recon) - 2.0).abs() < 1e-15);
    }

    fn parts(v: f64) -> LossParts {
        let x = Tensor::new(v, &Device::Cpu).unwrap();
        LossParts {
            diff_noise: x.clone(),
            diff_recon: x.clone(),
            id_sim: x.clone(),
            id_region: x.clone(),
            vae_recon: x.clone(),
            kl: x,
        }
    }

    #[test]
    fn total_weighting() {
        let w = LossWeights::default();
        assert_eq!(s(&total(&parts(0.0), 0.5, &w).unwrap()), 0.0);
        let tot = total(&parts(1.0), 0.5, &w).unwrap();
        assert!((s(&tot) - 2.65001).abs() <= 1e-12);
        let b = LossBreakdown::from_parts(&parts(1.0), &tot, 500, 0.5).unwrap();
        assert!((b.weighted_total(&w) - b.total).abs() <= 1e-12);
        // ᾱ → 0 drops the time-weighted terms.
        let late = total(&parts(1.0), 0.0, &w).unwrap();
        assert!((s(&late) - (1.0 + 0.1 + 1.0 + 1e-5)).abs() < 1e-12);
    }

    #[test]
    fn log_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let b = LossBreakdown::from_parts(&parts(1.0), &Tensor::new(2.0, &Device::Cpu).unwrap(), 3, 0.5).unwrap();
        LossLog::open(&p).unwrap().append(0, &b).unwrap();
        LossLog::open(&p).unwrap().append(1, &b).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], LOG_HEADER);
        assert!(lines[2].starts_with("1,3,0.5,1,"));
    }
}

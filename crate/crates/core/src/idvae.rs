//! Variational autoencoder over identity embeddings, and orthogonal
//! sampling of new identities in its latent space.

use candle_core::{DType, Device, Tensor};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Linear, Scope};
use crate::perception::IdentityEmbedding;

pub const LOG_VAR_CLAMP: f64 = 20.0;
/// Projections shorter than this are rejected and redrawn.
pub const NEAR_PARALLEL_TOL: f64 = 1e-4;
pub const MAX_SAMPLING_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdVaeConfig {
    pub id_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl Default for IdVaeConfig {
    fn default() -> Self {
        Self {
            id_dim: 64,
            latent_dim: 32,
            hidden: 128,
        }
    }
}

/// Encoder `d_id → 2·d_lat` (mean and log-variance halves) and decoder
/// `d_lat → d_id`, each two hidden SiLU layers wide.
#[derive(Debug, Clone)]
pub struct IdVae {
    cfg: IdVaeConfig,
    encoder: [Linear; 3],
    decoder: [Linear; 3],
}

/// Posterior parameters for one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IdLatent {
    pub mu: Vec<f64>,
    /// Clamped to `[-20, 20]`.
    pub log_var: Vec<f64>,
    pub sample: Option<Vec<f64>>,
}

impl IdVae {
    pub fn new(s: &Scope, cfg: IdVaeConfig) -> Result<Self> {
        ensure(cfg.id_dim > 0 && cfg.latent_dim > 0 && cfg.hidden > 0, || {
            "ID-VAE dimensions must be positive".into()
        })?;
        let e = s.pp("encoder");
        let d = s.pp("decoder");
        Ok(Self {
            cfg,
            encoder: [
                Linear::new(&e.pp("0"), cfg.id_dim, cfg.hidden)?,
                Linear::new(&e.pp("1"), cfg.hidden, cfg.hidden)?,
                Linear::new(&e.pp("2"), cfg.hidden, 2 * cfg.latent_dim)?,
            ],
            decoder: [
                Linear::new(&d.pp("0"), cfg.latent_dim, cfg.hidden)?,
                Linear::new(&d.pp("1"), cfg.hidden, cfg.hidden)?,
                Linear::new(&d.pp("2"), cfg.hidden, cfg.id_dim)?,
            ],
        })
    }

    pub fn config(&self) -> IdVaeConfig {
        self.cfg
    }

    fn dtype_device(&self) -> (DType, Device) {
        let w = self.encoder[0].weight();
        (w.dtype(), w.device().clone())
    }

    /// `(B, d_id)` → `(μ, log σ²)`, each `(B, d_lat)`.
    pub fn encode_tensor(&self, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.encoder[0].forward(e)?.silu()?;
        let h = self.encoder[1].forward(&h)?.silu()?;
        let out = self.encoder[2].forward(&h)?;
        let d = self.cfg.latent_dim;
        let mu = out.narrow(1, 0, d)?;
        let log_var = out.narrow(1, d, d)?.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
        Ok((mu, log_var))
    }

    /// `(B, d_lat)` → unnormalized `(B, d_id)`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.decoder[0].forward(z)?.silu()?;
        let h = self.decoder[1].forward(&h)?.silu()?;
        self.decoder[2].forward(&h)
    }

    pub fn encode(&self, e: &IdentityEmbedding) -> Result<IdLatent> {
        ensure(e.dim() == self.cfg.id_dim, || {
            format!("embedding dim {} != ID-VAE input {}", e.dim(), self.cfg.id_dim)
        })?;
        ensure(e.vector.iter().all(|v| v.is_finite()), || {
            "non-finite identity embedding".into()
        })?;
        let (dtype, dev) = self.dtype_device();
        let x = Tensor::from_slice(&e.vector, (1, e.dim()), &dev)?.to_dtype(dtype)?;
        let (mu, lv) = self.encode_tensor(&x)?;
        Ok(IdLatent {
            mu: row(&mu)?,
            log_var: row(&lv)?,
            sample: None,
        })
    }

    /// Decode a latent and renormalize to a unit control embedding.
    pub fn decode(&self, latent: &[f64]) -> Result<IdentityEmbedding> {
        ensure(latent.len() == self.cfg.latent_dim, || {
            format!("latent dim {} != {}", latent.len(), self.cfg.latent_dim)
        })?;
        let (dtype, dev) = self.dtype_device();
        let z = Tensor::from_slice(latent, (1, latent.len()), &dev)?.to_dtype(dtype)?;
        IdentityEmbedding::unit(row(&self.decode_tensor(&z)?)?)
    }
}

fn row(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Training: `μ + exp(½ log σ²) ⊙ noise`. Inference (or no noise): `μ`.
pub fn reparameterize(lat: &IdLatent, noise: Option<&[f64]>, training: bool) -> Result<Vec<f64>> {
    match (training, noise) {
        (true, Some(n)) => {
            ensure(n.len() == lat.mu.len(), || "noise and latent dims differ".into())?;
            Ok(lat
                .mu
                .iter()
                .zip(&lat.log_var)
                .zip(n)
                .map(|((m, lv), e)| m + (0.5 * lv.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).exp() * e)
                .collect())
        }
        _ => Ok(lat.mu.clone()),
    }
}

/// Differentiable reparameterization over `(B, d_lat)` tensors.
pub fn reparameterize_tensor(mu: &Tensor, log_var: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let std = (log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)? * 0.5)?.exp()?;
    Ok((mu + (std * noise)?)?)
}

/// Component of `r` orthogonal to `v`: `u = r − (⟨r,v⟩/‖v‖²) v`.
///
/// Fails with [`Error::DegenerateDirection`] when `‖v‖ ≤ 1e-8` and with
/// [`Error::NearParallel`] when `‖u‖ ≤ tol`.
pub fn orthogonal_project<T: Float>(r: &[T], v: &[T], tol: f64) -> Result<Vec<T>> {
    ensure(r.len() == v.len(), || {
        format!("vector lengths differ ({} vs {})", r.len(), v.len())
    })?;
    let vv = v.iter().fold(T::zero(), |acc, &x| acc + x * x);
    let v_norm = vv.sqrt().to_f64().unwrap_or(f64::NAN);
    if !(v_norm > 1e-8) {
        return Err(Error::DegenerateDirection { norm: v_norm });
    }
    let rv = r.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    let coef = rv / vv;
    let u: Vec<T> = r.iter().zip(v).map(|(&a, &b)| a - coef * b).collect();
    let u_norm = u
        .iter()
        .fold(T::zero(), |acc, &x| acc + x * x)
        .sqrt()
        .to_f64()
        .unwrap_or(f64::NAN);
    if !(u_norm > tol) {
        return Err(Error::NearParallel { norm: u_norm });
    }
    Ok(u)
}

/// Result of sampling an identity orthogonal to a source.
#[derive(Debug, Clone)]
pub struct AnonymousIdentity {
    /// Unit control embedding `normalize(D(u))`.
    pub embedding: IdentityEmbedding,
    /// Source latent `v = μ(E(e_x))`.
    pub source_latent: Vec<f64>,
    /// Gaussian draw that was accepted.
    pub draw: Vec<f64>,
    /// Projected latent fed to the decoder.
    pub latent: Vec<f64>,
    pub attempts: usize,
}

/// Encode the source to its posterior mean `v`, draw `r ~ N(0, I)`, project
/// onto `v`'s orthogonal complement (redrawing near-parallel draws) and
/// decode. Deterministic per `seed`.
pub fn sample_anonymous_identity(source: &IdentityEmbedding, vae: &IdVae, seed: u64) -> Result<AnonymousIdentity> {
    let v = vae.encode(source)?.mu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_SAMPLING_ATTEMPTS {
        let r: Vec<f64> = (0..v.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        match orthogonal_project(&r, &v, NEAR_PARALLEL_TOL) {
            Ok(u) => {
                let embedding = vae.decode(&u)?;
                return Ok(AnonymousIdentity {
                    embedding,
                    source_latent: v,
                    draw: r,
                    latent: u,
                    attempts: attempt,
                });
            }
            Err(Error::NearParallel { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::SamplingFailure {
        attempts: MAX_SAMPLING_ATTEMPTS,
    })
}

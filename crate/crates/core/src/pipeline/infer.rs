use candle_core::Tensor;

use super::{Models, Sample};
use crate::diffusion::{ddim_sample_clamped, seeded_normal};
use crate::error::{ensure, Error, Result};
use crate::idvae::{sample_anonymous_identity, AnonymousIdentity};
use crate::perception::{embeddings_tensor, IdentityEmbedder, IdentityEmbedding};
use crate::raster::ImageTensor;

pub const DEFAULT_SAMPLING_STEPS: usize = 40;

/// One anonymized image with the identity it was steered towards.
#[derive(Debug, Clone)]
pub struct Anonymized {
    pub image: ImageTensor,
    pub e_ctrl: IdentityEmbedding,
    pub identity: AnonymousIdentity,
}

/// Independent streams derived from the user seed.
struct Streams {
    identity: u64,
    degrade: u64,
    noise: u64,
}

fn streams(seed: u64) -> Streams {
    let mix = |k: u64| {
        let mut z = seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        // splitmix64 finalizer
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    Streams {
        identity: mix(1),
        degrade: mix(2),
        noise: mix(3),
    }
}

fn check_inputs(models: &Models, samples: &[Sample], seeds: &[u64], steps: usize) -> Result<()> {
    if !models.is_frozen() {
        return Err(Error::Validation("inference requires frozen models".into()));
    }
    ensure(!samples.is_empty(), || "no images to process".into())?;
    ensure(samples.len() == seeds.len(), || "one seed per image is required".into())?;
    ensure(steps > 0, || "sampling steps must be positive".into())?;
    let size = models.config().image_size;
    for s in samples {
        ensure(s.image.shape() == (3, size, size), || {
            format!("image shape {:?} does not match the model's 3×{size}×{size}", s.image.shape())
        })?;
    }
    Ok(())
}

/// Generate from `z_T` under the identity control `e_ctrl` (one row per
/// sample). A pure forward pass: no gradients, no guidance. The latent is
/// the image itself, so the clean estimate is kept in `[-1, 1]`.
fn generate(models: &Models, samples: &[Sample], e_ctrl: &[IdentityEmbedding], seeds: &[u64], steps: usize) -> Result<Vec<ImageTensor>> {
    let (dtype, dev) = (models.dtype(), models.device().clone());
    let st: Vec<Streams> = seeds.iter().map(|&s| streams(s)).collect();
    let sources: Vec<&Sample> = samples.iter().collect();
    let degrade_seeds: Vec<u64> = st.iter().map(|s| s.degrade).collect();
    let e = embeddings_tensor(e_ctrl, dtype, &dev)?;
    let cond = models.condition(&sources, &e, &degrade_seeds)?;
    let (c, h, w) = samples[0].image.shape();
    let noise = st
        .iter()
        .map(|s| seeded_normal((1, c, h, w), s.noise, dtype, &dev))
        .collect::<Result<Vec<_>>>()?;
    let z_t = Tensor::cat(&noise, 0)?;
    let b = samples.len();
    let denoiser = &models.denoiser;
    let z0 = ddim_sample_clamped(
        |z, t| Ok(denoiser.forward(z, &vec![t; b], &cond)?.eps_hat),
        z_t,
        steps,
        models.schedule(),
        1.0,
    )?;
    (0..b).map(|i| ImageTensor::from_tensor(&z0.get(i)?)).collect()
}

/// Replace the identity of every sample with one sampled orthogonally to
/// its own, keeping pose, expression and background. Deterministic in
/// `(sample, seed, models)`.
pub fn anonymize(models: &Models, samples: &[Sample], seeds: &[u64], steps: usize) -> Result<Vec<Anonymized>> {
    check_inputs(models, samples, seeds, steps)?;
    let embedder = &models.perception.embedder;
    let ids = samples
        .iter()
        .zip(seeds)
        .map(|(s, &seed)| sample_anonymous_identity(&embedder.embed(&s.image)?, &models.idvae, streams(seed).identity))
        .collect::<Result<Vec<_>>>()?;
    let e_ctrl: Vec<IdentityEmbedding> = ids.iter().map(|a| a.embedding.clone()).collect();
    let images = generate(models, samples, &e_ctrl, seeds, steps)?;
    Ok(images
        .into_iter()
        .zip(ids)
        .map(|(image, identity)| Anonymized {
            image,
            e_ctrl: identity.embedding.clone(),
            identity,
        })
        .collect())
}

/// Regenerate every sample under its own identity, passed through the
/// identity autoencoder's posterior mean. Positive control for the
/// identity channel.
pub fn reconstruct(models: &Models, samples: &[Sample], seeds: &[u64], steps: usize) -> Result<Vec<ImageTensor>> {
    check_inputs(models, samples, seeds, steps)?;
    let embedder = &models.perception.embedder;
    let e_ctrl = samples
        .iter()
        .map(|s| {
            let mu = models.idvae.encode(&embedder.embed(&s.image)?)?.mu;
            models.idvae.decode(&mu)
        })
        .collect::<Result<Vec<_>>>()?;
    generate(models, samples, &e_ctrl, seeds, steps)
}

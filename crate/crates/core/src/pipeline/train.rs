use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize_rows, sample_pair, Corpus, Models, Pair, TrainConfig};
use crate::diffusion::{add_noise_batch, recover_z0_batch, seeded_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::idvae::reparameterize_tensor;
use crate::losses::{self, LossBreakdown, LossParts};
use crate::nn::{backward, AdamW};
use crate::perception::{embeddings_tensor, IdentityEmbedder};
use crate::raster::stack_images;

/// Everything random about one optimization step, drawn up front so a
/// batch can be replayed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pairs: Vec<Pair>,
    /// One timestep per pair.
    pub ts: Vec<usize>,
    pub noise_seed: u64,
    pub latent_seed: u64,
    pub degrade_seeds: Vec<u64>,
}

impl Batch {
    pub fn alpha_bars(&self, s: &NoiseSchedule) -> Result<Vec<f64>> {
        self.ts.iter().map(|&t| s.alpha_bar(t)).collect()
    }

    /// Rounded mean timestep, for logs.
    pub fn mean_t(&self) -> usize {
        let n = self.ts.len().max(1);
        (self.ts.iter().sum::<usize>() + n / 2) / n
    }
}

/// Seeded, resumable optimization of all networks jointly.
pub struct Trainer {
    cfg: TrainConfig,
    models: Models,
    corpus: Corpus,
    opt: AdamW,
    step: usize,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    // Mix the step into the seed so resumed runs replay the same draws.
    let mixed = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, models: Models, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        if models.is_frozen() {
            return Err(Error::Validation("cannot train a frozen model".into()));
        }
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        Ok(Self {
            cfg,
            models,
            corpus,
            opt,
            step: 0,
        })
    }

    /// Continue from a saved optimizer state at `step`.
    pub fn resume(cfg: TrainConfig, models: Models, corpus: Corpus, mut opt: AdamW, step: usize) -> Result<Self> {
        let mut t = Self::new(cfg, models, corpus)?;
        opt.lr = t.cfg.lr;
        opt.weight_decay = t.cfg.weight_decay;
        t.opt = opt;
        t.step = step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Number of completed optimization steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn into_models(self) -> Models {
        self.models
    }

    /// Draw the batch for optimization step `step`.
    pub fn draw_batch(&self, step: usize) -> Result<Batch> {
        let mut rng = step_rng(self.cfg.seed, step);
        let pairs = (0..self.cfg.batch)
            .map(|_| sample_pair(&self.corpus, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let big_t = self.models.schedule().timesteps();
        let ts = (0..self.cfg.batch).map(|_| rng.random_range(1..=big_t)).collect();
        Ok(Batch {
            pairs,
            ts,
            noise_seed: rng.random(),
            latent_seed: rng.random(),
            degrade_seeds: (0..self.cfg.batch).map(|_| rng.random()).collect(),
        })
    }

    /// Forward pass of every loss term on `batch`; returns the weighted
    /// total (attached to the graph) and its parts.
    pub fn losses(&self, batch: &Batch) -> Result<(Tensor, LossParts)> {
        let m = &self.models;
        let (dtype, dev) = (m.dtype(), m.device().clone());
        let e_y_list: Vec<_> = batch.pairs.iter().map(|p| self.corpus.embeddings[p.y].clone()).collect();
        let e_y = embeddings_tensor(&e_y_list, dtype, &dev)?;
        let (mu, log_var) = m.idvae.encode_tensor(&e_y)?;
        let noise = seeded_normal(mu.shape(), batch.latent_seed, dtype, &dev)?;
        let z = reparameterize_tensor(&mu, &log_var, &noise)?;
        let e_ctrl = normalize_rows(&m.idvae.decode_tensor(&z)?)?;

        let sources: Vec<_> = batch.pairs.iter().map(|p| &self.corpus.samples[p.x]).collect();
        let cond = m.condition(&sources, &e_ctrl, &batch.degrade_seeds)?;
        let images: Vec<_> = sources.iter().map(|s| &s.image).collect();
        let z0 = stack_images(&images, dtype, &dev)?;
        let eps = seeded_normal(z0.shape(), batch.noise_seed, dtype, &dev)?;
        let z_t = add_noise_batch(&z0, &batch.ts, &eps, m.schedule())?;
        let out = m.denoiser.forward(&z_t, &batch.ts, &cond)?;
        let z0_hat = recover_z0_batch(&z_t, &out.eps_hat, &batch.ts, m.schedule())?;
        let alpha_bars = batch.alpha_bars(m.schedule())?;
        let (diff_recon, ab) = losses::alpha_weighted(&losses::per_sample_mse(&z0, &z0_hat)?, &alpha_bars)?;
        let e_hat = m.perception.embedder.embed_tensor(&z0_hat)?;
        let (id_sim, _) = losses::alpha_weighted(&losses::per_sample_cosine_distance(&e_hat, &e_ctrl)?, &alpha_bars)?;

        let masks: Vec<_> = sources.iter().map(|s| s.mask.clone()).collect();
        let targets = losses::region_targets(&masks, &m.denoiser.config().grids(), dtype, &dev)?;
        let (vae_recon, kl) = losses::vae(&e_y, &e_ctrl, &mu, &log_var)?;
        let parts = LossParts {
            diff_noise: losses::diff_noise(&eps, &out.eps_hat)?,
            diff_recon,
            id_sim,
            id_region: losses::id_region(&out.gate_logits, &targets)?,
            vae_recon,
            kl,
        };
        let total = losses::total(&parts, ab, &self.cfg.weights)?;
        Ok((total, parts))
    }

    /// One optimizer update on `batch`. Aborts without touching the
    /// parameters when any loss term is non-finite.
    pub fn step_on(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let (total, parts) = self.losses(batch)?;
        let ab = batch.alpha_bars(self.models.schedule())?;
        let mean_ab = ab.iter().sum::<f64>() / ab.len() as f64;
        let breakdown = LossBreakdown::from_parts(&parts, &total, batch.mean_t(), mean_ab)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                t: batch.mean_t(),
                terms: breakdown.terms(),
            });
        }
        let grads = backward(&total)?;
        self.opt.step(self.models.store(), &grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Draw the next batch and take one step.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.draw_batch(self.step)?;
        self.step_on(&batch)
    }

    /// Gradient magnitude per parameter namespace prefix (the first
    /// `depth` dot-separated components) for one batch, without updating.
    pub fn gradient_audit(&self, batch: &Batch, depth: usize) -> Result<Vec<(String, f64)>> {
        let (total, _) = self.losses(batch)?;
        let grads = total.backward()?;
        let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
        for (name, var) in self.models.store().vars() {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?,
                None => 0.0,
            };
            *groups.entry(key).or_default() += g;
        }
        Ok(groups.into_iter().map(|(k, v)| (k, v.sqrt())).collect())
    }
}

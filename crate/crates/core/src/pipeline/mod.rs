//! Training loop, checkpoints and the anonymization path.

mod checkpoint;
mod experiment;
mod infer;
mod train;

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{ensure, Error, Result};
use crate::harmonizer::{Denoiser, DenoiserConfig};
use crate::idvae::{IdVae, IdVaeConfig};
use crate::losses::LossWeights;
use crate::nn::ParamStore;
use crate::perception::{
    fit_nuisance, synth_face, toy_face_mask, toy_landmarks, FaceMask, IdentityEmbedder, IdentityEmbedding,
    LandmarkLayout, LandmarkSet, ManifestRecord, SemanticEncoder, SyntheticFaceSpec, ToyIdentityEmbedder,
    ToySemanticEncoder, IDENTITY_FACTORS,
};
use crate::raster::ImageTensor;
use crate::recomposer::{
    degrade, fourier_landmark_features, stack_tokens, ConditionTokens, DegradeStrength, Recomposer, RecomposerConfig,
};

pub use checkpoint::{
    read_manifest as read_checkpoint_manifest,
    load_checkpoint, read_archive, save_checkpoint, write_archive, ArchiveEntry, CheckpointManifest, LoadedCheckpoint,
    ARCHIVE_MAGIC, CHECKPOINT_FORMAT, MANIFEST_FILE,
};
pub use experiment::{evaluate_toy, run_toy_experiment, train_toy, ToyExperimentConfig, ToyExperimentReport};
pub use infer::{anonymize, reconstruct, Anonymized, DEFAULT_SAMPLING_STEPS};
pub use train::{Batch, Trainer};

/// Architecture and conditioning settings; everything a checkpoint needs
/// to rebuild the networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub id_dim: usize,
    pub landmarks: LandmarkLayout,
    pub degrade: DegradeStrength,
    pub idvae: IdVaeConfig,
    pub recomposer: RecomposerConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            id_dim: 64,
            landmarks: LandmarkLayout::default(),
            degrade: DegradeStrength::default(),
            idvae: IdVaeConfig::default(),
            recomposer: RecomposerConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.idvae.id_dim == self.id_dim && self.recomposer.id_dim == self.id_dim, || {
            format!(
                "identity width mismatch: model {}, ID-VAE {}, recomposer {}",
                self.id_dim, self.idvae.id_dim, self.recomposer.id_dim
            )
        })?;
        ensure(self.recomposer.token_dim == self.denoiser.token_dim, || {
            format!(
                "condition token width {} != denoiser token width {}",
                self.recomposer.token_dim, self.denoiser.token_dim
            )
        })?;
        ensure(self.denoiser.image_size == self.image_size && self.denoiser.channels == 3, || {
            "denoiser must operate on the RGB image size".into()
        })?;
        self.degrade.validate()?;
        self.denoiser.validate()
    }
}

/// Optimization settings plus the model and schedule they train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    /// Dataset manifest (JSON lines), relative to the working directory.
    pub manifest: Option<String>,
    /// Steps between checkpoints; `0` saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            manifest: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.steps > 0 && self.batch > 0, || "steps and batch must be positive".into())?;
        ensure(self.lr.is_finite() && self.lr > 0.0, || format!("learning rate {} must be positive", self.lr))?;
        ensure(self.weight_decay.is_finite() && self.weight_decay >= 0.0, || {
            "weight decay must be nonnegative".into()
        })?;
        self.model.validate()?;
        self.schedule.build().map(|_| ())
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(json)))
}

/// The fixed toy providers the networks are conditioned on.
#[derive(Debug, Clone)]
pub struct Perception {
    pub embedder: ToyIdentityEmbedder,
    pub semantic: ToySemanticEncoder,
    pub layout: LandmarkLayout,
}

impl Perception {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            embedder: ToyIdentityEmbedder::new(cfg.id_dim, cfg.image_size)?,
            semantic: ToySemanticEncoder::new(cfg.image_size, cfg.recomposer.semantic_dim)?,
            layout: cfg.landmarks,
        })
    }
}

/// One image with the side information the conditioning path needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub mask: FaceMask,
    pub landmarks: LandmarkSet,
    pub identity: Option<u32>,
}

impl Sample {
    /// Render a manifest row with ground-truth mask and landmarks.
    pub fn from_record(rec: &ManifestRecord, layout: LandmarkLayout) -> Result<Self> {
        let spec = rec.spec()?;
        Ok(Self {
            image: synth_face(&spec, rec.seed)?,
            mask: toy_face_mask(&spec)?,
            landmarks: toy_landmarks(&spec, layout)?,
            identity: Some(rec.identity_id),
        })
    }

    /// Estimate mask and landmarks of an arbitrary image by fitting the
    /// generator's nuisance factors.
    pub fn from_image(image: ImageTensor, layout: LandmarkLayout) -> Result<Self> {
        let fit = fit_nuisance(&image)?;
        let spec = SyntheticFaceSpec::new(vec![0.5; IDENTITY_FACTORS], fit.nuisance, image.height())?;
        Ok(Self {
            mask: toy_face_mask(&spec)?,
            landmarks: toy_landmarks(&spec, layout)?,
            image,
            identity: None,
        })
    }
}

/// Rendered training corpus with cached identity embeddings.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<ManifestRecord>,
    pub samples: Vec<Sample>,
    pub embeddings: Vec<IdentityEmbedding>,
    by_identity: BTreeMap<u32, Vec<usize>>,
}

impl Corpus {
    pub fn build(records: Vec<ManifestRecord>, perception: &Perception) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dataset("manifest has no records".into()));
        }
        let mut samples = Vec::with_capacity(records.len());
        let mut embeddings = Vec::with_capacity(records.len());
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let s = Sample::from_record(r, perception.layout)?;
            embeddings.push(perception.embedder.embed(&s.image)?);
            samples.push(s);
            by_identity.entry(r.identity_id).or_default().push(i);
        }
        Ok(Self {
            records,
            samples,
            embeddings,
            by_identity,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> Vec<u32> {
        self.by_identity.keys().copied().collect()
    }

    pub fn renders_of(&self, identity: u32) -> &[usize] {
        self.by_identity.get(&identity).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Indices of a training pair sharing one identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    /// Source image: reconstructed, degraded and used for landmarks.
    pub x: usize,
    /// Identity reference.
    pub y: usize,
    pub identity: u32,
}

/// Pick an identity uniformly, then two distinct renders of it (or the
/// single render twice).
pub fn sample_pair(corpus: &Corpus, rng: &mut impl Rng) -> Result<Pair> {
    let ids: Vec<&u32> = corpus.by_identity.keys().collect();
    if ids.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty corpus".into()));
    }
    let identity = *ids[rng.random_range(0..ids.len())];
    let renders = &corpus.by_identity[&identity];
    if renders.len() < 2 {
        return Ok(Pair {
            x: renders[0],
            y: renders[0],
            identity,
        });
    }
    let a = rng.random_range(0..renders.len());
    let mut b = rng.random_range(0..renders.len() - 1);
    if b >= a {
        b += 1;
    }
    Ok(Pair {
        x: renders[a],
        y: renders[b],
        identity,
    })
}

/// All trainable networks over one parameter store, plus the schedule and
/// toy providers.
#[derive(Debug, Clone)]
pub struct Models {
    cfg: ModelConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    pub idvae: IdVae,
    pub recomposer: Recomposer,
    pub denoiser: Denoiser,
    pub perception: Arc<Perception>,
}

/// Parameter namespaces, one archive each.
pub const NAMESPACES: [&str; 4] = ["denoiser", "harmonizer", "recomposer", "idvae"];

impl Models {
    pub fn new(cfg: ModelConfig, schedule: ScheduleConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::from_store(cfg, schedule, ParamStore::new(seed, dtype, Device::Cpu))
    }

    /// Build the networks over `store`, creating any missing parameters.
    pub fn from_store(cfg: ModelConfig, schedule: ScheduleConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let idvae = IdVae::new(&root.pp("idvae"), cfg.idvae)?;
        let recomposer = Recomposer::new(&root.pp("recomposer"), cfg.recomposer)?;
        let denoiser = Denoiser::new(&root, cfg.denoiser)?;
        Ok(Self {
            cfg,
            schedule: schedule.build()?,
            idvae,
            recomposer,
            denoiser,
            perception: Arc::new(Perception::new(&cfg)?),
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Detached, read-only copy for inference.
    pub fn frozen(&self) -> Result<Self> {
        let store = self.store.frozen_copy()?;
        let mut out = Self::from_store(self.cfg, self.schedule.config(), store)?;
        out.perception = self.perception.clone();
        Ok(out)
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// Build condition tokens for a batch of sources and control
    /// embeddings `(B, d_id)`, degrading each source with its own seed.
    pub fn condition(&self, sources: &[&Sample], e_ctrl: &Tensor, degrade_seeds: &[u64]) -> Result<ConditionTokens> {
        ensure(sources.len() == degrade_seeds.len() && sources.len() == e_ctrl.dim(0)?, || {
            "sources, seeds and control embeddings must align".into()
        })?;
        let rc = self.cfg.recomposer;
        let sem = &self.perception.semantic;
        let mut sem_rows = Vec::with_capacity(sources.len());
        let mut lm_rows = Vec::with_capacity(sources.len());
        let k = sources.first().map(|s| s.landmarks.len()).unwrap_or(0);
        for (s, &seed) in sources.iter().zip(degrade_seeds) {
            let xd = degrade(&s.image, &s.mask, seed, &self.cfg.degrade)?;
            sem_rows.push(sem.encode(&xd)?);
            ensure(s.landmarks.len() == k, || "landmark counts differ within a batch".into())?;
            lm_rows.push(fourier_landmark_features(&s.landmarks, rc.n_freq)?);
        }
        let (dtype, dev) = (self.dtype(), self.device().clone());
        let sem_t = stack_tokens(&sem_rows, sem.num_tokens(), sem.token_dim(), dtype, &dev)?;
        let lm_t = stack_tokens(&lm_rows, k, 4 * rc.n_freq, dtype, &dev)?;
        let non_id = self.recomposer.nonid_embedding(&sem_t, &lm_t)?.output;
        let id = self.recomposer.project_identity(e_ctrl)?;
        self.recomposer.align(&non_id, &id)
    }
}

/// Scale every row of `(B, d)` to unit length.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Identity label of each render, for retrieval.
pub fn labels(samples: &[Sample]) -> Result<Vec<u32>> {
    samples
        .iter()
        .map(|s| s.identity.ok_or_else(|| Error::Dataset("sample has no identity label".into())))
        .collect()
}

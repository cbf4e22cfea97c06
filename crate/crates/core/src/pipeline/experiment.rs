//! Controlled end-to-end check that identity and attributes are decoupled:
//! train on a synthetic corpus, then anonymize and reconstruct renders the
//! model never saw.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{anonymize, config_hash, labels, reconstruct, Corpus, Models, Sample, TrainConfig, Trainer};
use crate::error::{ensure, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{attribute_eval, mean_pairwise_cosine, retrieval_eval, EvaluationReport};
use crate::perception::{generate_manifest, held_out_renders, CorpusConfig, IdentityEmbedder, LandmarkLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyExperimentConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    /// Fresh renders per identity used as queries.
    pub held_out_per_identity: usize,
    pub held_out_seed: u64,
    pub sampling_steps: usize,
    /// Anonymizations of one query used to measure identity diversity.
    pub diversity_variants: usize,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        let mut train = TrainConfig {
            steps: 3000,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        train.schedule.beta_end = 0.01;
        Self {
            corpus: CorpusConfig::default(),
            train,
            held_out_per_identity: 1,
            held_out_seed: 99,
            sampling_steps: super::DEFAULT_SAMPLING_STEPS,
            diversity_variants: 50,
        }
    }
}

/// Everything the experiment measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyExperimentReport {
    pub steps: usize,
    pub final_loss: f64,
    pub train_seconds: f64,
    pub evaluation: EvaluationReport,
    /// Mean pairwise cosine of the sampled control identities behind the
    /// diversity variants.
    pub control_diversity: f64,
}

impl ToyExperimentReport {
    /// Pose error of anonymizations over that of reconstructions.
    pub fn pose_ratio(&self) -> Option<f64> {
        let rec = self.evaluation.reconstruction_attributes.as_ref()?;
        let an = &self.evaluation.attributes;
        let fitted = |r: &crate::metrics::AttributeReport| r.n_pairs > r.failed_fits;
        (fitted(rec) && fitted(an) && rec.pose_l2 > 0.0).then(|| an.pose_l2 / rec.pose_l2)
    }
}

/// Train from scratch, calling `on_step(step, losses)` after every update,
/// and return the frozen models.
pub fn train_toy(cfg: &ToyExperimentConfig, mut on_step: impl FnMut(usize, &LossBreakdown)) -> Result<(Models, f64)> {
    let records = generate_manifest(&cfg.corpus)?;
    let models = Models::new(cfg.train.model, cfg.train.schedule, cfg.train.seed, DType::F32)?;
    let corpus = Corpus::build(records, &models.perception)?;
    let mut trainer = Trainer::new(cfg.train.clone(), models, corpus)?;
    let mut last = f64::NAN;
    for _ in 0..cfg.train.steps {
        let b = trainer.train_step()?;
        last = b.total;
        on_step(trainer.step(), &b);
    }
    Ok((trainer.into_models().frozen()?, last))
}

/// Anonymize and reconstruct held-out renders of every training identity,
/// score identity retrieval against the training renders, attribute
/// preservation against the queries, and diversity over repeated
/// anonymizations of the first query.
pub fn evaluate_toy(models: &Models, cfg: &ToyExperimentConfig) -> Result<(EvaluationReport, f64)> {
    ensure(cfg.diversity_variants >= 2, || "diversity needs at least two variants".into())?;
    let records = generate_manifest(&cfg.corpus)?;
    let held = held_out_renders(&records, cfg.held_out_per_identity, cfg.held_out_seed)?;
    let gallery = Corpus::build(records, &models.perception)?;
    let layout = LandmarkLayout::default();
    let queries = held.iter().map(|r| Sample::from_record(r, layout)).collect::<Result<Vec<_>>>()?;
    let query_labels = labels(&queries)?;
    let gallery_labels = labels(&gallery.samples)?;
    let embedder = &models.perception.embedder;
    let seeds: Vec<u64> = (0..queries.len() as u64).collect();

    let anon = anonymize(models, &queries, &seeds, cfg.sampling_steps)?;
    let recon = reconstruct(models, &queries, &seeds, cfg.sampling_steps)?;
    let anon_images: Vec<_> = anon.iter().map(|a| a.image.clone()).collect();
    let embed_all = |imgs: &[crate::ImageTensor]| imgs.iter().map(|i| embedder.embed(i)).collect::<Result<Vec<_>>>();
    let originals: Vec<_> = queries.iter().map(|q| q.image.clone()).collect();

    let first = vec![queries[0].clone(); cfg.diversity_variants];
    let variant_seeds: Vec<u64> = (0..cfg.diversity_variants as u64).map(|k| 1_000 + k).collect();
    let variants = anonymize(models, &first, &variant_seeds, cfg.sampling_steps)?;
    let variant_images: Vec<_> = variants.iter().map(|a| a.image.clone()).collect();
    let controls: Vec<_> = variants.iter().map(|a| a.e_ctrl.clone()).collect();

    let report = EvaluationReport {
        config_hash: config_hash(cfg)?,
        anonymized: retrieval_eval(&embed_all(&anon_images)?, &query_labels, &gallery.embeddings, &gallery_labels)?,
        reconstructed: Some(retrieval_eval(&embed_all(&recon)?, &query_labels, &gallery.embeddings, &gallery_labels)?),
        attributes: attribute_eval(&originals, &anon_images, layout)?,
        reconstruction_attributes: Some(attribute_eval(&originals, &recon, layout)?),
        diversity_mean_cosine: Some(mean_pairwise_cosine(&embed_all(&variant_images)?)?),
    };
    Ok((report, mean_pairwise_cosine(&controls)?))
}

/// [`train_toy`] followed by [`evaluate_toy`].
pub fn run_toy_experiment(
    cfg: &ToyExperimentConfig,
    on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<(Models, ToyExperimentReport)> {
    let start = std::time::Instant::now();
    let (models, final_loss) = train_toy(cfg, on_step)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let (evaluation, control_diversity) = evaluate_toy(&models, cfg)?;
    Ok((
        models,
        ToyExperimentReport {
            steps: cfg.train.steps,
            final_loss,
            train_seconds,
            evaluation,
            control_diversity,
        },
    ))
}

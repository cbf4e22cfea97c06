#![allow(dead_code)]

use anonface::metrics::RetrievalReport;
use anonface::perception::{generate_manifest, CorpusConfig, IdentityEmbedding};
use anonface::pipeline::{Corpus, ModelConfig, Models, TrainConfig, Trainer};
use candle_core::DType;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A narrow model that keeps integration tests fast.
pub fn small_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.denoiser.width = 32;
    m.denoiser.attn_dim = 32;
    m.denoiser.heads = 2;
    m.denoiser.token_dim = 32;
    m.recomposer.token_dim = 32;
    m.recomposer.attn_dim = 32;
    m.recomposer.heads = 2;
    m.idvae.hidden = 64;
    m
}

pub fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 4,
        lr: 1e-3,
        seed: 11,
        model: small_model(),
        ..TrainConfig::default()
    }
}

pub fn corpus(models: &Models, identities: usize, renders: usize) -> Corpus {
    let recs = generate_manifest(&CorpusConfig {
        identities,
        renders_per_identity: renders,
        image_size: 32,
        seed: 5,
    })
    .unwrap();
    Corpus::build(recs, &models.perception).unwrap()
}

pub fn trainer(steps: usize) -> Trainer {
    trainer_with(small_train(steps))
}

pub fn trainer_with(cfg: TrainConfig) -> Trainer {
    let models = Models::new(cfg.model, cfg.schedule, cfg.seed, DType::F32).unwrap();
    let c = corpus(&models, 5, 3);
    Trainer::new(cfg, models, c).unwrap()
}

pub fn bits(t: &candle_core::Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect()
}

/// O(n²) reference: counts, for each query, the gallery items that beat
/// each relevant item, without sorting.
pub fn brute_force_retrieval(q: &[IdentityEmbedding], ql: &[u32], g: &[IdentityEmbedding], gl: &[u32]) -> RetrievalReport {
    let sim = |a: &IdentityEmbedding, b: &IdentityEmbedding| {
        let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
        dot / (a.norm() * b.norm())
    };
    let (mut t1, mut t5, mut ap, mut cs, mut used) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (qi, qv) in q.iter().enumerate() {
        let rel: Vec<usize> = (0..g.len()).filter(|&j| gl[j] == ql[qi]).collect();
        if rel.is_empty() {
            continue;
        }
        used += 1;
        let s: Vec<f64> = g.iter().map(|gv| sim(qv, gv)).collect();
        // Rank (0-based) of item j: items strictly more similar, plus equal ones earlier in the gallery.
        let rank = |j: usize| (0..g.len()).filter(|&k| s[k] > s[j] || (s[k] == s[j] && k < j)).count();
        let ranks: Vec<usize> = rel.iter().map(|&j| rank(j)).collect();
        if ranks.iter().any(|&r| r == 0) {
            t1 += 1.0;
        }
        if ranks.iter().any(|&r| r < 5) {
            t5 += 1.0;
        }
        let mut sum = 0.0;
        for &r in &ranks {
            let hits_at_or_before = ranks.iter().filter(|&&o| o <= r).count();
            sum += hits_at_or_before as f64 / (r + 1) as f64;
        }
        ap += sum / ranks.len() as f64;
        let dim = g[0].dim();
        let centroid: Vec<f64> =
            (0..dim).map(|k| rel.iter().map(|&j| g[j].vector[k]).sum::<f64>() / rel.len() as f64).collect();
        cs += sim(qv, &IdentityEmbedding::raw(centroid));
    }
    let n = used.max(1) as f64;
    RetrievalReport {
        top1: t1 / n,
        top5: t5 / n,
        map: ap / n,
        mean_cosine: cs / n,
        n_queries: q.len(),
        n_gallery: g.len(),
        excluded: q.len() - used,
    }
}

pub fn random_embeddings(rng: &mut ChaCha8Rng, n: usize, dim: usize, labels: u32) -> (Vec<IdentityEmbedding>, Vec<u32>) {
    let e = (0..n)
        .map(|_| IdentityEmbedding::unit((0..dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap())
        .collect();
    let l = (0..n).map(|_| rng.random_range(0..labels)).collect();
    (e, l)
}

pub fn assert_matches_oracle(a: &RetrievalReport, b: &RetrievalReport) {
    assert_eq!((a.top1, a.top5, a.n_queries, a.n_gallery, a.excluded), (b.top1, b.top5, b.n_queries, b.n_gallery, b.excluded));
    assert!((a.map - b.map).abs() <= 1e-9, "{} vs {}", a.map, b.map);
    assert!((a.mean_cosine - b.mean_cosine).abs() <= 1e-9);
}


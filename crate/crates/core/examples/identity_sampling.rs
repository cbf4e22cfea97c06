//! Sample anonymous identities for one face: each draw is projected
//! orthogonally to the source's latent before decoding.
//!
//! cargo run --example identity_sampling

use anonface::idvae::{orthogonal_project, sample_anonymous_identity, IdVae, IdVaeConfig, NEAR_PARALLEL_TOL};
use anonface::nn::ParamStore;
use anonface::perception::{generate_manifest, synth_face, CorpusConfig, IdentityEmbedder, ToyIdentityEmbedder};
use candle_core::{DType, Device};

fn main() -> anonface::Result<()> {
    // Geometry of the projection on its own.
    let r = [3.0, 1.0, -2.0];
    let v = [1.0, 1.0, 0.0];
    let u = orthogonal_project(&r, &v, NEAR_PARALLEL_TOL)?;
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    println!("r = {r:?}, v = {v:?} → u = {u:?}, ⟨u, v⟩ = {dot:e}");
    match orthogonal_project(&[2.0, 2.0, 0.0], &v, NEAR_PARALLEL_TOL) {
        Err(e) => println!("parallel draw rejected: {e}"),
        Ok(_) => unreachable!("a parallel draw has no orthogonal component"),
    }

    // Full sampler over an (untrained) identity autoencoder.
    let store = ParamStore::new(0, DType::F64, Device::Cpu);
    let vae = IdVae::new(&store.root().pp("idvae"), IdVaeConfig::default())?;
    let embedder = ToyIdentityEmbedder::new(64, 32)?;
    let rec = &generate_manifest(&CorpusConfig::default())?[0];
    let source = embedder.embed(&synth_face(&rec.spec()?, rec.seed)?)?;

    println!("\nseed  attempts  ⟨u, v⟩/(‖r‖‖v‖)  cos(e_ctrl, e_source)");
    for seed in 0..8 {
        let a = sample_anonymous_identity(&source, &vae, seed)?;
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = a.latent.iter().zip(&a.source_latent).map(|(x, y)| x * y).sum();
        let rel = dot.abs() / (norm(&a.draw) * norm(&a.source_latent));
        println!("{seed:>4} {:>9} {rel:>17.2e} {:>22.4}", a.attempts, a.embedding.cosine(&source));
    }
    Ok(())
}

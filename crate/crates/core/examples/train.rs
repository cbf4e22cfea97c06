//! Train every network jointly on the synthetic corpus, logging each loss
//! term, and save a resumable checkpoint.
//!
//! cargo run --release --example train -- [steps] [checkpoint_dir]

use anonface::losses::LossLog;
use anonface::perception::generate_manifest;
use anonface::pipeline::{save_checkpoint, Corpus, Models, ToyExperimentConfig, Trainer};
use candle_core::DType;

fn main() -> anonface::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(Ok(300), |s| s.parse()).map_err(|e| anonface::Error::Config(format!("steps: {e}")))?;
    let dir = args.next().unwrap_or_else(|| "out/checkpoint".into());

    let exp = ToyExperimentConfig::default();
    let cfg = anonface::pipeline::TrainConfig { steps, ..exp.train };
    let models = Models::new(cfg.model, cfg.schedule, cfg.seed, DType::F32)?;
    println!("{} parameters", models.store().num_parameters());
    let corpus = Corpus::build(generate_manifest(&exp.corpus)?, &models.perception)?;
    let mut trainer = Trainer::new(cfg, models, corpus)?;

    std::fs::create_dir_all(&dir).map_err(|e| anonface::Error::io(&dir, e))?;
    let mut log = LossLog::open(format!("{dir}/train_log.csv"))?;
    let start = std::time::Instant::now();
    for _ in 0..steps {
        let b = trainer.train_step()?;
        log.append(trainer.step(), &b)?;
        if trainer.step() % 50 == 0 || trainer.step() == steps {
            println!(
                "step {:>5} ({:>5.1}s)  total {:.4}  noise {:.4}  recon {:.4}  id {:.4}  region {:.4}  vae {:.4}  kl {:.2}",
                trainer.step(),
                start.elapsed().as_secs_f64(),
                b.total,
                b.diff_noise,
                b.diff_recon,
                b.id_sim,
                b.id_region,
                b.vae_recon,
                b.kl
            );
        }
    }
    let manifest = save_checkpoint(dir.as_ref(), trainer.models(), trainer.config(), trainer.step(), Some(trainer.optimizer()))?;
    println!("saved step {} to {dir} (config {})", manifest.step, &manifest.config_hash[..12]);
    Ok(())
}

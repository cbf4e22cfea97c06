//! Score a checkpoint: identity retrieval of anonymized and reconstructed
//! held-out renders against the training renders, attribute preservation,
//! and diversity of repeated anonymizations.
//!
//! cargo run --release --example evaluate -- <checkpoint_dir>

use anonface::pipeline::{evaluate_toy, load_checkpoint, ToyExperimentConfig};

fn main() -> anonface::Result<()> {
    let ckpt = std::env::args().nth(1).unwrap_or_else(|| "out/checkpoint".into());
    let loaded = load_checkpoint(ckpt.as_ref())?;
    let cfg = ToyExperimentConfig {
        train: loaded.manifest.config.clone(),
        ..ToyExperimentConfig::default()
    };
    let (report, control_diversity) = evaluate_toy(&loaded.models.frozen()?, &cfg)?;
    let rec = report.reconstructed.as_ref().expect("evaluate_toy reconstructs");
    let rec_attr = report.reconstruction_attributes.as_ref().expect("evaluate_toy reconstructs");
    println!("checkpoint step {}", loaded.manifest.step);
    println!("                top-1   top-5   mAP     cosine  pose L2  landmark L2  unfitted");
    for (name, r, a) in [("anonymized", &report.anonymized, &report.attributes), ("reconstructed", rec, rec_attr)] {
        println!(
            "{name:<14} {:>6.3} {:>7.3} {:>7.3} {:>8.3} {:>8.4} {:>12.3} {:>6}/{}",
            r.top1, r.top5, r.map, r.mean_cosine, a.pose_l2, a.landmark_l2, a.failed_fits, a.n_pairs
        );
    }
    println!(
        "diversity: output identities {:.3}, control identities {control_diversity:.3} (mean pairwise cosine)",
        report.diversity_mean_cosine.unwrap_or(f64::NAN)
    );
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| anonface::Error::Config(e.to_string()))?);
    Ok(())
}

//! Anonymize renders the model never saw. Writes one strip per face:
//! source, reconstruction under its own identity, then anonymized variants.
//!
//! cargo run --release --example anonymize -- <checkpoint_dir> [out_dir] [variants]

use anonface::perception::{generate_manifest, held_out_renders, CorpusConfig, IdentityEmbedder, LandmarkLayout};
use anonface::pipeline::{anonymize, load_checkpoint, reconstruct, Sample, DEFAULT_SAMPLING_STEPS};
use anonface::ImageTensor;

fn strip(images: &[&ImageTensor]) -> ImageTensor {
    let (c, h, w) = images[0].shape();
    let mut out = ImageTensor::zeros(c, h, w * images.len());
    for (k, img) in images.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, k * w + x, img.get(ch, y, x));
                }
            }
        }
    }
    out
}

fn main() -> anonface::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "out/checkpoint".into());
    let out = args.next().unwrap_or_else(|| "out/anonymized".into());
    let variants: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);

    let loaded = load_checkpoint(ckpt.as_ref())?;
    let models = loaded.models.frozen()?;
    let corpus = CorpusConfig {
        image_size: models.config().image_size,
        ..CorpusConfig::default()
    };
    let held = held_out_renders(&generate_manifest(&corpus)?, 1, 7)?;
    let layout = LandmarkLayout::default();
    let samples: Vec<Sample> = held.iter().take(6).map(|r| Sample::from_record(r, layout)).collect::<anonface::Result<_>>()?;
    let seeds: Vec<u64> = (0..samples.len() as u64).collect();
    let recon = reconstruct(&models, &samples, &seeds, DEFAULT_SAMPLING_STEPS)?;
    let mut anon = Vec::new();
    for k in 0..variants {
        let s: Vec<u64> = seeds.iter().map(|x| x * 1000 + k).collect();
        anon.push(anonymize(&models, &samples, &s, DEFAULT_SAMPLING_STEPS)?);
    }

    std::fs::create_dir_all(&out).map_err(|e| anonface::Error::io(&out, e))?;
    let embedder = &models.perception.embedder;
    println!("face  cos(source, reconstruction)  cos(source, anonymized) per variant");
    for (i, s) in samples.iter().enumerate() {
        let e = embedder.embed(&s.image)?;
        let mut row: Vec<&ImageTensor> = vec![&s.image, &recon[i]];
        row.extend(anon.iter().map(|v| &v[i].image));
        strip(&row).save_png(format!("{out}/face{i}.png"))?;
        let cos: Vec<String> = anon
            .iter()
            .map(|v| Ok(format!("{:.3}", embedder.embed(&v[i].image)?.cosine(&e))))
            .collect::<anonface::Result<_>>()?;
        println!("{i:>4} {:>30.3}  {}", embedder.embed(&recon[i])?.cosine(&e), cos.join(" "));
    }
    println!("strips written to {out}");
    Ok(())
}

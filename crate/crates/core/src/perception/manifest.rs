use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Nuisance, SyntheticFaceSpec, BACKGROUND_HUE_RANGE, EXPRESSION_RANGE, IDENTITY_FACTORS,
    ILLUMINATION_RANGE, POSE_RANGE,
};
use crate::error::{ensure, Error, Result};

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub identity_id: u32,
    pub identity_params: Vec<f64>,
    pub nuisance: Nuisance,
    pub image_size: usize,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn spec(&self) -> Result<SyntheticFaceSpec> {
        SyntheticFaceSpec::new(self.identity_params.clone(), self.nuisance, self.image_size)
    }
}

/// Corpus shape for [`generate_manifest`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub identities: usize,
    pub renders_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            renders_per_identity: 8,
            image_size: 32,
            seed: 0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Identity factors uniform in `[0, 1]`; every render draws fresh nuisance
/// factors uniformly over their ranges.
pub fn generate_manifest(cfg: &CorpusConfig) -> Result<Vec<ManifestRecord>> {
    ensure(cfg.identities > 0 && cfg.renders_per_identity > 0, || {
        "corpus needs at least one identity and one render".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.identities * cfg.renders_per_identity);
    for id in 0..cfg.identities {
        let identity_params: Vec<f64> = (0..IDENTITY_FACTORS).map(|_| rng.random::<f64>()).collect();
        for _ in 0..cfg.renders_per_identity {
            let nuisance = Nuisance {
                pose: uniform(&mut rng, POSE_RANGE),
                expression: uniform(&mut rng, EXPRESSION_RANGE),
                background_hue: uniform(&mut rng, BACKGROUND_HUE_RANGE),
                illumination: uniform(&mut rng, ILLUMINATION_RANGE),
            };
            let rec = ManifestRecord {
                identity_id: id as u32,
                identity_params: identity_params.clone(),
                nuisance,
                image_size: cfg.image_size,
                seed: rng.random(),
            };
            rec.spec()?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Fresh renders of the identities in `records`: new nuisance factors and
/// render seeds, identical identity factors.
pub fn held_out_renders(records: &[ManifestRecord], per_identity: usize, seed: u64) -> Result<Vec<ManifestRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for r in records {
        if !seen.insert(r.identity_id) {
            continue;
        }
        for _ in 0..per_identity {
            let rec = ManifestRecord {
                nuisance: Nuisance {
                    pose: uniform(&mut rng, POSE_RANGE),
                    expression: uniform(&mut rng, EXPRESSION_RANGE),
                    background_hue: uniform(&mut rng, BACKGROUND_HUE_RANGE),
                    illumination: uniform(&mut rng, ILLUMINATION_RANGE),
                },
                seed: rng.random(),
                ..r.clone()
            };
            rec.spec()?;
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.spec()
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

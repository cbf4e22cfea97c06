//! Checkpoint directories: `manifest.json` plus one parameter archive per
//! namespace.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "AFPARAM\0"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims (u64 each)
//!   data     f32 × prod(dims), row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{config_hash, Models, TrainConfig, NAMESPACES};
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamStore};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"AFPARAM\0";
pub const ARCHIVE_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "anonface-checkpoint";
pub const MANIFEST_FILE: &str = "manifest.json";
const OPTIMIZER_FILE: &str = "optimizer.params";

/// One archive file listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub namespace: String,
    pub file: String,
    pub tensors: usize,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub code_version: String,
    pub step: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    pub archives: Vec<ArchiveEntry>,
    /// Optimizer moments (`m/<name>`, `v/<name>`), present for resumable
    /// checkpoints.
    pub optimizer: Option<ArchiveEntry>,
    pub optimizer_step: usize,
}

/// A checkpoint rebuilt into trainable models.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub models: Models,
    pub optimizer: Option<AdamW>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

/// Write named tensors as f32 (wider dtypes are narrowed).
pub fn write_archive(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(self.path, "truncated archive"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Read every tensor of an archive as f32 on the CPU.
pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    if c.take(8)? != ARCHIVE_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(corrupt(path, format!("unsupported archive version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| corrupt(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(path, format!("tensor {name} has implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| corrupt(path, format!("tensor {name} is larger than the archive")))?;
        let raw = c.take(4 * n)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::from_vec(data, dims, &Device::Cpu)?));
    }
    if c.pos != bytes.len() {
        return Err(corrupt(path, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

fn namespace_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Save `models` (and optionally the optimizer state) to directory `dir`,
/// creating it. The manifest is written last, so a directory without one
/// is never a valid checkpoint.
pub fn save_checkpoint(
    dir: &Path,
    models: &Models,
    config: &TrainConfig,
    step: usize,
    optimizer: Option<&AdamW>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups: BTreeMap<&str, Vec<(String, Tensor)>> = BTreeMap::new();
    let vars = models.store().vars();
    for (name, var) in &vars {
        let ns = namespace_of(name);
        if !NAMESPACES.contains(&ns) {
            return Err(Error::Checkpoint(format!("parameter {name} is outside every namespace")));
        }
        groups.entry(ns).or_default().push((name.clone(), var.as_detached_tensor()));
    }
    let mut archives = Vec::new();
    for ns in NAMESPACES {
        let tensors = groups.remove(ns).unwrap_or_default();
        let file = format!("{ns}.params");
        write_archive(&dir.join(&file), &tensors)?;
        archives.push(ArchiveEntry {
            namespace: ns.to_string(),
            file,
            tensors: tensors.len(),
            parameters: tensors.iter().map(|(_, t)| t.elem_count()).sum(),
        });
    }
    let (opt_entry, opt_step) = match optimizer {
        Some(opt) => {
            let mut tensors = Vec::new();
            for (name, (m, v)) in opt.moments() {
                tensors.push((format!("m/{name}"), m.clone()));
                tensors.push((format!("v/{name}"), v.clone()));
            }
            write_archive(&dir.join(OPTIMIZER_FILE), &tensors)?;
            let entry = ArchiveEntry {
                namespace: "optimizer".into(),
                file: OPTIMIZER_FILE.into(),
                tensors: tensors.len(),
                parameters: tensors.iter().map(|(_, t)| t.elem_count()).sum(),
            };
            (Some(entry), opt.steps_taken())
        }
        None => (None, 0),
    };
    let mut config = config.clone();
    config.model = *models.config();
    config.schedule = models.schedule().config();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: ARCHIVE_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        step,
        config_hash: config_hash(&config)?,
        config,
        archives,
        optimizer: opt_entry,
        optimizer_step: opt_step,
    };
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read and validate `manifest.json` of a checkpoint directory.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, format!("unreadable manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != ARCHIVE_VERSION {
        return Err(corrupt(
            &path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let hash = config_hash(&manifest.config)?;
    if hash != manifest.config_hash {
        return Err(corrupt(&path, "config hash does not match the stored config"));
    }
    Ok(manifest)
}

fn archive_path(dir: &Path, entry: &ArchiveEntry) -> Result<PathBuf> {
    let file = Path::new(&entry.file);
    if file.components().count() != 1 {
        return Err(Error::Checkpoint(format!("archive path {} escapes the checkpoint", entry.file)));
    }
    Ok(dir.join(file))
}

/// Load a checkpoint into fresh f32 models. Every parameter the networks
/// need must be present, with the recorded shape, and nothing else.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest = read_manifest(dir)?;
    let store = ParamStore::new(manifest.config.seed, DType::F32, Device::Cpu);
    let mut loaded = std::collections::BTreeSet::new();
    for entry in &manifest.archives {
        let path = archive_path(dir, entry)?;
        let tensors = read_archive(&path)?;
        if tensors.len() != entry.tensors {
            return Err(corrupt(&path, format!("expected {} tensors, found {}", entry.tensors, tensors.len())));
        }
        for (name, t) in tensors {
            if namespace_of(&name) != entry.namespace {
                return Err(corrupt(&path, format!("tensor {name} is outside namespace {}", entry.namespace)));
            }
            store.insert(&name, t)?;
            loaded.insert(name);
        }
    }
    let models = Models::from_store(manifest.config.model, manifest.config.schedule, store)?;
    let missing: Vec<_> = models.store().names().into_iter().filter(|n| !loaded.contains(n)).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing {} parameters (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    if models.store().len() != loaded.len() {
        return Err(Error::Checkpoint("checkpoint holds parameters the model does not use".into()));
    }
    let optimizer = match &manifest.optimizer {
        Some(entry) => {
            let path = archive_path(dir, entry)?;
            let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
            for (name, t) in read_archive(&path)? {
                let slot = moments.entry(name[2.min(name.len())..].to_string()).or_default();
                match name.get(..2) {
                    Some("m/") => slot.0 = Some(t),
                    Some("v/") => slot.1 = Some(t),
                    _ => return Err(corrupt(&path, format!("unexpected optimizer tensor {name}"))),
                }
            }
            let mut restored = BTreeMap::new();
            for (name, slot) in moments {
                let var = models
                    .store()
                    .var(&name)
                    .ok_or_else(|| corrupt(&path, format!("moments for unknown parameter {name}")))?;
                match slot {
                    (Some(m), Some(v)) if m.dims() == var.dims() && v.dims() == var.dims() => {
                        restored.insert(name, (m, v));
                    }
                    _ => return Err(corrupt(&path, format!("incomplete or misshapen moments for {name}"))),
                }
            }
            let cfg = &manifest.config;
            let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
            opt.restore(manifest.optimizer_step, restored);
            Some(opt)
        }
        None => None,
    };
    Ok(LoadedCheckpoint {
        manifest,
        models,
        optimizer,
    })
}

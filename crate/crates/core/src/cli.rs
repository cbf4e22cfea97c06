//! Command-line workflows. Every command reads one config file (JSON or
//! TOML), resolves paths against `--workdir` and stamps its outputs with
//! the config hash.

use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::idvae::sample_anonymous_identity;
use crate::losses::LossLog;
use crate::metrics::{attribute_eval, retrieval_eval, AttributeReport, RetrievalReport};
use crate::perception::{
    generate_manifest, read_manifest, synth_face, write_manifest, CorpusConfig, IdentityEmbedder,
};
use crate::pipeline::{
    anonymize, config_hash, load_checkpoint, save_checkpoint, Corpus, Models, Sample, TrainConfig, Trainer,
    DEFAULT_SAMPLING_STEPS,
};
use crate::raster::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(flatten)]
    pub corpus: CorpusConfig,
    pub manifest: String,
    /// Directory for PNG renders; none when unset.
    pub images_dir: Option<String>,
    pub overwrite: bool,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            manifest: "data/manifest.jsonl".into(),
            images_dir: Some("data/images".into()),
            overwrite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    pub checkpoint: String,
    pub log: String,
    /// Continue from this checkpoint until `steps` total steps are done.
    pub resume: Option<String>,
    pub overwrite: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            config: TrainConfig {
                manifest: Some("data/manifest.jsonl".into()),
                ..TrainConfig::default()
            },
            checkpoint: "runs/checkpoint".into(),
            log: "runs/train_log.csv".into(),
            resume: None,
            overwrite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnonymizeConfig {
    pub checkpoint: String,
    /// PNG files or directories of PNG files.
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub report: String,
    /// Variant `k` of every input uses seed `seed + k`.
    pub seed: u64,
    pub num_variants: usize,
    pub steps: usize,
    /// Also write an (input, degraded, anonymized) strip per image under
    /// `<output_dir>/grids/`.
    pub grid: bool,
    pub overwrite: bool,
}

impl Default for AnonymizeConfig {
    fn default() -> Self {
        Self {
            checkpoint: "runs/checkpoint".into(),
            inputs: vec!["data/images".into()],
            output_dir: "out/anonymized".into(),
            report: "out/anonymize.jsonl".into(),
            seed: 0,
            num_variants: 1,
            steps: DEFAULT_SAMPLING_STEPS,
            grid: false,
            overwrite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub originals_dir: String,
    pub anonymized_dir: String,
    pub report: String,
    /// Embedding width and image size of the toy recognizer.
    pub id_dim: usize,
    pub image_size: usize,
    pub overwrite: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            originals_dir: "data/images".into(),
            anonymized_dir: "out/anonymized".into(),
            report: "out/evaluation.json".into(),
            id_dim: 64,
            image_size: 32,
            overwrite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleIdentityConfig {
    pub checkpoint: String,
    pub input: String,
    pub seed: u64,
    pub count: usize,
    pub output: String,
    pub overwrite: bool,
}

impl Default for SampleIdentityConfig {
    fn default() -> Self {
        Self {
            checkpoint: "runs/checkpoint".into(),
            input: "data/images/00000_id000.png".into(),
            seed: 0,
            count: 8,
            output: "out/identities.csv".into(),
            overwrite: false,
        }
    }
}

/// One file configures every command; each reads its own section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen_data: GenDataConfig,
    pub train: TrainSection,
    pub anonymize: AnonymizeConfig,
    pub evaluate: EvaluateConfig,
    pub sample_identity: SampleIdentityConfig,
}

impl RunConfig {
    /// Parse TOML for `.toml` files, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    /// Hash of everything that affects outputs; the overwrite flags do not.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.gen_data.overwrite = false;
        c.train.overwrite = false;
        c.anonymize.overwrite = false;
        c.evaluate.overwrite = false;
        c.sample_identity.overwrite = false;
        config_hash(&c)
    }
}

#[derive(Debug, Parser)]
#[command(name = "anonface", version, about = "Identity-decoupled diffusion anonymization on a synthetic face corpus")]
pub struct Cli {
    /// Root that every relative path in the config resolves against.
    #[arg(long, default_value = ".")]
    pub workdir: PathBuf,
    /// Run config (JSON or TOML); defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the selected command's section.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    pub overwrite: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus manifest and optional PNG renders.
    GenData,
    /// Train all networks jointly; checkpoints and logs per step.
    Train {
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<String>,
    },
    /// Anonymize PNG images with a trained checkpoint.
    Anonymize {
        #[arg(long)]
        num_variants: Option<usize>,
    },
    /// Retrieval and attribute metrics over (original, anonymized) pairs.
    Evaluate,
    /// Draw anonymous identities for one image and dump their embeddings.
    SampleIdentity {
        #[arg(long)]
        count: Option<usize>,
    },
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub config_hash: String,
    pub outputs: Vec<PathBuf>,
}

fn resolve(workdir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn guard(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::PathCollision(path.to_path_buf()));
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// PNG name of manifest row `row`: `00012_id003.png`.
pub fn render_file_name(row: usize, identity: u32) -> String {
    format!("{row:05}_id{identity:03}.png")
}

/// Identity label encoded in a render file name, if any.
pub fn identity_from_name(stem: &str) -> Option<u32> {
    let (_, id) = stem.split_once("_id")?;
    id.chars().take_while(char::is_ascii_digit).collect::<String>().parse().ok()
}

pub fn cmd_gen_data(workdir: &Path, run: &RunConfig) -> Result<Outcome> {
    let cfg = &run.gen_data;
    let hash = run.hash()?;
    let manifest = resolve(workdir, &cfg.manifest);
    guard(&manifest, cfg.overwrite)?;
    let records = generate_manifest(&cfg.corpus)?;
    write_manifest(&manifest, &records)?;
    let mut outputs = vec![manifest];
    if let Some(dir) = &cfg.images_dir {
        let dir = resolve(workdir, dir);
        for (i, r) in records.iter().enumerate() {
            let path = dir.join(render_file_name(i, r.identity_id));
            guard(&path, cfg.overwrite)?;
            synth_face(&r.spec()?, r.seed)?.save_png(&path)?;
        }
        outputs.push(dir);
    }
    Ok(Outcome {
        config_hash: hash,
        outputs,
    })
}

pub fn cmd_train(workdir: &Path, run: &RunConfig) -> Result<Outcome> {
    let section = &run.train;
    section.config.validate()?;
    let hash = run.hash()?;
    let ckpt = resolve(workdir, &section.checkpoint);
    let log_path = resolve(workdir, &section.log);
    let manifest = section
        .config
        .manifest
        .as_deref()
        .unwrap_or(&run.gen_data.manifest);
    let records = read_manifest(resolve(workdir, manifest))?;

    let trainer = match &section.resume {
        Some(from) => {
            let loaded = load_checkpoint(&resolve(workdir, from))?;
            let mut cfg = section.config.clone();
            // Architecture and schedule always come from the checkpoint.
            cfg.model = loaded.manifest.config.model;
            cfg.schedule = loaded.manifest.config.schedule;
            let step = loaded.manifest.step;
            ensure(step < cfg.steps, || format!("checkpoint is already at step {step} of {}", cfg.steps))?;
            let corpus = Corpus::build(records, &loaded.models.perception)?;
            let opt = loaded
                .optimizer
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
            Trainer::resume(cfg, loaded.models, corpus, opt, step)?
        }
        None => {
            guard(&ckpt.join(crate::pipeline::MANIFEST_FILE), section.overwrite)?;
            guard(&log_path, section.overwrite)?;
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            let cfg = section.config.clone();
            cfg.validate()?;
            let models = Models::new(cfg.model, cfg.schedule, cfg.seed, DType::F32)?;
            let corpus = Corpus::build(records, &models.perception)?;
            Trainer::new(cfg, models, corpus)?
        }
    };
    run_training(trainer, &ckpt, &log_path)?;
    Ok(Outcome {
        config_hash: hash,
        outputs: vec![ckpt, log_path],
    })
}

fn run_training(mut trainer: Trainer, ckpt: &Path, log_path: &Path) -> Result<()> {
    create_parent(log_path)?;
    let mut log = LossLog::open(log_path)?;
    let total = trainer.config().steps;
    let every = trainer.config().checkpoint_every;
    while trainer.step() < total {
        let b = trainer.train_step()?;
        let step = trainer.step();
        log.append(step, &b)?;
        if every > 0 && step % every == 0 && step < total {
            save_checkpoint(ckpt, trainer.models(), trainer.config(), step, Some(trainer.optimizer()))?;
        }
    }
    save_checkpoint(ckpt, trainer.models(), trainer.config(), trainer.step(), Some(trainer.optimizer()))?;
    Ok(())
}

fn collect_pngs(workdir: &Path, inputs: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for i in inputs {
        let p = resolve(workdir, i);
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&p)
                .map_err(|e| Error::io(&p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p);
        }
    }
    ensure(!out.is_empty(), || "no input images".into())?;
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// One line of the anonymization report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymizeRow {
    pub input: String,
    pub output: String,
    pub seed: u64,
    pub variant: usize,
    /// Norm of the projected identity latent fed to the decoder.
    pub latent_norm: f64,
    /// Cosine between the source embedding and the output's embedding.
    pub source_output_cosine: f64,
    pub config_hash: String,
}

pub fn cmd_anonymize(workdir: &Path, run: &RunConfig) -> Result<Outcome> {
    let cfg = &run.anonymize;
    ensure(cfg.num_variants > 0 && cfg.steps > 0, || "num_variants and steps must be positive".into())?;
    let hash = run.hash()?;
    let models = load_checkpoint(&resolve(workdir, &cfg.checkpoint))?.models.frozen()?;
    let inputs = collect_pngs(workdir, &cfg.inputs)?;
    let out_dir = resolve(workdir, &cfg.output_dir);
    let report = resolve(workdir, &cfg.report);
    guard(&report, cfg.overwrite)?;
    let layout = models.config().landmarks;
    let embedder = &models.perception.embedder;
    let mut rows = Vec::new();
    for path in &inputs {
        let sample = Sample::from_image(ImageTensor::load_png(path)?, layout)?;
        let source = embedder.embed(&sample.image)?;
        let seeds: Vec<u64> = (0..cfg.num_variants as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
        let batch = vec![sample.clone(); seeds.len()];
        let results = anonymize(&models, &batch, &seeds, cfg.steps)?;
        for (k, (r, &seed)) in results.iter().zip(&seeds).enumerate() {
            let name = if cfg.num_variants == 1 {
                format!("{}.png", stem(path))
            } else {
                format!("{}_v{k}.png", stem(path))
            };
            let out = out_dir.join(&name);
            guard(&out, cfg.overwrite)?;
            r.image.save_png(&out)?;
            if cfg.grid {
                let degraded = crate::recomposer::degrade(&sample.image, &sample.mask, seed, &models.config().degrade)?;
                strip(&[&sample.image, &degraded, &r.image])?.save_png(out_dir.join("grids").join(&name))?;
            }
            rows.push(AnonymizeRow {
                input: path.display().to_string(),
                output: out.display().to_string(),
                seed,
                variant: k,
                latent_norm: r.identity.latent.iter().map(|v| v * v).sum::<f64>().sqrt(),
                source_output_cosine: source.cosine(&embedder.embed(&r.image)?),
                config_hash: hash.clone(),
            });
        }
    }
    create_parent(&report)?;
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
    Ok(Outcome {
        config_hash: hash,
        outputs: vec![out_dir, report],
    })
}

/// Images side by side.
fn strip(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let (c, h, w) = images[0].shape();
    let mut out = ImageTensor::zeros(c, h, w * images.len());
    for (k, img) in images.iter().enumerate() {
        ensure(img.shape() == (c, h, w), || "strip images must share a shape".into())?;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, k * w + x, img.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Metrics over files paired by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub config_hash: String,
    pub retrieval: RetrievalReport,
    pub attributes: AttributeReport,
    pub pairs: usize,
    /// Files without a partner, excluded from every metric.
    pub unpaired: Vec<String>,
}

/// Pair `anonymized/<stem>.png` or `anonymized/<stem>_v<k>.png` with
/// `originals/<stem>.png`. Originals are the gallery; a query's identity
/// is its original's `_id<N>` tag, or the original's index when untagged.
pub fn cmd_evaluate(workdir: &Path, run: &RunConfig) -> Result<Outcome> {
    let cfg = &run.evaluate;
    let hash = run.hash()?;
    let report_path = resolve(workdir, &cfg.report);
    guard(&report_path, cfg.overwrite)?;
    let originals = collect_pngs(workdir, std::slice::from_ref(&cfg.originals_dir))?;
    let anonymized = collect_pngs(workdir, std::slice::from_ref(&cfg.anonymized_dir))
        .or_else(|e| if matches!(e, Error::Validation(_)) { Ok(vec![]) } else { Err(e) })?;
    let embedder = crate::perception::ToyIdentityEmbedder::new(cfg.id_dim, cfg.image_size)?;

    let orig_stems: Vec<String> = originals.iter().map(|p| stem(p)).collect();
    let label_of = |i: usize| identity_from_name(&orig_stems[i]).unwrap_or(i as u32);
    let mut gallery = Vec::new();
    let mut gallery_images = Vec::new();
    for p in &originals {
        let img = ImageTensor::load_png(p)?;
        gallery.push(embedder.embed(&img)?);
        gallery_images.push(img);
    }
    let gallery_labels: Vec<u32> = (0..originals.len()).map(label_of).collect();

    let mut used = vec![false; originals.len()];
    let (mut queries, mut query_labels, mut xs, mut x_hats, mut unpaired) = (vec![], vec![], vec![], vec![], vec![]);
    for p in &anonymized {
        let s = stem(p);
        let base = match s.rsplit_once("_v") {
            Some((b, k)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_digit()) => b.to_string(),
            _ => s.clone(),
        };
        match orig_stems.iter().position(|o| *o == base) {
            Some(i) => {
                let img = ImageTensor::load_png(p)?;
                queries.push(embedder.embed(&img)?);
                query_labels.push(label_of(i));
                xs.push(gallery_images[i].clone());
                x_hats.push(img);
                used[i] = true;
            }
            None => unpaired.push(p.display().to_string()),
        }
    }
    unpaired.extend(originals.iter().zip(&used).filter(|(_, u)| !**u).map(|(p, _)| p.display().to_string()));
    ensure(!queries.is_empty(), || "no (original, anonymized) pairs to evaluate".into())?;
    let out = EvaluationOutput {
        config_hash: hash.clone(),
        retrieval: retrieval_eval(&queries, &query_labels, &gallery, &gallery_labels)?,
        attributes: attribute_eval(&xs, &x_hats, Default::default())?,
        pairs: queries.len(),
        unpaired,
    };
    write_json(&report_path, &out)?;
    Ok(Outcome {
        config_hash: hash,
        outputs: vec![report_path],
    })
}

pub fn cmd_sample_identity(workdir: &Path, run: &RunConfig) -> Result<Outcome> {
    let cfg = &run.sample_identity;
    ensure(cfg.count > 0, || "count must be positive".into())?;
    let hash = run.hash()?;
    let out = resolve(workdir, &cfg.output);
    guard(&out, cfg.overwrite)?;
    let models = load_checkpoint(&resolve(workdir, &cfg.checkpoint))?.models.frozen()?;
    let image = ImageTensor::load_png(resolve(workdir, &cfg.input))?;
    let source = models.perception.embedder.embed(&image)?;
    let mut text = String::from("# config_hash=");
    text.push_str(&hash);
    text.push_str("\nseed,attempts,source_cosine,latent_source_dot");
    for k in 0..source.dim() {
        text.push_str(&format!(",e{k}"));
    }
    text.push('\n');
    for k in 0..cfg.count as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let a = sample_anonymous_identity(&source, &models.idvae, seed)?;
        let dot: f64 = a.latent.iter().zip(&a.source_latent).map(|(u, v)| u * v).sum();
        text.push_str(&format!("{seed},{},{},{dot:e}", a.attempts, a.embedding.cosine(&source)));
        for v in &a.embedding.vector {
            text.push_str(&format!(",{v:e}"));
        }
        text.push('\n');
    }
    create_parent(&out)?;
    std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    Ok(Outcome {
        config_hash: hash,
        outputs: vec![out],
    })
}

/// Apply the command-line overrides to the loaded config.
pub fn apply_overrides(cli: &Cli, run: &mut RunConfig) {
    let o = cli.overwrite;
    match &cli.command {
        Command::GenData => {
            if let Some(s) = cli.seed {
                run.gen_data.corpus.seed = s;
            }
            run.gen_data.overwrite |= o;
        }
        Command::Train { resume } => {
            if let Some(s) = cli.seed {
                run.train.config.seed = s;
            }
            if resume.is_some() {
                run.train.resume = resume.clone();
            }
            run.train.overwrite |= o;
        }
        Command::Anonymize { num_variants } => {
            if let Some(s) = cli.seed {
                run.anonymize.seed = s;
            }
            if let Some(n) = num_variants {
                run.anonymize.num_variants = *n;
            }
            run.anonymize.overwrite |= o;
        }
        Command::Evaluate => run.evaluate.overwrite |= o,
        Command::SampleIdentity { count } => {
            if let Some(s) = cli.seed {
                run.sample_identity.seed = s;
            }
            if let Some(c) = count {
                run.sample_identity.count = *c;
            }
            run.sample_identity.overwrite |= o;
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(&resolve(&cli.workdir, &p.to_string_lossy()))?,
        None => RunConfig::default(),
    };
    apply_overrides(cli, &mut run);
    let w = &cli.workdir;
    match cli.command {
        Command::GenData => cmd_gen_data(w, &run),
        Command::Train { .. } => cmd_train(w, &run),
        Command::Anonymize { .. } => cmd_anonymize(w, &run),
        Command::Evaluate => cmd_evaluate(w, &run),
        Command::SampleIdentity { .. } => cmd_sample_identity(w, &run),
    }
}

/// Parse arguments, run, and map the result to a process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            for p in &out.outputs {
                println!("{}", p.display());
            }
            println!("config_hash {}", out.config_hash);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! Conditioning path: identity-masked degradation of the source, the
//! identity-agnostic token set built from the degraded image and its
//! landmarks, the identity tokens expanded from a control embedding, and
//! the two-way cross-attention that aligns both sets.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Activation, Attention, AttentionOutput, Linear, Mlp, Scope};
use crate::perception::{FaceMask, LandmarkSet};
use crate::raster::ImageTensor;

/// Ranges the per-call degradation parameters are drawn from (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeStrength {
    /// Gaussian blur standard deviation in pixels; `0` disables blurring.
    pub blur_sigma: [f64; 2],
    /// Block size of the down/up-sampling; `≤ 1` disables it.
    pub resample_factor: [usize; 2],
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: [f64; 2],
}

impl Default for DegradeStrength {
    fn default() -> Self {
        Self {
            blur_sigma: [5.0, 8.0],
            resample_factor: [4, 6],
            noise_std: [0.6, 1.0],
        }
    }
}

impl DegradeStrength {
    /// Leaves every pixel untouched.
    pub fn none() -> Self {
        Self {
            blur_sigma: [0.0, 0.0],
            resample_factor: [0, 0],
            noise_std: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |[lo, hi]: [f64; 2]| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        ensure(ordered(self.blur_sigma), || {
            format!("blur sigma range {:?} must be finite, nonnegative and ordered", self.blur_sigma)
        })?;
        ensure(ordered(self.noise_std), || {
            format!("noise std range {:?} must be finite, nonnegative and ordered", self.noise_std)
        })?;
        let [lo, hi] = self.resample_factor;
        ensure(lo <= hi && hi <= 8, || {
            format!("resample factor range {:?} must be ordered and at most 8", self.resample_factor)
        })
    }
}

/// Normalized Gaussian taps with radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable convolution with an odd-length kernel along both axes,
/// replicating edge pixels.
pub fn convolve_separable(image: &ImageTensor, kernel: &[f64]) -> Result<ImageTensor> {
    ensure(kernel.len() % 2 == 1, || {
        format!("kernel length {} must be odd", kernel.len())
    })?;
    let (c, h, w) = image.shape();
    let r = (kernel.len() / 2) as i64;
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * image.get(ch, y, clampi(x as i64 + k as i64 - r, w)) as f64)
                    .sum();
                tmp.set(ch, y, x, acc as f32);
            }
        }
    }
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp.get(ch, clampi(y as i64 + k as i64 - r, h), x) as f64)
                    .sum();
                out.set(ch, y, x, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Area-average over `factor × factor` blocks (the last row/column of
/// blocks may be partial) followed by nearest-neighbour upsampling.
pub fn block_resample(image: &ImageTensor, factor: usize) -> ImageTensor {
    if factor <= 1 {
        return image.clone();
    }
    let (c, h, w) = image.shape();
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for by in (0..h).step_by(factor) {
            for bx in (0..w).step_by(factor) {
                let (ey, ex) = ((by + factor).min(h), (bx + factor).min(w));
                let mut acc = 0.0f64;
                for y in by..ey {
                    for x in bx..ex {
                        acc += image.get(ch, y, x) as f64;
                    }
                }
                let mean = (acc / ((ey - by) * (ex - bx)) as f64) as f32;
                for y in by..ey {
                    for x in bx..ex {
                        out.set(ch, y, x, mean);
                    }
                }
            }
        }
    }
    out
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Blur, resample and add noise inside `mask`; pixels outside are copied
/// unchanged. Degraded pixels are clamped to `[-1, 1]`. Deterministic per
/// `seed`.
pub fn degrade(image: &ImageTensor, mask: &FaceMask, seed: u64, strength: &DegradeStrength) -> Result<ImageTensor> {
    strength.validate()?;
    let (c, h, w) = image.shape();
    ensure(mask.height == h && mask.width == w, || {
        format!("mask {}x{} does not match image {h}x{w}", mask.height, mask.width)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = draw(&mut rng, strength.blur_sigma);
    let [flo, fhi] = strength.resample_factor;
    let factor = if fhi > flo { rng.random_range(flo..=fhi) } else { flo };
    let noise_std = draw(&mut rng, strength.noise_std);

    let mut work = image.clone();
    if sigma > 0.0 {
        work = convolve_separable(&work, &gaussian_kernel(sigma))?;
    }
    work = block_resample(&work, factor);
    let mut out = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let n: f64 = StandardNormal.sample(&mut rng);
                if mask.get(y, x) {
                    let v = work.get(ch, y, x) as f64 + noise_std * n;
                    out.set(ch, y, x, v.clamp(-1.0, 1.0) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Per keypoint, `[sin(2^j π x), cos(2^j π x)]` for `j < n_freq`, then the
/// same for `y`: `4·n_freq` values per point, row-major `(K, 4·n_freq)`.
pub fn fourier_landmark_features(lm: &LandmarkSet, n_freq: usize) -> Result<Vec<f64>> {
    ensure(n_freq > 0, || "need at least one frequency".into())?;
    lm.validate()?;
    let mut out = Vec::with_capacity(lm.len() * 4 * n_freq);
    for p in &lm.points {
        for c in p {
            for j in 0..n_freq {
                let a = (1u64 << j) as f64 * std::f64::consts::PI * c;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecomposerConfig {
    pub token_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub id_tokens: usize,
    pub n_freq: usize,
    /// Width of the semantic encoder's tokens.
    pub semantic_dim: usize,
    pub id_dim: usize,
}

impl Default for RecomposerConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            attn_dim: 64,
            heads: 4,
            id_tokens: 4,
            n_freq: 6,
            semantic_dim: 64,
            id_dim: 64,
        }
    }
}

/// Aligned conditioning streams: `non_id` is `(B, N_s, d_tok)`, `id` is
/// `(B, N_id, d_tok)`.
#[derive(Debug, Clone)]
pub struct ConditionTokens {
    pub non_id: Tensor,
    pub id: Tensor,
}

/// Learned maps of the conditioning path.
#[derive(Debug, Clone)]
pub struct Recomposer {
    cfg: RecomposerConfig,
    landmark_embed: Linear,
    landmark_proj: Mlp,
    semantic_proj: Mlp,
    nonid_attn: Attention,
    id_proj: Mlp,
    nonid_from_id: Attention,
    id_from_nonid: Attention,
}

impl Recomposer {
    pub fn new(s: &Scope, cfg: RecomposerConfig) -> Result<Self> {
        ensure(cfg.id_tokens > 0 && cfg.token_dim > 0, || {
            "recomposer needs positive token counts and widths".into()
        })?;
        let d = cfg.token_dim;
        let (a, h) = (cfg.attn_dim, cfg.heads);
        Ok(Self {
            cfg,
            landmark_embed: Linear::new(&s.pp("landmark_embed"), 4 * cfg.n_freq, d)?,
            landmark_proj: Mlp::new(&s.pp("landmark_proj"), d, d, d)?,
            semantic_proj: Mlp::new(&s.pp("semantic_proj"), cfg.semantic_dim, d, d)?,
            nonid_attn: Attention::new(&s.pp("nonid_attn"), d, d, a, h)?,
            id_proj: Mlp::with_activation(&s.pp("id_proj"), cfg.id_dim, d, cfg.id_tokens * d, Activation::Relu)?,
            nonid_from_id: Attention::new(&s.pp("align_nonid"), d, d, a, h)?,
            id_from_nonid: Attention::new(&s.pp("align_id"), d, d, a, h)?,
        })
    }

    pub fn config(&self) -> RecomposerConfig {
        self.cfg
    }

    pub fn nonid_attention(&self) -> &Attention {
        &self.nonid_attn
    }

    /// Attention with identity-agnostic queries over identity tokens.
    pub fn nonid_from_id(&self) -> &Attention {
        &self.nonid_from_id
    }

    pub fn id_from_nonid(&self) -> &Attention {
        &self.id_from_nonid
    }

    /// `(B, K, 4·n_freq)` Fourier features → `(B, K, d_tok)`.
    pub fn landmark_tokens(&self, features: &Tensor) -> Result<Tensor> {
        self.landmark_embed.forward(features)
    }

    /// Queries from projected semantic tokens `(B, N_s, d_sem)`, keys and
    /// values from projected landmark tokens, plus a residual on the
    /// queries. Returns `(B, N_s, d_tok)` and the attention weights.
    pub fn nonid_embedding(&self, semantic: &Tensor, landmark_features: &Tensor) -> Result<AttentionOutput> {
        ensure(semantic.rank() == 3 && landmark_features.rank() == 3, || {
            "semantic and landmark inputs must be (B, N, D)".into()
        })?;
        ensure(semantic.dim(0)? == landmark_features.dim(0)?, || "batch sizes differ".into())?;
        ensure(semantic.dim(2)? == self.cfg.semantic_dim, || {
            format!("semantic tokens have width {}, expected {}", semantic.dim(2).unwrap_or(0), self.cfg.semantic_dim)
        })?;
        ensure(landmark_features.dim(2)? == 4 * self.cfg.n_freq, || {
            "landmark feature width does not match n_freq".into()
        })?;
        let q = self.semantic_proj.forward(semantic)?;
        let kv = self.landmark_proj.forward(&self.landmark_tokens(landmark_features)?)?;
        let att = self.nonid_attn.forward_with_weights(&q, &kv)?;
        Ok(AttentionOutput {
            output: (att.output + q)?,
            weights: att.weights,
        })
    }

    /// `(B, d_id)` control embeddings → `(B, N_id, d_tok)`.
    pub fn project_identity(&self, e_ctrl: &Tensor) -> Result<Tensor> {
        let (b, d) = e_ctrl.dims2()?;
        ensure(d == self.cfg.id_dim, || {
            format!("control embedding width {d} != {}", self.cfg.id_dim)
        })?;
        Ok(self
            .id_proj
            .forward(e_ctrl)?
            .reshape((b, self.cfg.id_tokens, self.cfg.token_dim))?)
    }

    /// Each stream attends to the other; residuals keep the originals.
    pub fn align(&self, non_id: &Tensor, id: &Tensor) -> Result<ConditionTokens> {
        let t_non_id = (self.nonid_from_id.forward(non_id, id)? + non_id)?;
        let t_id = (self.id_from_nonid.forward(id, non_id)? + id)?;
        Ok(ConditionTokens {
            non_id: t_non_id,
            id: t_id,
        })
    }
}

/// Stack per-sample row-major token blocks into `(B, N, D)`.
pub fn stack_tokens<T: Copy + Into<f64>>(rows: &[Vec<T>], n: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(rows.len() * n * d);
    for r in rows {
        ensure(r.len() == n * d, || format!("token block of {} values, expected {}", r.len(), n * d))?;
        flat.extend(r.iter().map(|&v| v.into()));
    }
    Ok(Tensor::from_vec(flat, (rows.len(), n, d), device)?.to_dtype(dtype)?)
}

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::render::{identity_zone, CHROMA_U, CHROMA_V};
use super::{IdentityEmbedder, IdentityEmbedding, IDENTITY_FACTORS};
use crate::error::{ensure, Error, Result};
use crate::raster::ImageTensor;

const PROBE_SEED: u64 = 0x1d_e4b3_dd17;
const DEGENERATE_NORM: f64 = 1e-6;

/// Toy face recognizer.
///
/// Reads the mean color of each identity quadrant, keeps its chroma
/// (two numbers per quadrant), maps those `2·4` statistics through a fixed
/// matrix with orthonormal columns and normalizes. Since the map is an
/// isometry on the statistics, the cosine between two embeddings equals the
/// cosine between their quadrant chroma vectors.
#[derive(Debug, Clone)]
pub struct ToyIdentityEmbedder {
    dim: usize,
    image_size: usize,
    /// Row-major `(dim, 3·H·W)`: the whole pre-normalization map.
    probe: Vec<f64>,
    /// Row-major `(2·4, 3·H·W)`: quadrant chroma statistics.
    stats: Vec<f64>,
    probe_tensor: Tensor,
}

impl ToyIdentityEmbedder {
    pub fn new(dim: usize, image_size: usize) -> Result<Self> {
        let n_stats = 2 * IDENTITY_FACTORS;
        ensure(dim >= n_stats, || {
            format!("embedding dim {dim} below the {n_stats} identity statistics")
        })?;
        let hw = image_size * image_size;
        let zone = identity_zone(image_size);
        let mut counts = [0usize; IDENTITY_FACTORS];
        for q in zone.iter().flatten() {
            counts[*q] += 1;
        }
        ensure(counts.iter().all(|&c| c > 0), || {
            format!("image size {image_size} leaves an identity quadrant empty")
        })?;

        let mut stats = vec![0.0; n_stats * 3 * hw];
        for (pix, z) in zone.iter().enumerate() {
            let Some(q) = z else { continue };
            let w = 1.0 / counts[*q] as f64;
            for c in 0..3 {
                stats[(2 * q) * 3 * hw + c * hw + pix] = w * CHROMA_U[c];
                stats[(2 * q + 1) * 3 * hw + c * hw + pix] = w * CHROMA_V[c];
            }
        }

        let basis = orthonormal_columns(dim, n_stats, PROBE_SEED);
        let mut probe = vec![0.0; dim * 3 * hw];
        for k in 0..dim {
            for j in 0..n_stats {
                let b = basis[k * n_stats + j];
                if b == 0.0 {
                    continue;
                }
                let src = &stats[j * 3 * hw..(j + 1) * 3 * hw];
                let dst = &mut probe[k * 3 * hw..(k + 1) * 3 * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += b * s;
                }
            }
        }
        let probe_tensor = Tensor::from_slice(&probe, (dim, 3 * hw), &Device::Cpu)?;
        Ok(Self {
            dim,
            image_size,
            probe,
            stats,
            probe_tensor,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Quadrant chroma statistics `(u_0, v_0, …, u_3, v_3)`.
    pub fn identity_statistics(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.check_shape(image)?;
        Ok(matvec(&self.stats, image.data(), 2 * IDENTITY_FACTORS))
    }

    fn check_shape(&self, image: &ImageTensor) -> Result<()> {
        ensure(
            image.shape() == (3, self.image_size, self.image_size),
            || {
                format!(
                    "embedder expects 3x{0}x{0} images, got {1:?}",
                    self.image_size,
                    image.shape()
                )
            },
        )
    }
}

fn matvec(m: &[f64], x: &[f32], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            m[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * *b as f64)
                .sum()
        })
        .collect()
}

/// `rows × cols` matrix (row-major) with orthonormal columns, from
/// Gram-Schmidt on Gaussian draws.
pub(crate) fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Two passes of classical Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for u in &columns {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= d * ui;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            columns.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for i in 0..rows {
            out[i * cols + j] = col[i];
        }
    }
    out
}

impl IdentityEmbedder for ToyIdentityEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &ImageTensor) -> Result<IdentityEmbedding> {
        let stats = self.identity_statistics(image)?;
        let stat_norm = stats.iter().map(|s| s * s).sum::<f64>().sqrt();
        if !(stat_norm > DEGENERATE_NORM) {
            return Err(Error::DegenerateEmbedding(format!(
                "identity region carries no chroma (statistic norm {stat_norm:e})"
            )));
        }
        IdentityEmbedding::unit(matvec(&self.probe, image.data(), self.dim))
    }

    fn embed_tensor(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        ensure(c == 3 && h == self.image_size && w == self.image_size, || {
            format!("embedder expects (B, 3, {0}, {0}) input", self.image_size)
        })?;
        let probe = self
            .probe_tensor
            .to_dtype(images.dtype())?
            .to_device(images.device())?;
        let raw = images.reshape((b, c * h * w))?.matmul(&probe.t()?)?;
        let norm = raw.sqr()?.sum_keepdim(1)?.sqrt()?;
        Ok(raw.broadcast_div(&(norm + 1e-12)?)?)
    }
}

/// Stack embeddings into a `(B, dim)` tensor.
pub fn embeddings_tensor(embs: &[IdentityEmbedding], dtype: DType, device: &Device) -> Result<Tensor> {
    let dim = embs.first().map(|e| e.dim()).unwrap_or(0);
    let data: Vec<f64> = embs.iter().flat_map(|e| e.vector.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (embs.len(), dim), device)?.to_dtype(dtype)?)
}

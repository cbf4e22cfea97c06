use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::SemanticEncoder;
use crate::error::{ensure, Result};
use crate::raster::ImageTensor;

const PROJECTION_SEED: u64 = 0x5e_3a_71c;
/// Each patch is average-pooled to a `POOLED × POOLED` color grid.
const POOLED: usize = 4;

/// Toy multi-scale semantic encoder.
///
/// Two scales of non-overlapping patches (a `4×4` grid and a `2×2` grid),
/// each average-pooled to `4×4×3` values and passed through one fixed
/// random affine projection to `token_dim`. Tokens are ordered fine scale
/// first, row-major within a scale.
#[derive(Debug, Clone)]
pub struct ToySemanticEncoder {
    image_size: usize,
    token_dim: usize,
    grids: [usize; 2],
    /// Row-major `(token_dim, 3·POOLED²)`.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl ToySemanticEncoder {
    pub fn new(image_size: usize, token_dim: usize) -> Result<Self> {
        let grids = [4, 2];
        for g in grids {
            ensure(image_size % (g * POOLED) == 0, || {
                format!("image size {image_size} not divisible into {g}x{g} patches of {POOLED}x{POOLED} cells")
            })?;
        }
        let in_dim = 3 * POOLED * POOLED;
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let bound = 1.0 / (in_dim as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let weight = (0..token_dim * in_dim).map(|_| dist.sample(&mut rng)).collect();
        let bias = (0..token_dim).map(|_| dist.sample(&mut rng)).collect();
        Ok(Self {
            image_size,
            token_dim,
            grids,
            weight,
            bias,
        })
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Pixel rectangle `(y0, x0, side)` seen by token `i`.
    pub fn receptive_field(&self, token: usize) -> (usize, usize, usize) {
        let mut i = token;
        for g in self.grids {
            if i < g * g {
                let side = self.image_size / g;
                return ((i / g) * side, (i % g) * side, side);
            }
            i -= g * g;
        }
        panic!("token index {token} out of range")
    }

    fn pooled_patch(&self, image: &ImageTensor, y0: usize, x0: usize, side: usize) -> Vec<f32> {
        let cell = side / POOLED;
        let norm = 1.0 / (cell * cell) as f32;
        let mut out = Vec::with_capacity(3 * POOLED * POOLED);
        for c in 0..3 {
            for cy in 0..POOLED {
                for cx in 0..POOLED {
                    let mut acc = 0.0f32;
                    for y in y0 + cy * cell..y0 + (cy + 1) * cell {
                        for x in x0 + cx * cell..x0 + (cx + 1) * cell {
                            acc += image.get(c, y, x);
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
        out
    }
}

impl SemanticEncoder for ToySemanticEncoder {
    fn num_tokens(&self) -> usize {
        self.grids.iter().map(|g| g * g).sum()
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn encode(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        ensure(
            image.shape() == (3, self.image_size, self.image_size),
            || format!("semantic encoder expects 3x{0}x{0} input", self.image_size),
        )?;
        let in_dim = 3 * POOLED * POOLED;
        let mut out = Vec::with_capacity(self.num_tokens() * self.token_dim);
        for t in 0..self.num_tokens() {
            let (y0, x0, side) = self.receptive_field(t);
            let pooled = self.pooled_patch(image, y0, x0, side);
            for k in 0..self.token_dim {
                let row = &self.weight[k * in_dim..(k + 1) * in_dim];
                let v: f32 = row.iter().zip(&pooled).map(|(a, b)| a * b).sum();
                out.push(v + self.bias[k]);
            }
        }
        Ok(out)
    }
}

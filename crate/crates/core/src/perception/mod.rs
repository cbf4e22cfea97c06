//! Perception providers and the procedural face corpus.
//!
//! Every pretrained network the method leans on (recognizer, semantic
//! encoder, landmark detector, face parser) is reached through a trait here.
//! The toy implementations work on procedurally rendered faces whose
//! identity and nuisance factors are known by construction:
//!
//! * identity lives in the hues of four quadrants of a disc at the image
//!   center ([`render::identity_zone`]), the only pixels the toy recognizer reads;
//! * pose (in-plane rotation), expression (mouth shape), background hue and
//!   illumination (a horizontal brightness ramp on the background) move
//!   everything else, and never touch the identity disc.

mod embed;
mod fit;
mod manifest;
mod render;
mod semantic;

pub use embed::{embeddings_tensor, ToyIdentityEmbedder};
pub use fit::{fit_nuisance, NuisanceFit, FIT_RESIDUAL_LIMIT};
pub use manifest::{generate_manifest, held_out_renders, read_manifest, write_manifest, CorpusConfig, ManifestRecord};
pub use render::{
    identity_zone, synth_face, toy_face_mask, toy_landmarks, LandmarkLayout, IDENTITY_RADIUS,
};
pub use semantic::ToySemanticEncoder;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::raster::ImageTensor;

/// Number of identity factors (one hue per identity quadrant).
pub const IDENTITY_FACTORS: usize = 4;

pub const POSE_RANGE: (f64, f64) = (-0.5, 0.5);
pub const EXPRESSION_RANGE: (f64, f64) = (0.0, 1.0);
pub const BACKGROUND_HUE_RANGE: (f64, f64) = (0.0, 1.0);
pub const ILLUMINATION_RANGE: (f64, f64) = (-0.5, 0.5);

/// Identity-irrelevant factors of a rendered face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nuisance {
    /// In-plane head rotation in radians, within [`POSE_RANGE`].
    pub pose: f64,
    /// Mouth width/opening in [`EXPRESSION_RANGE`].
    pub expression: f64,
    /// Background hue as a fraction of a turn.
    pub background_hue: f64,
    /// Signed strength of the left-to-right background brightness ramp.
    pub illumination: f64,
}

impl Default for Nuisance {
    fn default() -> Self {
        Self {
            pose: 0.0,
            expression: 0.0,
            background_hue: 0.0,
            illumination: 0.0,
        }
    }
}

impl Nuisance {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.pose, self.expression, self.background_hue, self.illumination]
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("pose", self.pose, POSE_RANGE),
            ("expression", self.expression, EXPRESSION_RANGE),
            ("background_hue", self.background_hue, BACKGROUND_HUE_RANGE),
            ("illumination", self.illumination, ILLUMINATION_RANGE),
        ];
        for (name, v, (lo, hi)) in checks {
            ensure(v.is_finite() && v >= lo && v <= hi, || {
                format!("nuisance {name} = {v} outside [{lo}, {hi}]")
            })?;
        }
        Ok(())
    }
}

/// Full description of one synthetic face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFaceSpec {
    /// Quadrant hue factors, each in `[0, 1]`.
    pub identity_params: Vec<f64>,
    pub nuisance: Nuisance,
    pub image_size: usize,
}

impl SyntheticFaceSpec {
    pub fn new(identity_params: Vec<f64>, nuisance: Nuisance, image_size: usize) -> Result<Self> {
        let spec = Self {
            identity_params,
            nuisance,
            image_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.identity_params.len() == IDENTITY_FACTORS, || {
            format!(
                "expected {IDENTITY_FACTORS} identity factors, got {}",
                self.identity_params.len()
            )
        })?;
        for (i, p) in self.identity_params.iter().enumerate() {
            ensure(p.is_finite() && (0.0..=1.0).contains(p), || {
                format!("identity factor {i} = {p} outside [0, 1]")
            })?;
        }
        ensure(self.image_size >= 8, || {
            format!("image_size {} too small (minimum 8)", self.image_size)
        })?;
        self.nuisance.validate()
    }

    pub fn with_nuisance(&self, nuisance: Nuisance) -> Self {
        Self {
            nuisance,
            ..self.clone()
        }
    }
}

/// A face-identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl IdentityEmbedding {
    /// Normalizes `vector`; fails if it has (near) zero length.
    pub fn unit(vector: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&vector);
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::DegenerateEmbedding(format!("vector norm {n:e}")));
        }
        Ok(Self {
            vector: vector.into_iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn raw(vector: Vec<f64>) -> Self {
        Self {
            vector,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.vector)
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot / n
    }
}

/// Keypoints in normalized image coordinates (`x`, `y` in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            ensure(p.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)), || {
                format!("landmark {i} = {p:?} outside [0, 1]")
            })?;
        }
        Ok(())
    }

    /// Mean Euclidean distance between corresponding points, in pixels of
    /// an `image_size` image.
    pub fn mean_distance(&self, other: &Self, image_size: usize) -> f64 {
        let n = self.points.len().min(other.points.len()).max(1);
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            * image_size as f64
            / n as f64
    }
}

/// Binary facial-region map, 1 = identity-bearing face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl FaceMask {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64
    }

    /// Area-average onto an `h × w` grid (integer factors), then threshold at 0.5.
    pub fn downsample(&self, h: usize, w: usize) -> Result<Vec<f32>> {
        ensure(h > 0 && w > 0 && self.height % h == 0 && self.width % w == 0, || {
            format!(
                "cannot area-downsample a {}x{} mask to {h}x{w}",
                self.height, self.width
            )
        })?;
        let (fy, fx) = (self.height / h, self.width / w);
        let mut out = Vec::with_capacity(h * w);
        for by in 0..h {
            for bx in 0..w {
                let mut acc = 0usize;
                for y in by * fy..(by + 1) * fy {
                    for x in bx * fx..(bx + 1) * fx {
                        acc += self.get(y, x) as usize;
                    }
                }
                let avg = acc as f64 / (fy * fx) as f64;
                out.push(if avg >= 0.5 { 1.0 } else { 0.0 });
            }
        }
        Ok(out)
    }
}

/// Face-recognition role: image → unit identity vector.
pub trait IdentityEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, image: &ImageTensor) -> Result<IdentityEmbedding>;

    /// Differentiable batch path: `(B, C, H, W)` → unit rows `(B, dim)`.
    fn embed_tensor(&self, images: &candle_core::Tensor) -> Result<candle_core::Tensor>;
}

/// Semantic-feature role: image → `N_s` tokens of width `token_dim`.
pub trait SemanticEncoder: Send + Sync {
    fn num_tokens(&self) -> usize;
    fn token_dim(&self) -> usize;
    /// Row-major `(N_s, token_dim)`.
    fn encode(&self, image: &ImageTensor) -> Result<Vec<f32>>;
}

/// Landmark-detection role.
pub trait LandmarkProvider: Send + Sync {
    fn num_points(&self) -> usize;
    fn landmarks(&self, spec: &SyntheticFaceSpec) -> Result<LandmarkSet>;
}

/// Face-parsing role.
pub trait FaceParser: Send + Sync {
    fn face_mask(&self, spec: &SyntheticFaceSpec) -> Result<FaceMask>;
}

/// Analytic landmarks of the procedural generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ToyLandmarks {
    pub layout: LandmarkLayout,
}

impl LandmarkProvider for ToyLandmarks {
    fn num_points(&self) -> usize {
        self.layout.num_points()
    }

    fn landmarks(&self, spec: &SyntheticFaceSpec) -> Result<LandmarkSet> {
        toy_landmarks(spec, self.layout)
    }
}

/// Ellipse face region of the procedural generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyFaceParser;

impl FaceParser for ToyFaceParser {
    fn face_mask(&self, spec: &SyntheticFaceSpec) -> Result<FaceMask> {
        toy_face_mask(spec)
    }
}

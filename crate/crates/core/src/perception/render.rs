//! Procedural face renderer.
//!
//! Geometry is defined on a canonical 32×32 frame and scaled to the
//! requested image size. Edges are anti-aliased with a half-pixel ramp on
//! the (approximate) signed distance so that pose fitting sees a smooth
//! objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FaceMask, LandmarkSet, SyntheticFaceSpec, IDENTITY_FACTORS};
use crate::error::Result;
use crate::raster::ImageTensor;

const CANON: f64 = 32.0;
const CENTER: f64 = 16.0;
const FACE_A: f64 = 10.0;
const FACE_B: f64 = 13.0;
/// Radius (canonical units) of the identity disc around the image center.
pub const IDENTITY_RADIUS: f64 = 5.0;

const EYE_Y: f64 = -6.5;
const EYE_INNER_X: f64 = 3.0;
const EYE_OUTER_X: f64 = 6.5;
const MOUTH_Y: f64 = 8.0;
const STROKE_HALF_WIDTH: f64 = 0.8;

const SKIN: [f64; 3] = [0.45, 0.1, -0.15];
const INK: [f64; 3] = [-0.75, -0.75, -0.7];
const IDENTITY_LIGHTNESS: f64 = 0.0;
const IDENTITY_SATURATION: f64 = 0.8;
const BACKGROUND_LIGHTNESS: f64 = -0.15;
const BACKGROUND_SATURATION: f64 = 0.3;
const SKIN_TEXTURE_STD: f64 = 0.02;

/// Orthonormal basis of the chroma plane (orthogonal to gray).
pub(crate) const CHROMA_U: [f64; 3] = [
    0.816_496_580_927_726,
    -0.408_248_290_463_863,
    -0.408_248_290_463_863,
];
pub(crate) const CHROMA_V: [f64; 3] = [0.0, 0.707_106_781_186_547_5, -0.707_106_781_186_547_5];

pub(crate) fn chroma_color(lightness: f64, saturation: f64, angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [0, 1, 2].map(|i| lightness + saturation * (c * CHROMA_U[i] + s * CHROMA_V[i]))
}

/// Hue arc spanned by an identity factor. Wide enough that unrelated
/// identities are nearly uncorrelated (mean quadrant cosine ≈ 0.09), short
/// enough that factors half the range apart never share a hue (cosine ≤ 0).
pub(crate) const IDENTITY_HUE_ARC: f64 = 1.5 * std::f64::consts::PI;

/// RGB color of identity quadrant with factor `p`: hue angle `IDENTITY_HUE_ARC · p`.
pub(crate) fn identity_color(p: f64) -> [f64; 3] {
    chroma_color(IDENTITY_LIGHTNESS, IDENTITY_SATURATION, IDENTITY_HUE_ARC * p)
}

pub(crate) fn background_base(hue: f64) -> [f64; 3] {
    chroma_color(
        BACKGROUND_LIGHTNESS,
        BACKGROUND_SATURATION,
        2.0 * std::f64::consts::PI * hue,
    )
}

/// Brightness ramp value of the background at pixel column `x`.
pub(crate) fn illumination_ramp(illumination: f64, x: usize, size: usize) -> f64 {
    illumination * (2.0 * (x as f64 + 0.5) / size as f64 - 1.0)
}

/// Quadrant label (`0` top-left, `1` top-right, `2` bottom-left,
/// `3` bottom-right) for every pixel whose center lies in the identity
/// disc, `None` elsewhere. Row-major `size × size`.
pub fn identity_zone(size: usize) -> Vec<Option<usize>> {
    let s = size as f64 / CANON;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / s - CENTER;
            let py = (y as f64 + 0.5) / s - CENTER;
            if px * px + py * py <= IDENTITY_RADIUS * IDENTITY_RADIUS {
                let q = (py >= 0.0) as usize * 2 + (px >= 0.0) as usize;
                out.push(Some(q));
            } else {
                out.push(None);
            }
        }
    }
    out
}

/// Which landmarks to report and how densely the face parts are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkLayout {
    /// 8 contour + 2×2 eye + 4 mouth points.
    #[default]
    Sparse16,
    /// 40 contour + 2×6 eye + 16 mouth points.
    Dense68,
}

impl LandmarkLayout {
    fn parts(&self) -> (usize, usize, usize) {
        match self {
            LandmarkLayout::Sparse16 => (8, 2, 4),
            LandmarkLayout::Dense68 => (40, 6, 16),
        }
    }

    pub fn num_points(&self) -> usize {
        let (c, e, m) = self.parts();
        c + 2 * e + m
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cos: f64,
    sin: f64,
    mouth_corner: f64,
    upper_lip: f64,
    lower_lip: f64,
}

impl Geometry {
    fn new(spec: &SyntheticFaceSpec) -> Self {
        let e = spec.nuisance.expression;
        Self {
            cos: spec.nuisance.pose.cos(),
            sin: spec.nuisance.pose.sin(),
            mouth_corner: 3.0 + 1.5 * e,
            upper_lip: MOUTH_Y - 1.2 * e,
            lower_lip: MOUTH_Y + 1.8 * e,
        }
    }

    /// Face-local → canonical image coordinates.
    fn to_image(&self, p: [f64; 2]) -> [f64; 2] {
        [
            CENTER + self.cos * p[0] - self.sin * p[1],
            CENTER + self.sin * p[0] + self.cos * p[1],
        ]
    }

    /// Canonical image → face-local coordinates.
    fn to_local(&self, q: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (q[0] - CENTER, q[1] - CENTER);
        [self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy]
    }

    fn strokes(&self) -> [([f64; 2], [f64; 2]); 6] {
        let mc = self.mouth_corner;
        [
            ([-EYE_OUTER_X, EYE_Y], [-EYE_INNER_X, EYE_Y]),
            ([EYE_INNER_X, EYE_Y], [EYE_OUTER_X, EYE_Y]),
            ([-mc, MOUTH_Y], [0.0, self.upper_lip]),
            ([0.0, self.upper_lip], [mc, MOUTH_Y]),
            ([-mc, MOUTH_Y], [0.0, self.lower_lip]),
            ([0.0, self.lower_lip], [mc, MOUTH_Y]),
        ]
    }

    /// Closed mouth outline: left corner → upper lip → right corner → lower lip.
    fn mouth_outline(&self, u: f64) -> [f64; 2] {
        let pts = [
            [-self.mouth_corner, MOUTH_Y],
            [0.0, self.upper_lip],
            [self.mouth_corner, MOUTH_Y],
            [0.0, self.lower_lip],
        ];
        let s = u.rem_euclid(1.0) * 4.0;
        let i = (s.floor() as usize).min(3);
        let f = s - i as f64;
        let (a, b) = (pts[i], pts[(i + 1) % 4]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }
}

fn ellipse_implicit(p: [f64; 2]) -> f64 {
    (p[0] / FACE_A).powi(2) + (p[1] / FACE_B).powi(2) - 1.0
}

/// Approximate signed distance to the face ellipse (canonical units).
fn ellipse_sd(p: [f64; 2]) -> f64 {
    let f = ellipse_implicit(p);
    let gx = 2.0 * p[0] / (FACE_A * FACE_A);
    let gy = 2.0 * p[1] / (FACE_B * FACE_B);
    let g = (gx * gx + gy * gy).sqrt().max(1e-9);
    f / g
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

/// Pixel coverage from a signed distance measured in pixels.
fn coverage(sd_px: f64) -> f64 {
    (0.5 - sd_px).clamp(0.0, 1.0)
}

/// Identity-free render: background, skin and facial strokes only.
/// The identity disc carries plain skin. Used by the nuisance fitter.
pub(crate) fn render_nuisance_layer(spec: &SyntheticFaceSpec) -> ImageTensor {
    let size = spec.image_size;
    let s = size as f64 / CANON;
    let geo = Geometry::new(spec);
    let strokes = geo.strokes();
    let base = background_base(spec.nuisance.background_hue);
    let mut img = ImageTensor::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let q = [(x as f64 + 0.5) / s, (y as f64 + 0.5) / s];
            let p = geo.to_local(q);
            let face = coverage(ellipse_sd(p) * s);
            let stroke_sd = strokes
                .iter()
                .map(|(a, b)| segment_distance(p, *a, *b) - STROKE_HALF_WIDTH)
                .fold(f64::INFINITY, f64::min);
            let ink = coverage(stroke_sd * s) * face;
            let ramp = illumination_ramp(spec.nuisance.illumination, x, size);
            for c in 0..3 {
                let bg = base[c] + ramp;
                let v = bg * (1.0 - face) + SKIN[c] * face;
                let v = v * (1.0 - ink) + INK[c] * ink;
                img.set(c, y, x, v as f32);
            }
        }
    }
    img
}

/// Render a synthetic face.
///
/// Pixels in the identity disc take the quadrant hue colors
/// `L + S·(cos(πp)·u + sin(πp)·v)` (exact, no anti-aliasing), where `u, v`
/// span the chroma plane. Pixels outside the face mask depend only on the
/// nuisance factors. `seed` drives a faint skin texture on face pixels
/// outside the identity disc.
pub fn synth_face(spec: &SyntheticFaceSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    let size = spec.image_size;
    let mut img = render_nuisance_layer(spec);
    let mask = toy_face_mask(spec)?;
    let zone = identity_zone(size);
    let colors: Vec<[f64; 3]> = spec.identity_params.iter().map(|&p| identity_color(p)).collect();
    debug_assert_eq!(colors.len(), IDENTITY_FACTORS);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Normal::new(0.0, SKIN_TEXTURE_STD).expect("valid std");
    for y in 0..size {
        for x in 0..size {
            // One draw per pixel regardless of branch keeps the stream aligned.
            let n = texture.sample(&mut rng);
            if let Some(q) = zone[y * size + x] {
                for (c, v) in colors[q].iter().enumerate() {
                    img.set(c, y, x, *v as f32);
                }
            } else if mask.get(y, x) {
                for c in 0..3 {
                    let v = img.get(c, y, x) + n as f32;
                    img.set(c, y, x, v);
                }
            }
        }
    }
    Ok(img)
}

/// Pixels whose centers fall inside the face ellipse.
pub fn toy_face_mask(spec: &SyntheticFaceSpec) -> Result<FaceMask> {
    spec.validate()?;
    let size = spec.image_size;
    let s = size as f64 / CANON;
    let geo = Geometry::new(spec);
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = geo.to_local([(x as f64 + 0.5) / s, (y as f64 + 0.5) / s]);
            data.push((ellipse_implicit(p) <= 0.0) as u8);
        }
    }
    Ok(FaceMask {
        height: size,
        width: size,
        data,
    })
}

/// Analytic keypoints: contour samples on the face ellipse (clockwise from
/// the top), eye points from outer to inner corner (left eye, then right
/// eye), and points around the mouth outline starting at the left corner.
pub fn toy_landmarks(spec: &SyntheticFaceSpec, layout: LandmarkLayout) -> Result<LandmarkSet> {
    spec.validate()?;
    let geo = Geometry::new(spec);
    let (n_contour, n_eye, n_mouth) = layout.parts();
    let mut local = Vec::with_capacity(layout.num_points());
    for k in 0..n_contour {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / n_contour as f64;
        local.push([FACE_A * phi.sin(), -FACE_B * phi.cos()]);
    }
    for side in [-1.0, 1.0] {
        for k in 0..n_eye {
            let f = if n_eye == 1 { 0.0 } else { k as f64 / (n_eye - 1) as f64 };
            let x = EYE_OUTER_X + f * (EYE_INNER_X - EYE_OUTER_X);
            local.push([side * x, EYE_Y]);
        }
    }
    for k in 0..n_mouth {
        local.push(geo.mouth_outline(k as f64 / n_mouth as f64));
    }
    let points = local
        .into_iter()
        .map(|p| {
            let q = geo.to_image(p);
            [q[0] / CANON, q[1] / CANON]
        })
        .collect();
    Ok(LandmarkSet { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::Nuisance;

    fn spec(ids: [f64; 4], n: Nuisance) -> SyntheticFaceSpec {
        SyntheticFaceSpec::new(ids.to_vec(), n, 32).unwrap()
    }

    #[test]
    fn identical_inputs_give_identical_images() {
        let s = spec([0.1, 0.5, 0.7, 0.9], Nuisance { pose: 0.2, expression: 0.4, background_hue: 0.3, illumination: -0.2 });
        assert_eq!(synth_face(&s, 11).unwrap(), synth_face(&s, 11).unwrap());
    }

    #[test]
    fn identity_disc_is_exactly_the_quadrant_colors() {
        let ids = [0.0, 0.25, 0.5, 1.0];
        let s = spec(ids, Nuisance { pose: -0.4, expression: 1.0, background_hue: 0.9, illumination: 0.5 });
        let img = synth_face(&s, 3).unwrap();
        let zone = identity_zone(32);
        let mut counts = [0; 4];
        for (i, z) in zone.iter().enumerate() {
            if let Some(q) = z {
                counts[*q] += 1;
                let want = identity_color(ids[*q]);
                for c in 0..3 {
                    assert_eq!(img.get(c, i / 32, i % 32), want[c] as f32);
                }
            }
        }
        assert!(counts.iter().all(|&c| c >= 15), "{counts:?}");
    }

    #[test]
    fn outside_mask_depends_only_on_nuisance() {
        let n = Nuisance { pose: 0.3, expression: 0.2, background_hue: 0.6, illumination: 0.4 };
        let a = spec([0.1, 0.2, 0.3, 0.4], n);
        let b = spec([0.9, 0.8, 0.7, 0.6], n);
        let (ia, ib) = (synth_face(&a, 1).unwrap(), synth_face(&b, 2).unwrap());
        let mask = toy_face_mask(&a).unwrap();
        assert_eq!(mask, toy_face_mask(&b).unwrap());
        for y in 0..32 {
            for x in 0..32 {
                if !mask.get(y, x) {
                    for c in 0..3 {
                        assert_eq!(ia.get(c, y, x), ib.get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn identity_pixels_lie_inside_mask_for_extreme_poses() {
        for pose in [-0.5, -0.25, 0.0, 0.25, 0.5] {
            let s = spec([0.5; 4], Nuisance { pose, expression: 1.0, ..Nuisance::default() });
            let mask = toy_face_mask(&s).unwrap();
            for (i, z) in identity_zone(32).iter().enumerate() {
                if z.is_some() {
                    assert!(mask.data[i] == 1);
                }
            }
        }
    }

    #[test]
    fn strokes_never_reach_the_identity_disc() {
        // Stroke coverage inside the disc would show up as a difference
        // between the nuisance layer and plain skin there.
        for pose in [-0.5, 0.0, 0.5] {
            for expression in [0.0, 1.0] {
                let s = spec([0.5; 4], Nuisance { pose, expression, ..Nuisance::default() });
                let layer = render_nuisance_layer(&s);
                for (i, z) in identity_zone(32).iter().enumerate() {
                    if z.is_some() {
                        for c in 0..3 {
                            assert_eq!(layer.get(c, i / 32, i % 32), SKIN[c] as f32);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mask_fraction_within_sanity_bounds() {
        let s = spec([0.5; 4], Nuisance::default());
        let f = toy_face_mask(&s).unwrap().fraction();
        assert!((0.01..=0.8).contains(&f), "{f}");
    }

    #[test]
    fn canonical_template_at_zero_pose() {
        let s = spec([0.5; 4], Nuisance::default());
        let lm = toy_landmarks(&s, LandmarkLayout::Sparse16).unwrap();
        assert_eq!(lm.len(), 16);
        let expect: Vec<[f64; 2]> = vec![
            [16.0, 3.0],
            [16.0 + 10.0 * 0.5f64.sqrt(), 16.0 - 13.0 * 0.5f64.sqrt()],
            [26.0, 16.0],
            [16.0 + 10.0 * 0.5f64.sqrt(), 16.0 + 13.0 * 0.5f64.sqrt()],
            [16.0, 29.0],
            [16.0 - 10.0 * 0.5f64.sqrt(), 16.0 + 13.0 * 0.5f64.sqrt()],
            [6.0, 16.0],
            [16.0 - 10.0 * 0.5f64.sqrt(), 16.0 - 13.0 * 0.5f64.sqrt()],
            [9.5, 9.5],
            [13.0, 9.5],
            [22.5, 9.5],
            [19.0, 9.5],
            [13.0, 24.0],
            [16.0, 24.0],
            [19.0, 24.0],
            [16.0, 24.0],
        ];
        for (got, want) in lm.points.iter().zip(&expect) {
            assert!((got[0] * 32.0 - want[0]).abs() < 1e-9, "{got:?} vs {want:?}");
            assert!((got[1] * 32.0 - want[1]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn rotated_landmarks_match_hand_rigid_transform() {
        // sin(pose) = 0.4, expression = 0.5: the left outer eye corner
        // (-6.5, -6.5) maps to (16 + cos·(-6.5) - sin·(-6.5), 16 + sin·(-6.5) + cos·(-6.5)).
        let pose = 0.4f64.asin();
        let s = spec([0.5; 4], Nuisance { pose, expression: 0.5, ..Nuisance::default() });
        let lm = toy_landmarks(&s, LandmarkLayout::Sparse16).unwrap();
        let (c, sn) = (0.84f64.sqrt(), 0.4);
        let want_x = 16.0 + c * -6.5 - sn * -6.5;
        let want_y = 16.0 + sn * -6.5 + c * -6.5;
        assert!((lm.points[8][0] * 32.0 - want_x).abs() < 1e-9);
        assert!((lm.points[8][1] * 32.0 - want_y).abs() < 1e-9);
        // Right mouth corner at (3.75, 8).
        let want_x = 16.0 + c * 3.75 - sn * 8.0;
        let want_y = 16.0 + sn * 3.75 + c * 8.0;
        assert!((lm.points[14][0] * 32.0 - want_x).abs() < 1e-9);
        assert!((lm.points[14][1] * 32.0 - want_y).abs() < 1e-9);
    }

    #[test]
    fn mirrored_pose_mirrors_landmarks() {
        let base = Nuisance { pose: 0.37, expression: 0.6, ..Nuisance::default() };
        let a = toy_landmarks(&spec([0.5; 4], base), LandmarkLayout::Sparse16).unwrap();
        let b = toy_landmarks(
            &spec([0.5; 4], Nuisance { pose: -0.37, ..base }),
            LandmarkLayout::Sparse16,
        )
        .unwrap();
        // Left/right pairing of the sparse template.
        let partner = |i: usize| match i {
            0..=7 => (8 - i) % 8,
            8..=9 => i + 2,
            10..=11 => i - 2,
            12 => 14,
            14 => 12,
            other => other,
        };
        for i in 0..16 {
            let j = partner(i);
            assert!((a.points[i][0] - (1.0 - b.points[j][0])).abs() < 1e-12, "{i}");
            assert!((a.points[i][1] - b.points[j][1]).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn landmarks_ignore_identity_and_support_dense_layout() {
        let n = Nuisance { pose: 0.1, expression: 0.3, ..Nuisance::default() };
        let a = toy_landmarks(&spec([0.1; 4], n), LandmarkLayout::Dense68).unwrap();
        let b = toy_landmarks(&spec([0.9; 4], n), LandmarkLayout::Dense68).unwrap();
        assert_eq!(a.len(), 68);
        assert_eq!(a, b);
        a.validate().unwrap();
    }
}

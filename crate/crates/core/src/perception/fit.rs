//! Least-squares inversion of the renderer's nuisance map.
//!
//! Background hue and illumination come from a linear regression on the
//! image border (always background). Pose and expression then minimize the
//! squared pixel error between the image and identity-free renders over
//! every pixel outside the identity disc: a coarse grid followed by
//! alternating golden-section refinement.

use super::render::{identity_zone, render_nuisance_layer, CHROMA_U, CHROMA_V};
use super::{Nuisance, SyntheticFaceSpec, EXPRESSION_RANGE, POSE_RANGE};
use crate::error::{ensure, Result};
use crate::raster::ImageTensor;

/// RMS pixel residual above which a fit is reported as failed.
pub const FIT_RESIDUAL_LIMIT: f64 = 0.2;

const BORDER_CANON: f64 = 2.5;
const POSE_GRID: usize = 41;
const EXPRESSION_GRID: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceFit {
    pub nuisance: Nuisance,
    /// RMS residual over the compared pixels.
    pub residual_rms: f64,
}

impl NuisanceFit {
    pub fn converged(&self) -> bool {
        self.residual_rms <= FIT_RESIDUAL_LIMIT
    }
}

/// Estimate the nuisance factors of a rendered (or generated) face.
pub fn fit_nuisance(image: &ImageTensor) -> Result<NuisanceFit> {
    let (c, h, w) = image.shape();
    ensure(c == 3 && h == w && h >= 8, || {
        format!("nuisance fit expects a square RGB image, got {:?}", image.shape())
    })?;
    let size = h;
    let (background_hue, illumination) = fit_background(image);
    let zone = identity_zone(size);
    let compare: Vec<usize> = (0..size * size).filter(|&i| zone[i].is_none()).collect();

    let objective = |pose: f64, expression: f64| -> f64 {
        let spec = SyntheticFaceSpec {
            identity_params: vec![0.5; super::IDENTITY_FACTORS],
            nuisance: Nuisance {
                pose,
                expression,
                background_hue,
                illumination,
            },
            image_size: size,
        };
        let r = render_nuisance_layer(&spec);
        let mut sse = 0.0;
        for &i in &compare {
            for ch in 0..3 {
                let off = ch * size * size + i;
                let d = (r.data()[off] - image.data()[off]) as f64;
                sse += d * d;
            }
        }
        sse
    };

    let mut best = (f64::INFINITY, 0.0, 0.0);
    for pi in 0..POSE_GRID {
        let pose = lerp(POSE_RANGE, pi as f64 / (POSE_GRID - 1) as f64);
        for ei in 0..EXPRESSION_GRID {
            let expression = lerp(EXPRESSION_RANGE, ei as f64 / (EXPRESSION_GRID - 1) as f64);
            let v = objective(pose, expression);
            if v < best.0 {
                best = (v, pose, expression);
            }
        }
    }
    let (_, mut pose, mut expression) = best;
    let pose_step = (POSE_RANGE.1 - POSE_RANGE.0) / (POSE_GRID - 1) as f64;
    let expr_step = (EXPRESSION_RANGE.1 - EXPRESSION_RANGE.0) / (EXPRESSION_GRID - 1) as f64;
    for _ in 0..3 {
        pose = golden_section(
            |p| objective(p, expression),
            (pose - pose_step).max(POSE_RANGE.0),
            (pose + pose_step).min(POSE_RANGE.1),
        );
        expression = golden_section(
            |e| objective(pose, e),
            (expression - expr_step).max(EXPRESSION_RANGE.0),
            (expression + expr_step).min(EXPRESSION_RANGE.1),
        );
    }
    let sse = objective(pose, expression);
    Ok(NuisanceFit {
        nuisance: Nuisance {
            pose,
            expression,
            background_hue,
            illumination,
        },
        residual_rms: (sse / (3 * compare.len()) as f64).sqrt(),
    })
}

fn lerp((lo, hi): (f64, f64), f: f64) -> f64 {
    lo + (hi - lo) * f
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..30 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Regress border pixels on `base + illumination · ramp(x)`.
fn fit_background(image: &ImageTensor) -> (f64, f64) {
    let size = image.height();
    let s = size as f64 / 32.0;
    let border = (BORDER_CANON * s).floor().max(1.0) as usize;
    let mut pts = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if y < border || x < border || y >= size - border || x >= size - border {
                pts.push((y, x));
            }
        }
    }
    let ramp = |x: usize| 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
    // Shared slope across channels, per-channel intercepts.
    let n = pts.len() as f64;
    let r_mean = pts.iter().map(|&(_, x)| ramp(x)).sum::<f64>() / n;
    let mut chan_mean = [0.0; 3];
    for (c, m) in chan_mean.iter_mut().enumerate() {
        *m = pts.iter().map(|&(y, x)| image.get(c, y, x) as f64).sum::<f64>() / n;
    }
    let mut cov = 0.0;
    let mut var = 0.0;
    for &(y, x) in &pts {
        let dr = ramp(x) - r_mean;
        var += 3.0 * dr * dr;
        for (c, m) in chan_mean.iter().enumerate() {
            cov += dr * (image.get(c, y, x) as f64 - m);
        }
    }
    let illumination = if var > 0.0 { cov / var } else { 0.0 };
    let base: Vec<f64> = chan_mean.iter().map(|m| m - illumination * r_mean).collect();
    let u: f64 = (0..3).map(|c| base[c] * CHROMA_U[c]).sum();
    let v: f64 = (0..3).map(|c| base[c] * CHROMA_V[c]).sum();
    let hue = (v.atan2(u) / (2.0 * std::f64::consts::PI)).rem_euclid(1.0);
    (
        hue,
        illumination.clamp(super::ILLUMINATION_RANGE.0, super::ILLUMINATION_RANGE.1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::synth_face;

    #[test]
    fn recovers_rendered_nuisance() {
        let n = Nuisance {
            pose: 0.23,
            expression: 0.64,
            background_hue: 0.71,
            illumination: -0.33,
        };
        let spec = SyntheticFaceSpec::new(vec![0.2, 0.9, 0.4, 0.6], n, 32).unwrap();
        let fit = fit_nuisance(&synth_face(&spec, 9).unwrap()).unwrap();
        assert!(fit.converged(), "{fit:?}");
        assert!((fit.nuisance.pose - n.pose).abs() < 0.01, "{fit:?}");
        assert!((fit.nuisance.expression - n.expression).abs() < 0.05, "{fit:?}");
        assert!((fit.nuisance.background_hue - n.background_hue).abs() < 1e-3, "{fit:?}");
        assert!((fit.nuisance.illumination - n.illumination).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn pure_noise_fails_to_converge() {
        let mut img = ImageTensor::zeros(3, 32, 32);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = if (i * 7919) % 3 == 0 { 0.9 } else { -0.9 };
        }
        assert!(!fit_nuisance(&img).unwrap().converged());
    }
}

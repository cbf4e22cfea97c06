//! Noise schedule, forward diffusion, clean-latent recovery and the
//! deterministic DDIM sampler.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_t = Π_{s ≤ t} (1 − β_s)`.

use candle_core::{DType, Device, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Serializable schedule parameters; enough to rebuild a [`NoiseSchedule`] exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear-β schedule. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure(timesteps >= 1, || "schedule needs at least one timestep".into())?;
    ensure(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        || format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
    )?;
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    ensure(alpha_bar[timesteps - 1] > 0.0, || {
        "cumulative signal level underflows to zero".into()
    })?;
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            timesteps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            Err(Error::TimestepRange {
                t,
                max: self.timesteps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    ensure(z0.shape() == eps.shape(), || {
        format!("latent {:?} and noise {:?} shapes differ", z0.dims(), eps.dims())
    })?;
    let ab = s.alpha_bar(t)?;
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// `ẑ0 = (z_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn recover_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    ensure(z_t.shape() == eps_hat.shape(), || {
        format!("latent {:?} and noise {:?} shapes differ", z_t.dims(), eps_hat.dims())
    })?;
    let ab = s.alpha_bar(t)?;
    if ab <= 1e-12 {
        return Err(Error::NumericalGuard(format!(
            "alpha_bar({t}) = {ab:e} too small to invert"
        )));
    }
    Ok(((z_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// `(B, 1, …, 1)` column of `f(ᾱ_{t_i})` broadcastable against `like`.
fn per_sample(like: &Tensor, ts: &[usize], s: &NoiseSchedule, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    ensure(like.rank() > 0 && like.dim(0)? == ts.len(), || {
        format!("{} timesteps for a batch of shape {:?}", ts.len(), like.dims())
    })?;
    let v = ts.iter().map(|&t| Ok(f(s.alpha_bar(t)?))).collect::<Result<Vec<f64>>>()?;
    let mut shape = vec![1; like.rank()];
    shape[0] = ts.len();
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}

/// [`add_noise`] with one timestep per batch row.
pub fn add_noise_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    ensure(z0.shape() == eps.shape(), || {
        format!("latent {:?} and noise {:?} shapes differ", z0.dims(), eps.dims())
    })?;
    let a = per_sample(z0, ts, s, f64::sqrt)?;
    let b = per_sample(z0, ts, s, |ab| (1.0 - ab).sqrt())?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// [`recover_z0`] with one timestep per batch row.
pub fn recover_z0_batch(z_t: &Tensor, eps_hat: &Tensor, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    ensure(z_t.shape() == eps_hat.shape(), || {
        format!("latent {:?} and noise {:?} shapes differ", z_t.dims(), eps_hat.dims())
    })?;
    for &t in ts {
        let ab = s.alpha_bar(t)?;
        if ab <= 1e-12 {
            return Err(Error::NumericalGuard(format!("alpha_bar({t}) = {ab:e} too small to invert")));
        }
    }
    let b = per_sample(z_t, ts, s, |ab| (1.0 - ab).sqrt())?;
    let inv = per_sample(z_t, ts, s, |ab| 1.0 / ab.sqrt())?;
    Ok((z_t - eps_hat.broadcast_mul(&b)?)?.broadcast_mul(&inv)?)
}

/// Evenly strided timesteps from `T` down to `1`, both endpoints included.
/// Fractional positions round to the nearest step, ties toward larger `t`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    ensure(steps >= 1 && steps <= total, || {
        format!("DDIM step count {steps} outside [1, {total}]")
    })?;
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64;
    Ok((0..steps)
        .map(|i| {
            let offset = i as f64 * span / (steps - 1) as f64;
            // Round half down on the offset == round half up on t.
            let r = (offset - 0.5).ceil().max(0.0);
            total - r as usize
        })
        .collect())
}

/// Standard normal tensor from an explicit seed.
pub fn seeded_normal(shape: impl Into<Shape>, seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.elem_count())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Deterministic (η = 0) DDIM sampling from seeded Gaussian noise.
/// `denoiser(z_t, t)` returns the predicted noise; the returned tensor is
/// the final clean-latent prediction.
pub fn ddim_sample<F>(
    denoiser: F,
    shape: impl Into<Shape>,
    steps: usize,
    seed: u64,
    s: &NoiseSchedule,
    dtype: DType,
    device: &Device,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let z_t = seeded_normal(shape, seed, dtype, device)?;
    ddim_sample_from(denoiser, z_t, steps, s)
}

/// DDIM trajectory starting at a given `z_T`.
pub fn ddim_sample_from<F>(denoiser: F, z_start: Tensor, steps: usize, s: &NoiseSchedule) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    ddim_trajectory(denoiser, z_start, steps, s, None)
}

/// DDIM trajectory whose clean-latent estimate is clamped to
/// `[-bound, bound]` at every step, with the noise estimate recomputed from
/// the clamped value. Early, high-noise steps amplify prediction error by
/// `1/sqrt(alpha_bar)`; clamping keeps them inside the data range.
pub fn ddim_sample_clamped<F>(denoiser: F, z_start: Tensor, steps: usize, s: &NoiseSchedule, bound: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::Validation(format!("clamp bound {bound} must be positive")));
    }
    ddim_trajectory(denoiser, z_start, steps, s, Some(bound))
}

fn ddim_trajectory<F>(mut denoiser: F, z_start: Tensor, steps: usize, s: &NoiseSchedule, bound: Option<f64>) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = ddim_timesteps(s.timesteps(), steps)?;
    let mut z = z_start;
    let mut z0_hat = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let mut eps_hat = denoiser(&z, t)?;
        if !all_finite(&eps_hat)? {
            return Err(Error::NonFinite {
                context: format!("denoiser output at timestep {t}"),
            });
        }
        z0_hat = recover_z0(&z, &eps_hat, t, s)?;
        if let Some(b) = bound {
            z0_hat = z0_hat.clamp(-b, b)?;
            let ab = s.alpha_bar(t)?;
            eps_hat = ((&z - (&z0_hat * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
        }
        if let Some(&prev) = ts.get(i + 1) {
            let ab_prev = s.alpha_bar(prev)?;
            z = ((&z0_hat * ab_prev.sqrt())? + (&eps_hat * (1.0 - ab_prev).sqrt())?)?;
        }
    }
    Ok(z0_hat)
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn first(t: &Tensor) -> f64 {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_product() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = ScheduleConfig::default().build().unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).unwrap() > 0.0);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn timestep_range_errors() {
        let s = build_schedule(10, 0.01, 0.02).unwrap();
        let z = scalar(1.0);
        assert!(matches!(add_noise(&z, 0, &z, &s), Err(Error::TimestepRange { .. })));
        assert!(matches!(add_noise(&z, 11, &z, &s), Err(Error::TimestepRange { .. })));
    }

    /// Schedule with ᾱ_1 = 0.25 exactly.
    fn quarter() -> NoiseSchedule {
        build_schedule(1, 0.75, 0.75).unwrap()
    }

    #[test]
    fn add_noise_hand_value() {
        let zt = add_noise(&scalar(1.0), 1, &scalar(1.0), &quarter()).unwrap();
        assert!((first(&zt) - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((first(&zt) - 1.3660).abs() < 1e-4);
    }

    #[test]
    fn add_noise_without_noise_scales() {
        let s = build_schedule(100, 1e-3, 0.02).unwrap();
        let z = add_noise(&scalar(2.0), 50, &scalar(0.0), &s).unwrap();
        assert!((first(&z) - 2.0 * s.alpha_bar(50).unwrap().sqrt()).abs() < 1e-12);
    }

    #[test]
    fn recover_hand_value_and_zero_case() {
        let s = quarter();
        let z0 = recover_z0(&scalar(0.5 + 0.75f64.sqrt()), &scalar(1.0), 1, &s).unwrap();
        assert!((first(&z0) - 1.0).abs() < 1e-12);
        let z0 = recover_z0(&scalar(0.3), &scalar(0.0), 1, &s).unwrap();
        assert!((first(&z0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn late_timestep_is_mostly_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        let z0 = seeded_normal(1000, 1, DType::F64, &Device::Cpu).unwrap();
        let eps = seeded_normal(1000, 2, DType::F64, &Device::Cpu).unwrap();
        let zt = add_noise(&z0, 1000, &eps, &s).unwrap();
        let rel = (zt - &eps).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt()
            / z0.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
        assert!(rel < 0.01, "{rel}");
    }

    #[test]
    fn timestep_subsequence_endpoints_and_stride() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        let ts = ddim_timesteps(1000, 40).unwrap();
        assert_eq!(ts.len(), 40);
        assert_eq!((ts[0], ts[39]), (1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        // Offsets 0, 1.5, 3 on T = 4: the tie at 1.5 resolves toward t = 3.
        assert_eq!(ddim_timesteps(4, 3).unwrap(), vec![4, 3, 1]);
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn sampler_reports_non_finite_timestep() {
        let s = build_schedule(20, 1e-3, 0.02).unwrap();
        let err = ddim_sample(
            |z, t| if t < 15 { Ok((z * f64::NAN).unwrap()) } else { Ok(z.zeros_like().unwrap()) },
            4,
            5,
            0,
            &s,
            DType::F64,
            &Device::Cpu,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { context } => assert!(context.contains("timestep 11"), "{context}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn oracle_denoiser_recovers_clean_latent() {
        let s = ScheduleConfig::default().build().unwrap();
        let z0 = seeded_normal((2, 3), 4, DType::F64, &Device::Cpu).unwrap();
        for steps in [1, 7, 40] {
            let out = ddim_sample(
                |z, t| {
                    let ab = s.alpha_bar(t)?;
                    Ok(((z - (&z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
                },
                (2, 3),
                steps,
                9,
                &s,
                DType::F64,
                &Device::Cpu,
            )
            .unwrap();
            let err = (out - &z0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(err < 1e-4, "{steps}: {err}");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = build_schedule(50, 1e-3, 0.02).unwrap();
        let run = |seed| {
            ddim_sample(|z, _| Ok((z * 0.1)?), (3,), 10, seed, &s, DType::F32, &Device::Cpu)
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}

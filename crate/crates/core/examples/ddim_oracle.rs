//! Deterministic DDIM with a denoiser that knows the clean latent: every
//! step count lands exactly on it, and noising followed by recovery is the
//! identity at every timestep.
//!
//! cargo run --example ddim_oracle

use anonface::diffusion::{add_noise, ddim_sample_from, ddim_timesteps, recover_z0, seeded_normal, ScheduleConfig};
use candle_core::{DType, Device, Tensor};

fn sup(a: &Tensor, b: &Tensor) -> anonface::Result<f64> {
    Ok((a - b)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?)
}

fn main() -> anonface::Result<()> {
    let s = ScheduleConfig::default().build()?;
    let dev = Device::Cpu;
    let z0 = seeded_normal((4, 3, 8, 8), 1, DType::F64, &dev)?;
    let eps = seeded_normal((4, 3, 8, 8), 2, DType::F64, &dev)?;

    println!("   t      ᾱ_t      round-trip error");
    for t in [1, 250, 500, 750, 1000] {
        let zt = add_noise(&z0, t, &eps, &s)?;
        println!("{t:>4} {:>10.3e} {:>16.2e}", s.alpha_bar(t)?, sup(&recover_z0(&zt, &eps, t, &s)?, &z0)?);
    }

    let oracle = |z: &Tensor, t: usize| -> anonface::Result<Tensor> {
        let ab = s.alpha_bar(t)?;
        Ok(((z - (&z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    };
    let start = seeded_normal((4, 3, 8, 8), 3, DType::F64, &dev)?;
    println!("\nsteps  first timesteps          error");
    for steps in [1, 10, 40, 1000] {
        let ts = ddim_timesteps(s.timesteps(), steps)?;
        let out = ddim_sample_from(oracle, start.clone(), steps, &s)?;
        println!("{steps:>5}  {:<24} {:.2e}", format!("{:?}", &ts[..ts.len().min(3)]), sup(&out, &z0)?);
    }
    Ok(())
}

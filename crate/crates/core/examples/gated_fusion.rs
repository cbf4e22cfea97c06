//! The gated block fuses an identity branch and a non-identity branch per
//! spatial location; forcing the gate shows the two regimes and the
//! balanced mix.
//!
//! cargo run --example gated_fusion

use anonface::diffusion::seeded_normal;
use anonface::harmonizer::IglhBlock;
use anonface::nn::ParamStore;
use anonface::recomposer::ConditionTokens;
use candle_core::{DType, Device, Tensor};

fn sup(a: &Tensor, b: &Tensor) -> anonface::Result<f64> {
    Ok((a - b)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?)
}

fn main() -> anonface::Result<()> {
    let dev = Device::Cpu;
    let store = ParamStore::new(1, DType::F64, dev.clone());
    let block = IglhBlock::new(&store.root().pp("harmonizer").pp("0"), 16, 8, 16, 2)?;
    let f = seeded_normal((1, 64, 16), 1, DType::F64, &dev)?;
    let cond = ConditionTokens {
        non_id: seeded_normal((1, 12, 8), 2, DType::F64, &dev)?,
        id: seeded_normal((1, 4, 8), 3, DType::F64, &dev)?,
    };

    println!("gate logit   |fused − f_id|   |fused − f_nonid|");
    for logit in [-20.0, -2.0, 0.0, 2.0, 20.0] {
        let out = block.forward(&f, &cond, Some(logit))?;
        println!("{logit:>10} {:>16.2e} {:>19.2e}", sup(&out.fused, &out.f_id)?, sup(&out.fused, &out.f_nonid)?);
    }

    let free = block.forward(&f, &cond, None)?;
    let m = free.mask.flatten_all()?.to_vec1::<f64>()?;
    let (lo, hi) = m.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    println!("\nlearned gate over 8×8 tokens: mask in [{lo:.3}, {hi:.3}]");
    for row in m.chunks(8) {
        println!("  {}", row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}

//! One check per acceptance criterion, run by a plain `main` so every
//! `PASS`/`FAIL` line reaches the output. Arguments filter criteria by
//! substring; any failure makes the run exit non-zero.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use anonface::diffusion::{add_noise, build_schedule, ddim_sample_from, recover_z0, seeded_normal, NoiseSchedule};
use anonface::harmonizer::IglhBlock;
use anonface::idvae::{orthogonal_project, NEAR_PARALLEL_TOL};
use anonface::instrument;
use anonface::losses::{self, LossParts, LossWeights};
use anonface::metrics::retrieval_eval;
use anonface::nn::{gradient_check, GradCheck, ParamStore};
use anonface::perception::ToyIdentityEmbedder;
use anonface::pipeline::{anonymize, load_checkpoint, run_toy_experiment, save_checkpoint, ToyExperimentConfig};
use anonface::recomposer::ConditionTokens;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Set once a check has printed its verdict line.
static REPORTED: AtomicBool = AtomicBool::new(false);

fn verdict(criterion: u32, name: &str, ok: bool, detail: String) {
    REPORTED.store(true, Ordering::SeqCst);
    println!("{} criterion {criterion} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} ({name}) failed: {detail}");
}

fn randn64(shape: &[usize], seed: u64) -> Tensor {
    seeded_normal(shape, seed, DType::F64, &Device::Cpu).unwrap()
}

fn sup(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn c1_orthogonal_identity_sampling() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_dot, mut worst_pyth) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let d = rng.random_range(2..=64);
        let r: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let u = orthogonal_project(&r, &v, NEAR_PARALLEL_TOL).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (rr, vv, uu) = (dot(&r, &r), dot(&v, &v), dot(&u, &u));
        worst_dot = worst_dot.max(dot(&u, &v).abs() / (rr.sqrt() * vv.sqrt()));
        // ‖r‖² = ‖u‖² + ⟨r, v⟩² / ‖v‖²
        let along = dot(&r, &v).powi(2) / vv;
        worst_pyth = worst_pyth.max((uu + along - rr).abs() / rr);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "orthogonal projection",
        worst_dot <= 1e-12 && worst_pyth <= 1e-6 && secs < 5.0,
        format!("max normalized dot {worst_dot:.2e} (≤1e-12), max Pythagoras error {worst_pyth:.2e} (≤1e-6), {secs:.2}s (<5s)"),
    );
}

/// Denoiser that knows the answer: `ε̂ = (z − √ᾱ·z0)/√(1 − ᾱ)`.
fn oracle_eps(z: &Tensor, t: usize, z0: &Tensor, s: &NoiseSchedule) -> anonface::Result<Tensor> {
    let ab = s.alpha_bar(t)?;
    Ok(((z - (z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

fn c2_diffusion_algebra() {
    let start = Instant::now();
    let s = build_schedule(1000, 1e-4, 0.02).unwrap();
    let big_t = s.timesteps();
    let z0 = randn64(&[1000, 3, 8, 8], 3);
    let eps = randn64(&[1000, 3, 8, 8], 4);
    let mut round_trip = 0.0f64;
    for t in [1, big_t / 4, big_t / 2, big_t] {
        let zt = add_noise(&z0, t, &eps, &s).unwrap();
        round_trip = round_trip.max(sup(&recover_z0(&zt, &eps, t, &s).unwrap(), &z0));
    }
    let z_start = randn64(&[1000, 3, 8, 8], 5);
    let mut ddim = 0.0f64;
    for steps in [1, 10, 40] {
        let out = ddim_sample_from(|z, t| oracle_eps(z, t, &z0, &s), z_start.clone(), steps, &s).unwrap();
        ddim = ddim.max(sup(&out, &z0));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "diffusion algebra",
        round_trip <= 1e-5 && ddim <= 1e-4 && secs < 30.0,
        format!("round trip sup error {round_trip:.2e} (≤1e-5), oracle DDIM sup error {ddim:.2e} (≤1e-4), {secs:.2}s (<30s)"),
    );
}

/// Monte-Carlo `E_q[log q(z) − log p(z)]` for a diagonal Gaussian `q`.
fn monte_carlo_kl(mu: &[f64], log_var: &[f64], n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        for (m, lv) in mu.iter().zip(log_var) {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + (0.5 * lv).exp() * e;
            // log q − log p; the 2π terms cancel.
            acc += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
    }
    acc / n as f64
}

fn c3_loss_oracles() {
    let dev = Device::Cpu;
    let zeros = Tensor::zeros((2, 1, 4, 4), DType::F64, &dev).unwrap();
    let targets = randn64(&[2, 1, 4, 4], 1).ge(0.0).unwrap().to_dtype(DType::F64).unwrap();
    let bce = scalar(&losses::bce_with_logits(&zeros, &targets).unwrap());
    let bce_err = (bce - std::f64::consts::LN_2).abs();

    let one = Tensor::new(&[[1.0f64]], &dev).unwrap();
    let zero = Tensor::new(&[[0.0f64]], &dev).unwrap();
    let (_, kl) = losses::vae(&zero, &zero, &one, &zero).unwrap();
    let kl_err = (scalar(&kl) - 0.5).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_mc = 0.0f64;
    for _ in 0..20 {
        let d = 4;
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, kl) = losses::vae(
            &Tensor::zeros((1, 1), DType::F64, &dev).unwrap(),
            &Tensor::zeros((1, 1), DType::F64, &dev).unwrap(),
            &Tensor::from_slice(&mu, (1, d), &dev).unwrap(),
            &Tensor::from_slice(&lv, (1, d), &dev).unwrap(),
        )
        .unwrap();
        let analytic = scalar(&kl);
        let mc = monte_carlo_kl(&mu, &lv, 100_000, &mut rng);
        worst_mc = worst_mc.max((analytic - mc).abs() / analytic);
    }

    let w = LossWeights::default();
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..3.0)).collect();
        let ab: f64 = rng.random();
        let s = |x: f64| Tensor::new(x, &dev).unwrap();
        let parts = LossParts {
            diff_noise: s(v[0]),
            diff_recon: s(v[1]),
            id_sim: s(v[2]),
            id_region: s(v[3]),
            vae_recon: s(v[4]),
            kl: s(v[5]),
        };
        let want = v[0] + w.recon * ab * v[1] + ab * v[2] + w.region * v[3] + v[4] + w.kl * v[5];
        worst_sum = worst_sum.max((scalar(&losses::total(&parts, ab, &w).unwrap()) - want).abs());
    }
    verdict(
        3,
        "loss oracles",
        bce_err <= 1e-9 && kl_err <= 1e-9 && worst_mc <= 0.02 && worst_sum <= 1e-6,
        format!(
            "BCE at ½ error {bce_err:.1e}, unit KL error {kl_err:.1e} (≤1e-9), worst KL vs Monte-Carlo {:.2}% (≤2%), additivity error {worst_sum:.1e} (≤1e-6)",
            100.0 * worst_mc
        ),
    );
}

fn var(shape: &[usize], seed: u64) -> Var {
    Var::from_tensor(&randn64(shape, seed)).unwrap()
}

fn c4_gradient_checks() {
    let start = Instant::now();
    let (h, tol) = (1e-5, 1e-3);
    let mut results: Vec<(&str, GradCheck)> = Vec::new();
    let check = |vars: &[Var], f: &dyn Fn() -> anonface::Result<Tensor>| gradient_check(vars, f, h, 24).unwrap();

    let (a, b) = (var(&[2, 3, 4, 4], 1), var(&[2, 3, 4, 4], 2));
    results.push(("noise", check(&[b.clone()], &|| losses::diff_noise(a.as_tensor(), b.as_tensor()))));
    results.push(("recon", check(&[a.clone()], &|| losses::diff_recon(a.as_tensor(), b.as_tensor()))));

    let embedder = ToyIdentityEmbedder::new(16, 16).unwrap();
    let x = Var::from_tensor(&(randn64(&[2, 3, 16, 16], 3) * 0.5).unwrap()).unwrap();
    let e = var(&[2, 16], 4);
    results.push((
        "identity similarity",
        check(&[x.clone(), e.clone()], &|| losses::id_sim(x.as_tensor(), e.as_tensor(), &embedder)),
    ));

    let logits = [var(&[2, 1, 8, 8], 5), var(&[2, 1, 4, 4], 6)];
    let targets = [
        randn64(&[2, 1, 8, 8], 7).ge(0.0).unwrap().to_dtype(DType::F64).unwrap(),
        randn64(&[2, 1, 4, 4], 8).ge(0.0).unwrap().to_dtype(DType::F64).unwrap(),
    ];
    results.push((
        "identity region",
        check(&logits, &|| {
            losses::id_region(&[logits[0].as_tensor().clone(), logits[1].as_tensor().clone()], &targets)
        }),
    ));

    let (ey, ec, mu, lv) = (var(&[3, 8], 9), var(&[3, 8], 10), var(&[3, 4], 11), var(&[3, 4], 12));
    results.push((
        "embedding reconstruction",
        check(&[ec.clone()], &|| Ok(losses::vae(ey.as_tensor(), ec.as_tensor(), mu.as_tensor(), lv.as_tensor())?.0)),
    ));
    results.push((
        "kl",
        check(&[mu.clone(), lv.clone()], &|| Ok(losses::vae(ey.as_tensor(), ec.as_tensor(), mu.as_tensor(), lv.as_tensor())?.1)),
    ));

    let store = ParamStore::new(5, DType::F64, Device::Cpu);
    let block = IglhBlock::new(&store.root().pp("harmonizer").pp("0"), 8, 6, 8, 2).unwrap();
    let f = randn64(&[1, 16, 8], 13);
    let cond = ConditionTokens {
        non_id: randn64(&[1, 5, 6], 14),
        id: randn64(&[1, 4, 6], 15),
    };
    let probe = randn64(&[1, 16, 8], 16);
    let params: Vec<Var> = store.vars().into_iter().map(|(_, v)| v).collect();
    results.push((
        "gated block",
        gradient_check(&params, || Ok((block.forward(&f, &cond, None)?.fused * &probe)?.sum_all()?), h, 6).unwrap(),
    ));

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(n, r)| format!("{n} {:.1e} ({} entries)", r.max_rel_error, r.checked))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        4,
        "gradient checks",
        worst <= tol && results.iter().all(|(_, r)| r.checked > 0) && secs < 120.0,
        format!("{detail}; worst {worst:.1e} (≤1e-3), {secs:.1}s (<120s)"),
    );
}

fn c5_gate_fusion() {
    let store = ParamStore::new(5, DType::F64, Device::Cpu);
    let block = IglhBlock::new(&store.root().pp("harmonizer").pp("0"), 8, 6, 8, 2).unwrap();
    let f = randn64(&[2, 16, 8], 1);
    let cond = ConditionTokens {
        non_id: randn64(&[2, 5, 6], 2),
        id: randn64(&[2, 4, 6], 3),
    };
    let hi = block.forward(&f, &cond, Some(20.0)).unwrap();
    let lo = block.forward(&f, &cond, Some(-20.0)).unwrap();
    let mid = block.forward(&f, &cond, Some(0.0)).unwrap();
    let mean = ((&mid.f_id + &mid.f_nonid).unwrap() * 0.5).unwrap();
    let (e_hi, e_lo, e_mid) = (sup(&hi.fused, &hi.f_id), sup(&lo.fused, &lo.f_nonid), sup(&mid.fused, &mean));
    let free = block.forward(&f, &cond, None).unwrap();
    let m = free.mask.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let open = m.iter().all(|&v| v > 0.0 && v < 1.0);
    verdict(
        5,
        "gate fusion",
        e_hi <= 1e-4 && e_lo <= 1e-4 && e_mid == 0.0 && open,
        format!("+20 → identity branch error {e_hi:.1e}, −20 → other branch error {e_lo:.1e} (≤1e-4), 0 → mean error {e_mid:.1e} (exact), masks in (0,1): {open}"),
    );
}

fn c6_retrieval_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut top, mut map, mut cos) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let nq = rng.random_range(1..=100);
        let ng = rng.random_range(1..=100);
        let labels = rng.random_range(1..=15);
        let (q, ql) = common::random_embeddings(&mut rng, nq, 16, labels);
        let (g, gl) = common::random_embeddings(&mut rng, ng, 16, labels);
        let got = retrieval_eval(&q, &ql, &g, &gl).unwrap();
        let want = common::brute_force_retrieval(&q, &ql, &g, &gl);
        top += usize::from(got.top1 != want.top1 || got.top5 != want.top5 || got.excluded != want.excluded);
        map = map.max((got.map - want.map).abs());
        cos = cos.max((got.mean_cosine - want.mean_cosine).abs());
    }
    verdict(
        6,
        "retrieval metrics",
        top == 0 && map <= 1e-9 && cos <= 1e-9,
        format!("top-k mismatches {top}/50, max mAP error {map:.1e} (≤1e-9), max cosine error {cos:.1e}"),
    );
}

fn c7_toy_disentanglement() {
    let cfg = ToyExperimentConfig::default();
    let (_, report) = run_toy_experiment(&cfg, |step, b| {
        if step % 500 == 0 {
            println!("step {step}: total loss {:.4}", b.total);
        }
    })
    .unwrap();
    let ev = &report.evaluation;
    let rec = ev.reconstructed.as_ref().unwrap();
    let rec_attr = ev.reconstruction_attributes.as_ref().unwrap();
    let diversity = ev.diversity_mean_cosine.unwrap();
    let ratio = report.pose_ratio();
    let checks = [
        ("anonymized top-1 ≤ 0.10", ev.anonymized.top1 <= 0.10),
        ("reconstructed top-1 ≥ 0.8", rec.top1 >= 0.8),
        ("pose ratio ≤ 2", ratio.is_some_and(|r| r <= 2.0)),
        ("diversity ≤ 0.7", diversity <= 0.7),
    ];
    for (name, ok) in &checks {
        println!("  {} {name}", if *ok { "ok  " } else { "MISS" });
    }
    verdict(
        7,
        "toy disentanglement",
        checks.iter().all(|(_, ok)| *ok) && report.steps <= 5000,
        format!(
            "{} steps in {:.0}s; anonymized top-1 {:.2} (≤0.10); reconstructed top-1 {:.2} (≥0.8); pose L2 anonymized {:.4} vs reconstructed {:.4}, ratio {} (≤2), unfitted {}+{} of {}; diversity {diversity:.3} (≤0.7), control diversity {:.3}",
            report.steps,
            report.train_seconds,
            ev.anonymized.top1,
            rec.top1,
            ev.attributes.pose_l2,
            rec_attr.pose_l2,
            ratio.map_or("n/a".into(), |r| format!("{r:.2}")),
            ev.attributes.failed_fits,
            rec_attr.failed_fits,
            ev.attributes.n_pairs,
            report.control_diversity,
        ),
    );
}

fn c8_inference_purity() {
    let mut t = common::trainer(2);
    t.train_step().unwrap();
    t.train_step().unwrap();
    let models = t.models().frozen().unwrap();
    let samples = t.corpus().samples[..3].to_vec();
    let before = instrument::snapshot();
    let a = anonymize(&models, &samples, &[1, 2, 3], 20).unwrap();
    let b = anonymize(&models, &samples, &[1, 2, 3], 20).unwrap();
    let (backward, updates) = instrument::snapshot().thread_delta(&before);
    let identical = a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.e_ctrl == y.e_ctrl);
    verdict(
        8,
        "inference purity",
        backward == 0 && updates == 0 && identical,
        format!("gradient passes {backward}, parameter updates {updates}, repeated outputs bit-identical: {identical}"),
    );
}

fn c9_checkpoint_round_trip() {
    let mut t = common::trainer(3);
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), t.models(), t.config(), t.step(), Some(t.optimizer())).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let batch = t.draw_batch(7).unwrap();
    let trainer2 = anonface::pipeline::Trainer::new(t.config().clone(), loaded.models, t.corpus().clone()).unwrap();
    let (a, pa) = t.losses(&batch).unwrap();
    let (b, pb) = trainer2.losses(&batch).unwrap();
    let same_total = common::bits(&a) == common::bits(&b);
    let same_parts = [
        (&pa.diff_noise, &pb.diff_noise),
        (&pa.id_sim, &pb.id_sim),
        (&pa.id_region, &pb.id_region),
        (&pa.kl, &pb.kl),
    ]
    .iter()
    .all(|(x, y)| common::bits(x) == common::bits(y));
    let fa = t.models().frozen().unwrap();
    let fb = trainer2.models().frozen().unwrap();
    let samples = t.corpus().samples[..2].to_vec();
    let ia = anonymize(&fa, &samples, &[5, 6], 8).unwrap();
    let ib = anonymize(&fb, &samples, &[5, 6], 8).unwrap();
    let same_images = ia.iter().zip(&ib).all(|(x, y)| x.image == y.image);
    verdict(
        9,
        "checkpoint round trip",
        same_total && same_parts && same_images,
        format!("loss total bit-identical: {same_total}, loss terms: {same_parts}, anonymized images: {same_images}"),
    );
}

const CRITERIA: [(&str, fn()); 9] = [
    ("c1_orthogonal_identity_sampling", c1_orthogonal_identity_sampling),
    ("c2_diffusion_algebra", c2_diffusion_algebra),
    ("c3_loss_oracles", c3_loss_oracles),
    ("c4_gradient_checks", c4_gradient_checks),
    ("c5_gate_fusion", c5_gate_fusion),
    ("c6_retrieval_metric_oracle", c6_retrieval_metric_oracle),
    ("c7_toy_disentanglement", c7_toy_disentanglement),
    ("c8_inference_purity", c8_inference_purity),
    ("c9_checkpoint_round_trip", c9_checkpoint_round_trip),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        REPORTED.store(false, Ordering::SeqCst);
        if catch_unwind(AssertUnwindSafe(check)).is_err() {
            if !REPORTED.load(Ordering::SeqCst) {
                println!("FAIL {name}: panicked before a verdict (see above)");
            }
            failed.push(name);
        }
        println!("  ({name}: {:.1}s)", start.elapsed().as_secs_f64());
    }
    println!("\nacceptance: {} of {ran} criteria passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

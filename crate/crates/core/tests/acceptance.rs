#![allow(clippy::needless_range_loop)]

//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::time::{Duration, Instant};

use backhaul_coop::conic::{build_relaxation, eval_dual, solve, SolveOptions, SolveStatus};
use backhaul_coop::harness::{
    fixed_channel_regions, generate_channels, monte_carlo_sum_rate, write_mc_csv, ExperimentSpec, FadingModel, RegionSpec,
};
use backhaul_coop::model::{air_region_check, exp2_m1, ChannelState, ConfigDocument, RateSplit, SystemConfig, CVec, C64};
use backhaul_coop::qnm::{qnm_optimize, qnm_quantizer_nt1, QnmEigenState, QnmOptions};
use backhaul_coop::region::{
    alpha_grid, bisect_sum_rate, check_rate_pair, region_boundary, write_csv, CheckOptions, SchemeKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL_R: f64 = 1e-4;

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {n:>2} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn reference_channel() -> (SystemConfig, ChannelState) {
    let doc = ConfigDocument::load(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference_channel.json")).unwrap();
    (doc.system().unwrap(), doc.channel().unwrap().unwrap())
}

fn random_channel(rng: &mut ChaCha8Rng, n_t: usize) -> ChannelState {
    let mut v = || CVec::from_fn(n_t, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    ChannelState::new([[v(), v()], [v(), v()]]).unwrap()
}

fn random_split(rng: &mut ChaCha8Rng) -> RateSplit {
    let mut r_p = [[0.0; 2]; 2];
    let mut r = [0.0; 2];
    for i in 0..2 {
        for j in 0..2 {
            r_p[i][j] = if rng.gen_bool(0.5) { rng.gen_range(0.0..1.0) } else { 0.0 };
        }
        r[i] = r_p[i][0] + r_p[i][1] + rng.gen_range(0.0..1.5);
    }
    RateSplit { r, r_p }
}

#[test]
fn criterion_01_backhaul_saturation() {
    let (cfg, ch) = reference_channel();
    assert_eq!(cfg.c_bh, [1.0, 1.0]);
    assert_eq!(cfg.p, [10.0, 10.0]);
    let t = Instant::now();
    let pt = bisect_sum_rate(&cfg, &ch, 0.5, SchemeKind::Frs, TOL_R, &CheckOptions::default()).unwrap();
    let dt = t.elapsed();
    let ok = (pt.r - 2.0).abs() <= 1e-3 && dt < Duration::from_secs(10);
    report(1, "backhaul saturation", ok, &format!("sum rate {:.6}, {:.2?}", pt.r, dt));
}

#[test]
fn criterion_02_closed_form_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_t = rng.gen_range(1..=2);
        let h = CVec::from_fn(n_t, |_, _| C64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
        let zero = CVec::zeros(n_t);
        let ch = ChannelState::new([[h.clone(), zero.clone()], [zero.clone(), zero]]).unwrap();
        let r = rng.gen_range(0.05..4.0);
        let sigma2 = rng.gen_range(0.1..2.0);
        let expected = exp2_m1(r) * sigma2 / h.norm_squared();
        let p = 2.0 * expected + 1.0;
        let cfg = SystemConfig::new([p, p], [10.0, 10.0], sigma2, n_t).unwrap();
        let rs = RateSplit { r: [r, 0.0], r_p: [[r, 0.0], [0.0, 0.0]] };
        let res = solve(&build_relaxation(&cfg, &ch, &rs).unwrap(), &SolveOptions::default());
        assert_eq!(res.status, SolveStatus::Optimal);
        worst = worst.max((res.objective - expected).abs() / expected);
    }
    report(2, "closed-form solver oracle", worst <= 1e-6, &format!("worst relative error {worst:.2e}"));
}

/// Shared by the duality and rank-one criteria.
struct RandomSweep {
    optimal: usize,
    weak_violations: usize,
    gap_violations: usize,
    worst_gap: f64,
    rank_ok: usize,
    rates_ok: usize,
    fallbacks: usize,
}

fn random_sweep() -> RandomSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = SolveOptions::default();
    let mut s =
        RandomSweep { optimal: 0, weak_violations: 0, gap_violations: 0, worst_gap: 0.0, rank_ok: 0, rates_ok: 0, fallbacks: 0 };
    let mut attempts = 0;
    while s.optimal < 500 {
        attempts += 1;
        assert!(attempts < 5000, "too few feasible instances");
        let n_t = 1 + attempts % 2;
        let ch = random_channel(&mut rng, n_t);
        let p = rng.gen_range(1.0..20.0);
        let cfg = SystemConfig::new([p, p], [10.0, 10.0], 1.0, n_t).unwrap();
        let rs = random_split(&mut rng);
        let prob = build_relaxation(&cfg, &ch, &rs).unwrap();
        let res = solve(&prob, &opts);
        if res.status != SolveStatus::Optimal {
            continue;
        }
        s.optimal += 1;
        let ev = eval_dual(&prob, res.certificate.as_ref().unwrap()).unwrap();
        let scale = res.objective.max(1.0);
        if ev.dual_obj > res.objective + 1e-6 * scale || ev.max_violation > 1e-6 {
            s.weak_violations += 1;
        }
        let gap = (res.objective - ev.dual_obj).abs() / scale;
        s.worst_gap = s.worst_gap.max(gap);
        if gap > 1e-5 {
            s.gap_violations += 1;
        }
        let ext = res.extraction.as_ref().unwrap();
        if ext.max_rank_ratio <= 1e-6 {
            s.rank_ok += 1;
        }
        if ext.fallback_used {
            s.fallbacks += 1;
            println!("rank-one fallback used on instance {attempts}");
        }
        if res.bf.as_ref().is_some_and(|bf| air_region_check(&cfg, &ch, bf, &rs, 1e-6).unwrap()) {
            s.rates_ok += 1;
        }
    }
    s
}

#[test]
fn criterion_03_duality() {
    let s = random_sweep();
    let ok = s.weak_violations == 0 && s.gap_violations == 0;
    report(
        3,
        "zero duality gap",
        ok,
        &format!(
            "{} optima, {} weak-duality violations, worst scaled gap {:.2e}",
            s.optimal, s.weak_violations, s.worst_gap
        ),
    );
}

#[test]
fn criterion_04_rank_one_recovery() {
    let s = random_sweep();
    let frac = s.rank_ok as f64 / s.optimal as f64;
    let ok = frac >= 0.99 && s.rates_ok == s.optimal;
    report(
        4,
        "rank-one recovery",
        ok,
        &format!("{:.1}% rank one, {}/{} rate-feasible, {} fallbacks", 100.0 * frac, s.rates_ok, s.optimal, s.fallbacks),
    );
}

#[test]
fn criterion_05_scheme_inclusion() {
    let chs = generate_channels(&FadingModel { eps: 0.5, n_t: 2, seed: 5 }, 50).unwrap();
    let cfg = SystemConfig::new([10.0, 10.0], [3.0, 3.0], 1.0, 2).unwrap();
    let alphas = alpha_grid(21);
    let opts = CheckOptions::default();
    let mut violations = Vec::new();
    for (k, ch) in chs.iter().enumerate() {
        let frs = region_boundary(&cfg, ch, SchemeKind::Frs, &alphas, TOL_R, &opts).unwrap();
        for s in [SchemeKind::Ars, SchemeKind::Ic, SchemeKind::Nm] {
            let other = region_boundary(&cfg, ch, s, &alphas, TOL_R, &opts).unwrap();
            for (f, o) in frs.iter().zip(&other) {
                if f.r < o.r - TOL_R {
                    violations.push(format!("channel {k} {s} alpha {}: {} < {}", f.alpha, f.r, o.r));
                }
            }
        }
    }
    report(5, "scheme inclusion", violations.is_empty(), &format!("50 channels x 21 alphas, violations {violations:?}"));
}

#[test]
fn criterion_06_large_backhaul_limits() {
    let (cfg, ch) = reference_channel();
    let cfg = SystemConfig { c_bh: [100.0, 100.0], ..cfg };
    let alphas = alpha_grid(11);
    let opts = CheckOptions::default();
    let frs = region_boundary(&cfg, &ch, SchemeKind::Frs, &alphas, TOL_R, &opts).unwrap();
    let nm = region_boundary(&cfg, &ch, SchemeKind::Nm, &alphas, TOL_R, &opts).unwrap();
    let qopts = QnmOptions::default();
    let (mut frs_dev, mut qnm_dev) = (0.0f64, 0.0f64);
    for ((f, n), &a) in frs.iter().zip(&nm).zip(&alphas) {
        frs_dev = frs_dev.max((f.r - n.r).abs());
        let q = qnm_optimize(&cfg, &ch, a, &qopts).unwrap();
        qnm_dev = qnm_dev.max((q.r - n.r).abs());
    }
    let ok = frs_dev <= 1e-3 && qnm_dev <= 1e-2;
    report(6, "large-backhaul limits", ok, &format!("max |FRS-NM| {frs_dev:.2e}, max |QNM-NM| {qnm_dev:.2e}"));
}

#[test]
fn criterion_07_monte_carlo_trends() {
    let spec = ExperimentSpec { eps: 0.1, n_samples: 100, seed: 7, ..Default::default() };
    let t = Instant::now();
    let cells = monte_carlo_sum_rate(&spec, &CheckOptions::default()).unwrap();
    let dt = t.elapsed();
    let cell = |snr: f64, c: f64| cells.iter().find(|x| x.snr_db == snr && x.c == c).unwrap();

    let sat = cell(20.0, 1.0).mean_sum_rate;
    let a = (sat - 2.0).abs() <= 0.02;
    let low_snr_private = spec.snr_db.iter().filter(|&&s| s <= 10.0).map(|&s| cell(s, 10.0).mean_private_fraction).fold(0.0, f64::max);
    let b = low_snr_private <= 0.05;
    let mut c = true;
    for (i, &s) in spec.snr_db.iter().enumerate() {
        for (j, &cap) in spec.c.iter().enumerate() {
            let here = cell(s, cap).mean_sum_rate;
            if i > 0 && here < cell(spec.snr_db[i - 1], cap).mean_sum_rate - TOL_R {
                c = false;
            }
            if j > 0 && here < cell(s, spec.c[j - 1]).mean_sum_rate - TOL_R {
                c = false;
            }
        }
    }
    let failed: usize = cells.iter().map(|x| x.failed_samples).sum();
    let ok = a && b && c && dt < Duration::from_secs(600);
    report(
        7,
        "Monte Carlo trends",
        ok,
        &format!(
            "C=1 at 20 dB {sat:.4}, C=10 max private fraction at <=10 dB {low_snr_private:.4}, monotone {c}, {failed} failed samples, {dt:.1?}"
        ),
    );
}

#[test]
fn criterion_08_corner_probe() {
    let chs = generate_channels(&FadingModel { eps: 0.5, n_t: 2, seed: 8 }, 20).unwrap();
    let cfg = SystemConfig::new([10.0, 10.0], [3.0, 3.0], 1.0, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = CheckOptions::default();
    let probe = CheckOptions { exhaustive_k: 10, ..CheckOptions::default() };
    let (mut pairs, mut found) = (0, Vec::new());
    for (k, ch) in chs.iter().enumerate() {
        let alpha = rng.gen_range(0.1..0.9);
        let edge = bisect_sum_rate(&cfg, ch, alpha, SchemeKind::Frs, TOL_R, &base).unwrap();
        for f in [1.0 + 2.0 * TOL_R, 1.01, 1.05] {
            let r = edge.r * f;
            let check = check_rate_pair(&cfg, ch, [alpha * r, (1.0 - alpha) * r], SchemeKind::Frs, &probe).unwrap();
            pairs += 1;
            if let Some(pt) = check.interior_counterexample {
                found.push((k, alpha, r, pt));
            }
        }
    }
    for c in &found {
        println!("interior point feasible with every corner infeasible: channel {}, alpha {:.3}, r {:.5}, at {:?}", c.0, c.1, c.2, c.3);
    }
    report(8, "corner conjecture probe", true, &format!("{pairs} pairs probed on 20 channels, {} counterexamples", found.len()));
}

#[test]
fn criterion_09_qnm_single_antenna_closed_form() {
    let examples_ok = qnm_quantizer_nt1(1.0, 1.0).unwrap() == 1.0 && qnm_quantizer_nt1(3.0, 2.0).unwrap() == 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let opts = QnmOptions::default();
    let (mut worst, mut designs, mut idle) = (0.0f64, 0, 0);
    for _ in 0..10 {
        let ch = random_channel(&mut rng, 1);
        let c = rng.gen_range(0.5..4.0);
        let cfg = SystemConfig::new([10.0, 10.0], [c, c], 1.0, 1).unwrap();
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let q = qnm_optimize(&cfg, &ch, a, &opts).unwrap();
            designs += 1;
            for j in 0..2 {
                let e = QnmEigenState::from_design(&q.design, j);
                if e.lam[0] == 0.0 {
                    idle += 1;
                    continue;
                }
                worst = worst.max((e.backhaul_rate() - c).abs());
            }
        }
    }
    let ok = examples_ok && worst <= 1e-8;
    report(
        9,
        "single-antenna QNM closed form",
        ok,
        &format!("{designs} designs, worst |I - C| {worst:.2e}, {idle} idle base stations, quantizer examples {examples_ok}"),
    );
}

fn region_bytes(threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let (cfg, ch) = reference_channel();
        let spec = RegionSpec {
            schemes: vec![SchemeKind::Frs, SchemeKind::Ic],
            alpha_points: 5,
            qnm_opts: QnmOptions { random_starts: 4, ..QnmOptions::default() },
            ..RegionSpec::default()
        };
        let mut out = Vec::new();
        for curve in fixed_channel_regions(&cfg, &ch, &spec).unwrap() {
            write_csv(&mut out, curve.rows).unwrap();
        }
        let mc = ExperimentSpec { snr_db: vec![5.0, 15.0], c: vec![1.0, 5.0], n_samples: 6, seed: 10, ..Default::default() };
        write_mc_csv(&mut out, &monte_carlo_sum_rate(&mc, &CheckOptions::default()).unwrap()).unwrap();
        out
    })
}

#[test]
fn criterion_10_determinism() {
    let a = region_bytes(1);
    let b = region_bytes(1);
    let c = region_bytes(3);
    let ok = a == b && a == c;
    report(10, "determinism", ok, &format!("{} bytes, identical across repeats and thread counts: {ok}", a.len()));
}

#![allow(clippy::needless_range_loop)]

use backhaul_coop::conic::{build_relaxation, eval_dual, kkt_structure_check, solve, SolveOptions, SolveStatus, VarSet};
use backhaul_coop::model::{air_region_check, ChannelState, RateSplit, SystemConfig, CVec, C64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn random_instance(rng: &mut ChaCha8Rng, n_t: usize) -> (SystemConfig, ChannelState, RateSplit) {
    let ch = random_channel(rng, n_t);
    let p = rng.gen_range(1.0..20.0);
    let cfg = SystemConfig::new([p, p], [10.0, 10.0], 1.0, n_t).unwrap();
    (cfg, ch, random_split(rng))
}

#[test]
fn optima_are_certified_and_rank_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = SolveOptions::default();
    let (mut optimal, mut kkt_ok) = (0, 0);
    for k in 0..300 {
        let (cfg, ch, rs) = random_instance(&mut rng, 1 + k % 2);
        let prob = build_relaxation(&cfg, &ch, &rs).unwrap();
        let res = solve(&prob, &opts);
        if res.status != SolveStatus::Optimal {
            assert_eq!(res.status, SolveStatus::Infeasible, "instance {k}");
            continue;
        }
        optimal += 1;
        let ev = eval_dual(&prob, &res.certificate.unwrap()).unwrap();
        let scale = res.objective.max(1.0);
        assert!(ev.dual_obj <= res.objective + 1e-6 * scale, "instance {k}");
        assert!((res.objective - ev.dual_obj).abs() <= 1e-5 * scale, "instance {k}");
        assert!(ev.max_violation <= 1e-6, "instance {k}");

        let ext = res.extraction.as_ref().unwrap();
        assert!(ext.rank_ok && !ext.fallback_used, "instance {k}: ratio {}", ext.max_rank_ratio);
        let bf = res.bf.as_ref().unwrap();
        assert!(air_region_check(&cfg, &ch, bf, &rs, 1e-6).unwrap(), "instance {k}");
        let p = VarSet::from_beamformers(bf).total_power();
        assert!((p - res.objective).abs() <= 1e-5 * scale, "instance {k}");

        if kkt_structure_check(&prob, &res, 1e-5).unwrap().all() {
            kkt_ok += 1;
        }
    }
    assert!(optimal > 150);
    assert!(kkt_ok as f64 >= 0.95 * optimal as f64, "{kkt_ok}/{optimal}");
}

#[test]
fn infeasible_rates_stay_infeasible_when_raised() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = SolveOptions::default();
    for k in 0..100 {
        let (cfg, ch, rs) = random_instance(&mut rng, 2);
        let res = solve(&build_relaxation(&cfg, &ch, &rs).unwrap(), &opts);
        let scaled = |f: f64| RateSplit { r: rs.r.map(|x| x * f), r_p: rs.r_p.map(|row| row.map(|x| x * f)) };
        let lower = solve(&build_relaxation(&cfg, &ch, &scaled(0.7)).unwrap(), &opts);
        if res.is_feasible() {
            assert!(lower.is_feasible(), "instance {k}");
            assert!(lower.objective <= res.objective + 1e-6, "instance {k}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weak_duality_and_monotone_feasibility(seed in any::<u64>(), shrink in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cfg, ch, rs) = random_instance(&mut rng, 2);
        let opts = SolveOptions::default();
        let prob = build_relaxation(&cfg, &ch, &rs).unwrap();
        let res = solve(&prob, &opts);
        if res.is_feasible() {
            let ev = eval_dual(&prob, &res.certificate.unwrap()).unwrap();
            prop_assert!(ev.dual_obj <= res.objective + 1e-6 * res.objective.max(1.0));
            let smaller = RateSplit { r: rs.r.map(|x| x * shrink), r_p: rs.r_p.map(|row| row.map(|x| x * shrink)) };
            prop_assert!(solve(&build_relaxation(&cfg, &ch, &smaller).unwrap(), &opts).is_feasible());
        }
    }
}

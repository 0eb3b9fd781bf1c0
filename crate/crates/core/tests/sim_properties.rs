use asymrd::rd::log_spaced;
use asymrd::simgen::{
    compose_rho_true, make_antisym, make_rho_sym, run_replicate, AntisymScale, SimConfig, SimSettings, Structure,
};
use proptest::prelude::*;

fn structure() -> impl Strategy<Value = Structure> {
    prop_oneof![Just(Structure::BroadWeak), Just(Structure::Sink)]
}

proptest! {
    #[test]
    fn unclipped_antisymmetry_is_exactly_a_times_direction(
        s in structure(), seed in any::<u64>(), k in 3usize..12, a in 0.0f64..3.0,
    ) {
        let sym = make_rho_sym(seed, k);
        let dir = make_antisym(s, seed, k, 2.min(k - 1), AntisymScale::UnitFrobenius);
        for i in 0..k {
            prop_assert_eq!(dir[(i, i)], 0.0);
            for j in 0..k {
                prop_assert_eq!(dir[(i, j)], -dir[(j, i)]);
            }
        }
        prop_assert!((dir.frobenius_norm() - 1.0).abs() < 1e-12);
        let composed = compose_rho_true(&sym, &dir, a);
        let anti = composed.rho.matrix().antisymmetric_part();
        if composed.clipped == 0 {
            prop_assert!(anti.max_abs_diff(&dir.scale(a)) < 1e-12);
        }
        prop_assert!(anti.frobenius_norm() <= a + 1e-12);
        let m = composed.rho.matrix();
        for i in 0..k {
            prop_assert_eq!(m[(i, i)], 0.0);
            prop_assert!(m.row(i).iter().all(|v| *v >= 0.0));
        }
    }
}

fn light_settings() -> SimSettings {
    SimSettings {
        lambda_grid: log_spaced(0.1, 100.0, 15),
        ..SimSettings::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn replicates_are_pure_functions_of_config(s in structure(), seed in any::<u64>(), a in 0.0f64..2.0) {
        let cfg = SimConfig {
            structure: s,
            a,
            lambda_gen: 2.0,
            n_per_row: 80,
            k: 5,
            n_sinks: 2,
            seed,
        };
        let settings = light_settings();
        let r1 = run_replicate(&cfg, &settings).unwrap();
        let r2 = run_replicate(&cfg, &settings).unwrap();
        prop_assert_eq!(&r1, &r2);
        prop_assert_eq!(r1.recovery.is_some(), r1.rho_hat.is_some());
        if let Some(rec) = r1.recovery {
            prop_assert_eq!(rec.strict_pass, rec.corr_sym.is_some_and(|c| c > 0.2));
            for c in [rec.corr_sym, rec.corr_antisym].into_iter().flatten() {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}

use asymrd::channels::{BlockKey, ConfusionCounts};
use asymrd::fit::{channel_log_likelihood, map_fit_distortion, recovery_diagnostics, FitConfig};
use asymrd::matrix::SquareMatrix;
use asymrd::rd::{ba_channel, ba_channel_monitored, log_spaced, signatures, trace_frontier, BaOptions, DistortionMatrix};
use proptest::prelude::*;

fn rho_strategy() -> impl Strategy<Value = DistortionMatrix> {
    (2usize..6)
        .prop_flat_map(|k| (Just(k), prop::collection::vec(0.05f64..3.0, k * k)))
        .prop_map(|(k, v)| {
            DistortionMatrix::new(SquareMatrix::from_fn(k, |i, j| if i == j { 0.0 } else { v[i * k + j] })).unwrap()
        })
}

fn prior_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn rho_and_prior() -> impl Strategy<Value = (DistortionMatrix, Vec<f64>)> {
    rho_strategy().prop_flat_map(|r| {
        let k = r.k();
        (Just(r), prior_strategy(k))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lagrangian_never_rises((rho, prior) in rho_and_prior(), lambda in 0.05f64..50.0) {
        let mut last = f64::INFINITY;
        let mut worst = 0.0f64;
        let opts = BaOptions { tol: 1e-12, max_iter: 2000 };
        ba_channel_monitored(&rho, lambda, &prior, None, opts, &mut |_, l| {
            worst = worst.max(l - last);
            last = l;
        })
        .unwrap();
        prop_assert!(worst <= 1e-10, "Lagrangian rose by {}", worst);
    }

    #[test]
    fn frontier_points_are_feasible_and_ordered((rho, prior) in rho_and_prior()) {
        let grid = log_spaced(0.1, 100.0, 25);
        let f = trace_frontier(&rho, &grid, &prior, BaOptions::default()).unwrap();
        let ln_k = (rho.k() as f64).ln();
        for p in f.points() {
            prop_assert!(p.rate >= -1e-12 && p.rate <= ln_k + 1e-9);
            prop_assert!(p.distortion >= -1e-12);
        }
        for w in f.points().windows(2) {
            prop_assert!(w[1].lambda > w[0].lambda);
            // Points that hit max_iter are flagged and may sit off the curve.
            if !(w[0].converged && w[1].converged) {
                continue;
            }
            prop_assert!(w[1].distortion <= w[0].distortion + 1e-8);
            prop_assert!(w[1].rate >= w[0].rate - 1e-8);
        }
        if let Ok(s) = signatures(&f) {
            prop_assert!(s.kappa >= 0.0 && s.auc >= 0.0);
            prop_assert!(s.n_segments < f.points().len());
        }
    }

    #[test]
    fn cost_scale_trades_against_lambda((rho, prior) in rho_and_prior(), c in 0.2f64..5.0) {
        let grid = log_spaced(0.1, 20.0, 12);
        let scaled_grid: Vec<f64> = grid.iter().map(|l| c * l).collect();
        let opts = BaOptions { tol: 1e-13, max_iter: 50_000 };
        let a = trace_frontier(&rho.scaled(c), &grid, &prior, opts).unwrap();
        let b = trace_frontier(&rho, &scaled_grid, &prior, opts).unwrap();
        for (p, q) in a.points().iter().zip(b.points()) {
            prop_assert!((p.rate - q.rate).abs() < 1e-8);
            prop_assert!((p.distortion - c * q.distortion).abs() < 1e-8 * c.max(1.0));
        }
    }

    #[test]
    fn signatures_are_deterministic((rho, prior) in rho_and_prior()) {
        let grid = log_spaced(0.1, 100.0, 20);
        let a = trace_frontier(&rho, &grid, &prior, BaOptions::default()).unwrap();
        let b = trace_frontier(&rho, &grid, &prior, BaOptions::default()).unwrap();
        match (signatures(&a), signatures(&b)) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x.beta.to_bits(), y.beta.to_bits());
                prop_assert_eq!(x.kappa.to_bits(), y.kappa.to_bits());
                prop_assert_eq!(x.auc.to_bits(), y.auc.to_bits());
            }
            (Err(x), Err(y)) => prop_assert_eq!(x, y),
            _ => prop_assert!(false, "diverging outcomes"),
        }
    }
}

fn counts(k: usize, flat: Vec<u64>) -> ConfusionCounts {
    ConfusionCounts::new(k, flat, BlockKey::simulated()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fitted_costs_are_valid_and_ascend(k in 2usize..5, flat in prop::collection::vec(0u64..40, 16)) {
        let mut flat: Vec<u64> = flat[..k * k].to_vec();
        for i in 0..k {
            flat[i * k + i] += 20;
        }
        let fit = map_fit_distortion(&counts(k, flat), &FitConfig::default()).unwrap();
        let m = fit.rho_hat.matrix();
        for i in 0..k {
            prop_assert_eq!(m[(i, i)], 0.0);
            prop_assert!(m.row(i).iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
        for w in fit.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} then {}", w[0], w[1]);
        }
    }
}

#[test]
fn two_class_likelihood_is_the_multinomial_log_mass() {
    // Symmetric costs under a uniform prior give the closed-form BSC channel.
    let rho = DistortionMatrix::from_rows(&[[0.0, 0.8], [0.8, 0.0]]).unwrap();
    let n = counts(2, vec![70, 30, 25, 75]);
    let ll = channel_log_likelihood(&n, &rho, 1.0, BaOptions { tol: 1e-14, max_iter: 10_000 });
    // Row masses 100/100 make the prior uniform.
    let q = 1.0 / (1.0 + 0.8f64.exp());
    let direct = 70.0 * (1.0 - q).ln() + 30.0 * q.ln() + 25.0 * q.ln() + 75.0 * (1.0 - q).ln();
    assert!((ll - direct).abs() < 1e-9, "{ll} vs {direct}");
}

#[test]
fn fit_absorbs_generation_lambda_into_cost_scale() {
    let t = DistortionMatrix::from_rows(&[[0.0, 1.0, 1.4], [0.6, 0.0, 0.9], [1.2, 0.5, 0.0]]).unwrap();
    let lambda_gen = 3.0;
    let uniform = [1.0 / 3.0; 3];
    let sol = ba_channel(&t, lambda_gen, &uniform, BaOptions { tol: 1e-14, max_iter: 100_000 }).unwrap();
    let n = 1e7;
    let flat: Vec<u64> = sol.channel.matrix().as_slice().iter().map(|q| (n * q).round() as u64).collect();
    let fit = map_fit_distortion(&counts(3, flat), &FitConfig::default()).unwrap();
    let d = recovery_diagnostics(&t, &fit.rho_hat);
    assert!(d.corr_sym.unwrap() > 0.99, "{d:?}");
    assert!(d.strict_pass);
    // Cost ratios are identified only up to the additive row shifts the
    // BA channel cannot see, so compare the overall scale.
    let ratio = fit.rho_hat.matrix().frobenius_norm() / t.matrix().frobenius_norm();
    assert!((ratio - lambda_gen).abs() < 0.75, "scale ratio {ratio}");
}

#[test]
fn recovery_correlation_ignores_cost_scale() {
    let t = DistortionMatrix::from_rows(&[[0.0, 1.0, 2.0], [1.5, 0.0, 0.7], [0.4, 1.1, 0.0]]).unwrap();
    let h = DistortionMatrix::from_rows(&[[0.0, 0.9, 2.2], [1.4, 0.0, 0.8], [0.5, 1.0, 0.0]]).unwrap();
    let base = recovery_diagnostics(&t, &h);
    for c in [0.01, 0.5, 3.0, 100.0] {
        let s = recovery_diagnostics(&t, &h.scaled(c));
        assert!((s.corr_sym.unwrap() - base.corr_sym.unwrap()).abs() < 1e-12);
        assert!((s.corr_antisym.unwrap() - base.corr_antisym.unwrap()).abs() < 1e-12);
    }
}

mod common;

use approx::assert_abs_diff_eq;
use counterfact::lasso::{self, LassoConfig};
use counterfact::Panel;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

const RAW: LassoConfig = LassoConfig {
    standardize: false,
    tol: 1e-12,
    max_sweeps: 1_000_000,
};

/// OLS of the treated pre-path on an intercept and every donor.
fn ols(p: &Panel) -> (Vec<f64>, f64) {
    let t0 = p.t0_index();
    let d = p.donor_matrix();
    let j = d.ncols();
    let x = DMatrix::from_fn(t0, j + 1, |t, c| if c == 0 { 1.0 } else { d[(t, c - 1)] });
    let y = DVector::from_column_slice(&p.treated_series()[..t0]);
    let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
    (beta.rows(1, j).iter().copied().collect(), beta[0])
}

fn pre_sse(fit: &lasso::LassoFit) -> f64 {
    fit.gaps[..fit.t0_index].iter().map(|g| g * g).sum()
}

#[test]
fn zero_penalty_is_least_squares() {
    for seed in 0..5 {
        let p = common::random_panel(seed, 5, 20, 15);
        let (w, b0) = ols(&p);
        for config in [RAW, LassoConfig { standardize: true, ..RAW }] {
            let fit = lasso::fit_lasso_sc_with(&p, 0.0, &config).unwrap();
            for (a, b) in fit.weights.w.iter().zip(&w) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
            assert_abs_diff_eq!(fit.weights.intercept, b0, epsilon = 1e-6);
        }
    }
}

#[test]
fn penalty_above_max_zeroes_weights() {
    let p = common::random_panel(9, 6, 14, 10);
    for config in [RAW, LassoConfig::default()] {
        let lm = lasso::lambda_max(&p, &config);
        let fit = lasso::fit_lasso_sc_with(&p, lm * 1.0001, &config).unwrap();
        assert!(fit.weights.w.iter().all(|&w| w == 0.0));
        let mean = p.treated_series()[..10].iter().sum::<f64>() / 10.0;
        assert_abs_diff_eq!(fit.weights.intercept, mean, epsilon = 1e-12);
        let below = lasso::fit_lasso_sc_with(&p, lm * 0.9, &config).unwrap();
        assert!(below.weights.w.iter().any(|&w| w != 0.0));
    }
}

#[test]
fn orthogonal_design_soft_thresholds() {
    // centered orthogonal donor columns of equal norm over the pre-period
    let t0 = 8;
    let h = |k: usize, t: usize| if (t >> k) & 1 == 0 { 1.0 } else { -1.0 };
    let coef = [3.0, -1.0, 0.4];
    let mut r = common::rng(4);
    let noise: Vec<f64> = (0..10).map(|_| r.random_range(-0.2..0.2)).collect();
    let y = DMatrix::from_fn(4, 10, |i, t| {
        let t8 = t % t0;
        if i == 0 {
            10.0 + (0..3).map(|k| coef[k] * h(k, t8)).sum::<f64>() + noise[t]
        } else {
            5.0 + h(i - 1, t8)
        }
    });
    let p = Panel::new(common::unit_names(4), (0..10).collect(), y, "T", t0).unwrap();
    let ys = p.treated_series();
    let ym = ys[..t0].iter().sum::<f64>() / t0 as f64;
    for lambda in [0.5, 4.0, 20.0] {
        let fit = lasso::fit_lasso_sc_with(&p, lambda, &RAW).unwrap();
        for k in 0..3 {
            let z: f64 = (0..t0).map(|t| h(k, t) * (ys[t] - ym)).sum();
            let want = lasso::soft_threshold(z, lambda / 2.0) / t0 as f64;
            assert_abs_diff_eq!(fit.weights.w[k], want, epsilon = 1e-9);
        }
    }
}

#[test]
fn noiseless_combination_prefers_small_penalty() {
    let base = common::random_panel(14, 6, 20, 16);
    let mut y = base.outcomes().clone();
    for t in 0..20 {
        y[(0, t)] = 1.0 + 0.8 * y[(2, t)] - 0.3 * y[(4, t)] + 0.5 * y[(5, t)];
    }
    let p = base.with_outcomes(y).unwrap();
    let grid = lasso::default_grid(&p, &LassoConfig::default());
    let (chosen, cv) = lasso::cv_lambda_with(&p, &grid, &LassoConfig::default()).unwrap();
    let lm = lasso::lambda_max(&p, &LassoConfig::default());
    assert!(chosen < 1e-2 * lm, "{chosen} vs {lm}");
    let best = cv.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < 1e-4, "{best}");
    assert_eq!(lasso::cv_lambda(&p, &grid).unwrap(), chosen);
}

#[test]
fn cv_ties_pick_larger_penalty() {
    let p = common::random_panel(2, 5, 12, 8);
    let lm = lasso::lambda_max(&p, &LassoConfig::default());
    // every penalty above the max gives the same intercept-only fit
    let grid = [2.0 * lm, 5.0 * lm, 3.0 * lm];
    assert_eq!(lasso::cv_lambda(&p, &grid).unwrap(), 5.0 * lm);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalty_path_is_monotone(seed in any::<u64>()) {
        let p = common::random_panel(seed, 7, 16, 12);
        let lm = lasso::lambda_max(&p, &RAW);
        let mut prev_l1 = f64::INFINITY;
        let mut prev_sse = 0.0;
        for k in 0..12 {
            let lambda = lm * 10f64.powf(-3.0 + 3.0 * k as f64 / 11.0);
            let fit = lasso::fit_lasso_sc_with(&p, lambda, &RAW).unwrap();
            let l1: f64 = fit.weights.w.iter().map(|w| w.abs()).sum();
            let sse = pre_sse(&fit);
            prop_assert!(l1 <= prev_l1 * (1.0 + 1e-7) + 1e-9);
            prop_assert!(sse >= prev_sse * (1.0 - 1e-7) - 1e-9);
            prev_l1 = l1;
            prev_sse = sse;
        }
    }

    #[test]
    fn att_is_mean_post_gap(seed in any::<u64>(), lambda in 0.0f64..50.0) {
        let p = common::random_panel(seed, 5, 12, 8);
        let fit = lasso::fit_lasso_sc(&p, lambda).unwrap();
        let m = fit.effects().iter().sum::<f64>() / 4.0;
        prop_assert!((fit.att - m).abs() < 1e-12);
    }
}

mod common;

use approx::assert_abs_diff_eq;
use counterfact::gsc::{self, GscConfig};
use counterfact::oracle::{self, FactorDgpSpec};
use counterfact::Panel;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn quick(r: Option<usize>) -> GscConfig {
    GscConfig {
        r,
        bootstrap: 0,
        placebo: false,
        ..GscConfig::default()
    }
}

/// Exact interactive-effects panel: level + unit effect + time effect +
/// loading·factor, with no noise.
fn noiseless(seed: u64, n: usize, t: usize, t0: usize, r: usize) -> Panel {
    let mut g = common::rng(seed);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| g.sample(StandardNormal)).collect() };
    let alpha = draw(n);
    let xi = draw(t);
    let lam = draw(n * r);
    let f = draw(t * r);
    let y = DMatrix::from_fn(n, t, |i, s| {
        20.0 + alpha[i] + xi[s] + (0..r).map(|k| lam[i * r + k] * f[s * r + k]).sum::<f64>()
    });
    Panel::new(common::unit_names(n), (0..t as i64).collect(), y, "T", t0).unwrap()
}

/// Cosine of the largest principal angle between two column spaces.
fn min_cos(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    (qa.transpose() * qb).singular_values().min()
}

#[test]
fn zero_factors_is_difference_in_differences() {
    for seed in 0..5 {
        let p = common::random_panel(seed, 8, 15, 10);
        let fit = gsc::estimate_att(&p, &quick(Some(0))).unwrap();
        assert_abs_diff_eq!(fit.att, common::did(&p), epsilon = 1e-10);
    }
}

#[test]
fn noiseless_fit_is_exact_and_identified() {
    let p = noiseless(3, 12, 20, 14, 2);
    let m = gsc::fit_ife(&p, 2).unwrap();
    let y = p.donor_matrix().transpose();
    for i in 0..y.nrows() {
        for t in 0..y.ncols() {
            assert_abs_diff_eq!(m.fitted(i, t), y[(i, t)], epsilon = 1e-8);
        }
    }
    let ftf = m.factors.transpose() * &m.factors;
    assert!((ftf - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-10);
    let ltl = m.loadings.transpose() * &m.loadings;
    assert!(ltl[(0, 1)].abs() < 1e-8 * ltl[(0, 0)]);
    assert!(ltl[(0, 0)] >= ltl[(1, 1)]);
    assert_abs_diff_eq!(m.unit_effects.iter().sum::<f64>(), 0.0, epsilon = 1e-9);
    let fit = gsc::estimate_att(&p, &quick(Some(2))).unwrap();
    assert!(fit.gaps.iter().all(|g| g.abs() < 1e-6));
}

#[test]
fn objective_never_increases() {
    let p = oracle::simulate_panel(&FactorDgpSpec {
        n_donors: 20,
        noise_sigma: 0.5,
        ..FactorDgpSpec::default()
    })
    .unwrap();
    let m = gsc::fit_ife(&p, 2).unwrap();
    assert!(m.iterations > 1);
    for w in m.objective_history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12));
    }
}

#[test]
fn factor_space_matches_generating_factors() {
    for seed in 0..5 {
        let sim = oracle::simulate(&FactorDgpSpec {
            n_donors: 40,
            seed,
            ..FactorDgpSpec::default()
        })
        .unwrap();
        let m = gsc::fit_ife(&sim.panel, 2).unwrap();
        // double demeaning leaves the time-centered factors
        let mut f = sim.factors.clone();
        for k in 0..f.ncols() {
            let mu = f.column(k).mean();
            f.column_mut(k).add_scalar_mut(-mu);
        }
        let angle = min_cos(&m.factors, &f).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 5.0, "seed {seed}: {angle:.2} degrees");
    }
}

#[test]
fn counterfactual_is_rotation_invariant() {
    let p = oracle::simulate_panel(&FactorDgpSpec::default()).unwrap();
    let m = gsc::fit_ife(&p, 2).unwrap();
    let (c, s) = (0.6f64, 0.8f64);
    let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let mut turned = m.clone();
    turned.factors = &m.factors * &rot;
    turned.loadings = &m.loadings * &rot;
    let y = p.treated_series();
    let a = gsc::counterfactual(&m, &y, p.t0_index()).unwrap();
    let b = gsc::counterfactual(&turned, &y, p.t0_index()).unwrap();
    for (x, z) in a.iter().zip(&b) {
        assert_abs_diff_eq!(x, z, epsilon = 1e-9);
    }
}

#[test]
fn duplicate_units_share_loadings() {
    let base = oracle::simulate_panel(&FactorDgpSpec::default()).unwrap();
    let y = base.outcomes();
    let n = y.nrows();
    let dup = DMatrix::from_fn(n + 1, y.ncols(), |i, t| y[(i.min(n - 1), t)]);
    let mut units = base.units().to_vec();
    units.push("copy".into());
    let p = Panel::new(units, base.times().to_vec(), dup, base.treated(), base.t0_index()).unwrap();
    let m = gsc::fit_ife(&p, 2).unwrap();
    let j = m.loadings.nrows();
    for k in 0..2 {
        assert_abs_diff_eq!(m.loadings[(j - 1, k)], m.loadings[(j - 2, k)], epsilon = 1e-9);
    }
    assert_abs_diff_eq!(m.unit_effects[j - 1], m.unit_effects[j - 2], epsilon = 1e-9);
}

#[test]
fn bootstrap_is_seeded() {
    let p = oracle::simulate_panel(&FactorDgpSpec {
        effect: oracle::Effect::Constant(1.0),
        ..FactorDgpSpec::default()
    })
    .unwrap();
    let cfg = GscConfig {
        r: Some(2),
        bootstrap: 60,
        seed: 5,
        ..GscConfig::default()
    };
    let a = gsc::estimate_att(&p, &cfg).unwrap();
    let b = gsc::estimate_att(&p, &cfg).unwrap();
    assert_eq!(a, b);
    let c = gsc::estimate_att(&p, &GscConfig { seed: 6, ..cfg.clone() }).unwrap();
    assert_ne!(a.se, c.se);
    assert_eq!(a.att, c.att);
    assert!(a.ci.0 < a.att && a.att < a.ci.1 && a.se > 0.0);
    assert!(a.placebo.is_some());
}

#[test]
fn noiseless_single_factor_selects_one() {
    let p = noiseless(8, 10, 24, 16, 1);
    assert_eq!(gsc::cross_validate_factors(&p, 4).unwrap(), 1);
    let errs = gsc::factor_cv_errors(&p, 4).unwrap();
    assert!(errs[1] < 1e-12 && errs[0] > 1e-3);
}

#[test]
fn zero_r_max_selects_zero() {
    let p = oracle::simulate_panel(&FactorDgpSpec::default()).unwrap();
    assert_eq!(gsc::cross_validate_factors(&p, 0).unwrap(), 0);
    assert!(gsc::cross_validate_factors(&p, 9).is_err());
}

#[test]
fn selection_ties_go_to_fewer_factors() {
    assert_eq!(gsc::select_factor_count(&[2.0, 1.0, 1.0, 3.0]), 1);
    assert_eq!(gsc::select_factor_count(&[1.0, f64::INFINITY]), 0);
}

#[test]
fn too_many_factors_rejected() {
    let p = noiseless(2, 8, 12, 8, 1);
    assert!(matches!(
        gsc::fit_ife(&p, 3),
        Err(counterfact::Error::RankDeficiency { requested: 3, rank: 1 })
    ));
    assert!(gsc::fit_ife(&p, 6).is_err());
}

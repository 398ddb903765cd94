mod common;

use counterfact::inference::{self, PlaceboConfig, Tail};
use counterfact::scm::{self, ScmConfig};
use counterfact::{Error, Panel};
use proptest::prelude::*;

fn uniform(multiplier: f64) -> PlaceboConfig {
    PlaceboConfig {
        scm: ScmConfig::uniform(),
        mspe_multiplier: multiplier,
        tail: Tail::Abs,
    }
}

fn with_effect(p: &Panel, effect: f64) -> Panel {
    let mut y = p.outcomes().clone();
    let tr = p.treated_index();
    for t in p.t0_index()..p.n_times() {
        y[(tr, t)] += effect;
    }
    p.with_outcomes(y).unwrap()
}

#[test]
fn p_values_match_direct_count() {
    let p = common::random_panel(4, 9, 14, 9);
    let d = inference::in_space_placebos(&p, &uniform(5.0)).unwrap();
    let bound = 5.0 * d.treated_fit.pre_mspe();
    let kept: Vec<_> = d
        .placebos
        .iter()
        .filter_map(|r| r.fit.as_ref())
        .filter(|f| f.pre_rmse * f.pre_rmse <= bound)
        .collect();
    assert_eq!(d.n_kept(), kept.len());
    for (s, &pv) in d.p_values.iter().enumerate() {
        let th = d.treated_fit.gaps[9 + s].abs();
        let m = kept.iter().filter(|f| f.gaps[9 + s].abs() >= th).count();
        assert_eq!(pv, m as f64 / kept.len() as f64);
    }
    assert_eq!(d.post_times, p.times()[9..].to_vec());
}

#[test]
fn large_effect_ranks_first() {
    let p = with_effect(&common::random_panel(8, 8, 12, 8), 100.0);
    let d = inference::in_space_placebos(&p, &uniform(f64::INFINITY)).unwrap();
    assert!(d.p_values.iter().all(|&v| v == 0.0));
    assert_eq!(d.ratio_p_value, 0.0);
    assert_eq!(d.rmse_ratios[0].unit, "T");
}

#[test]
fn upper_tail_ignores_negative_effects() {
    let base = common::random_panel(8, 8, 12, 8);
    let lifted = base.with_outcomes(base.outcomes().add_scalar(200.0)).unwrap();
    let p = with_effect(&lifted, -100.0);
    let mut c = uniform(f64::INFINITY);
    c.tail = Tail::Upper;
    let d = inference::in_space_placebos(&p, &c).unwrap();
    assert!(d.p_values.iter().all(|&v| v == 1.0));
}

#[test]
fn filter_errors() {
    let p = common::random_panel(4, 6, 10, 6);
    let d = inference::in_space_placebos(&p, &uniform(2.0)).unwrap();
    assert!(matches!(inference::filter_mspe(&d, 0.0), Err(Error::InvalidArgument(_))));
    assert!(matches!(inference::filter_mspe(&d, -1.0), Err(Error::InvalidArgument(_))));
    // an exact treated fit leaves nobody under a tiny bound
    let exact = {
        let y = p.outcomes();
        let mut m = y.clone();
        for t in 0..10 {
            m[(0, t)] = 0.5 * y[(1, t)] + 0.5 * y[(2, t)];
        }
        p.with_outcomes(m).unwrap()
    };
    let d = inference::in_space_placebos(&exact, &uniform(f64::INFINITY)).unwrap();
    assert!(matches!(inference::filter_mspe(&d, 1e-30), Err(Error::NoSurvivingPlacebos)));
}

#[test]
fn placebo_runs_are_deterministic() {
    let p = common::random_panel(12, 7, 12, 8);
    let a = inference::in_space_placebos(&p, &uniform(2.0)).unwrap();
    let b = inference::in_space_placebos(&p, &uniform(2.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn in_time_placebo_uses_pre_period_only() {
    let p = common::random_panel(13, 6, 16, 12);
    let fit = inference::in_time_placebo(&p, 2006, &ScmConfig::uniform()).unwrap();
    assert_eq!(fit.times, (2000..2012).collect::<Vec<_>>());
    assert_eq!(fit.t0_index, 6);
    // changing the real post-period leaves the backdated fit untouched
    let moved = with_effect(&p, 50.0);
    assert_eq!(inference::in_time_placebo(&moved, 2006, &ScmConfig::uniform()).unwrap(), fit);
    let same = inference::in_time_placebo(&p, 2012, &ScmConfig::uniform()).unwrap();
    assert_eq!(same, scm::fit(&p, &ScmConfig::uniform()).unwrap());
    for bad in [1999, 2001, 2011, 2013] {
        assert!(inference::in_time_placebo(&p, bad, &ScmConfig::uniform()).is_err(), "{bad}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn p_values_are_fractions_of_kept(seed in any::<u64>(), mult in 0.5f64..50.0) {
        let p = common::random_panel(seed, 7, 10, 7);
        let d = match inference::in_space_placebos(&p, &uniform(mult)) {
            Ok(d) => d,
            Err(Error::NoSurvivingPlacebos) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let n = d.n_kept() as f64;
        for &v in d.p_values.iter().chain([d.ratio_p_value].iter()) {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(((v * n) - (v * n).round()).abs() < 1e-9);
        }
        prop_assert!(!d.kept.contains(&"T".to_string()));
    }

    #[test]
    fn kept_set_grows_with_multiplier(seed in any::<u64>()) {
        let p = common::random_panel(seed, 7, 10, 7);
        let all = inference::in_space_placebos(&p, &uniform(f64::INFINITY)).unwrap();
        let mut prev: Vec<String> = Vec::new();
        for m in [0.5, 1.0, 2.0, 5.0, 20.0, 1e6] {
            let kept = match inference::filter_mspe(&all, m) {
                Ok(d) => d.kept,
                Err(Error::NoSurvivingPlacebos) => Vec::new(),
                Err(e) => panic!("{e}"),
            };
            prop_assert!(prev.iter().all(|u| kept.contains(u)));
            prev = kept;
        }
        prop_assert_eq!(all.n_kept(), 6);
    }
}

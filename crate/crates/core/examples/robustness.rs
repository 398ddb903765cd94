//! Robustness checks around a synthetic-control fit: leave-one-out donor
//! refits, the break test on the gap series and rank-based intervals.

use counterfact::oracle::{self, Effect, FactorDgpSpec};
use counterfact::robustness;
use counterfact::scm::ScmConfig;

fn main() -> counterfact::Result<()> {
    let panel = oracle::simulate_panel(&FactorDgpSpec {
        n_donors: 15,
        effect: Effect::Constant(-1.0),
        ..FactorDgpSpec::default()
    })?;
    let config = ScmConfig::uniform();

    let loo = robustness::leave_one_out(&panel, &config, None)?;
    println!("baseline average effect {:+.3}", loo.baseline.att);
    for r in &loo.refits {
        println!("  without {:>4}: {:+.3}", r.removed, r.fit.att);
    }

    let break_test = robustness::diff_trend_test(&loo.baseline.gaps, panel.t0_index())?;
    println!(
        "break test: chi2 {:.2}, bootstrap p {:.4}, asymptotic p {:.4}",
        break_test.chi2, break_test.p_value, break_test.p_asymptotic
    );

    match robustness::sparsity_ci(&panel, &loo.baseline, 0.9, &config) {
        Ok(ci) => {
            println!("90% intervals from {} reference effects:", ci.n_reference);
            for row in &ci.rows {
                println!("  {:>3}  {:+.3}  [{:+.3}, {:+.3}]", row.time, row.gap, row.lo, row.hi);
            }
        }
        Err(e) => println!("no interval: {e}"),
    }
    Ok(())
}

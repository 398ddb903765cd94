//! L1-penalized synthetic control: signed weights and an intercept, with the
//! penalty picked by leave-one-period-out cross-validation.

use counterfact::lasso::{self, LassoConfig};
use counterfact::oracle::{self, Effect, FactorDgpSpec};

fn main() -> counterfact::Result<()> {
    let panel = oracle::simulate_panel(&FactorDgpSpec {
        n_donors: 12,
        effect: Effect::Constant(-1.0),
        ..FactorDgpSpec::default()
    })?;
    let config = LassoConfig::default();
    let grid = lasso::default_grid(&panel, &config);
    let (lambda, cv) = lasso::cv_lambda_with(&panel, &grid, &config)?;
    let best = cv.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "lambda {lambda:.4} (max {:.4}), CV error {best:.4}",
        lasso::lambda_max(&panel, &config)
    );

    let fit = lasso::fit_lasso_sc_with(&panel, lambda, &config)?;
    println!("intercept {:+.3}", fit.weights.intercept);
    for (d, w) in fit.donors.iter().zip(&fit.weights.w) {
        if *w != 0.0 {
            println!("  {d:>4}  {w:+.4}");
        }
    }
    println!("average effect {:+.3} (true -1)", fit.att);
    Ok(())
}

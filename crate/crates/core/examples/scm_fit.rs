//! Fit a synthetic control to a simulated panel and print the weights and
//! per-period effects.

use counterfact::oracle::{self, Effect, FactorDgpSpec};
use counterfact::scm::{self, ScmConfig};

fn main() -> counterfact::Result<()> {
    let panel = oracle::simulate_panel(&FactorDgpSpec {
        effect: Effect::Constant(-1.0),
        ..FactorDgpSpec::default()
    })?;
    let fit = scm::fit(&panel, &ScmConfig::default())?;

    println!("donor weights:");
    for (donor, w) in fit.nonzero_weights(1e-6) {
        println!("  {donor:>4}  {w:.4}");
    }
    println!("pre-period RMSE {:.4}, hull distance {:.4}", fit.pre_rmse, fit.hull_distance);
    for (t, g) in fit.times[fit.t0_index..].iter().zip(fit.effects()) {
        println!("  {t:>3}  effect {g:+.3}");
    }
    println!("average effect {:+.3} (true -1)", fit.att);
    Ok(())
}

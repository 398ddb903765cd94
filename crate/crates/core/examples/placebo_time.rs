//! In-time placebo: move the intervention back to a date when nothing
//! happened and check that the backdated fit shows no effect.

use counterfact::inference;
use counterfact::oracle::{self, Effect, FactorDgpSpec};
use counterfact::scm::ScmConfig;

fn main() -> counterfact::Result<()> {
    let panel = oracle::simulate_panel(&FactorDgpSpec {
        effect: Effect::Constant(-1.0),
        ..FactorDgpSpec::default()
    })?;
    let fake_t0 = panel.times()[10];
    let fit = inference::in_time_placebo(&panel, fake_t0, &ScmConfig::default())?;
    println!("true intervention at {}, placebo at {fake_t0}", panel.t0());
    for (t, g) in fit.times[fit.t0_index..].iter().zip(fit.effects()) {
        println!("  {t:>3}  gap {g:+.3}");
    }
    println!("mean placebo gap {:+.3}", fit.att);
    Ok(())
}

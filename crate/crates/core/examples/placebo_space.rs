//! In-space placebo inference: refit with every donor as the treated unit and
//! rank the treated effect among the placebo effects.

use counterfact::inference::{self, PlaceboConfig};
use counterfact::oracle::{self, Effect, FactorDgpSpec};
use counterfact::scm::ScmConfig;

fn main() -> counterfact::Result<()> {
    let panel = oracle::simulate_panel(&FactorDgpSpec {
        n_donors: 15,
        effect: Effect::Constant(-1.5),
        ..FactorDgpSpec::default()
    })?;
    let config = PlaceboConfig {
        scm: ScmConfig::uniform(),
        ..PlaceboConfig::default()
    };
    let dist = inference::in_space_placebos(&panel, &config)?;
    println!("{} of {} placebos kept by the 2x MSPE filter", dist.n_kept(), dist.placebos.len());
    for ((t, p), g) in dist.post_times.iter().zip(&dist.p_values).zip(dist.treated_fit.effects()) {
        println!("  {t:>3}  effect {g:+.3}  p = {p:.3}");
    }
    println!("RMSE-ratio p-value {:.3}", dist.ratio_p_value);

    // a looser filter keeps more placebos
    let loose = inference::filter_mspe(&dist, 20.0)?;
    println!("with a 20x filter: {} kept", loose.n_kept());
    Ok(())
}
